use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{invalid, Result};
use crate::local_adapt::rgb_to_y;

use super::img::{is_image_path, load_image};

/// Average luma of the images directly inside one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DirStats {
    pub dir: PathBuf,
    pub images: usize,
    /// Mean over images of each image's mean Y, on a 0-255 scale.
    pub mean_y: f64,
}

/// Mean Y per directory under `root` (recursively), in sorted path order.
pub fn dataset_stats(root: impl AsRef<Path>) -> Result<Vec<DirStats>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(invalid(
            "dataset_stats",
            format!("{} is not a directory", root.display()),
        ));
    }
    let mut per_dir: BTreeMap<PathBuf, (usize, f64)> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        let p = entry.path();
        if !entry.file_type().is_file() || !is_image_path(p) {
            continue;
        }
        let y = rgb_to_y(&load_image(p)?)?.cast::<f64>().mean();
        let slot = per_dir
            .entry(p.parent().unwrap_or(root).to_path_buf())
            .or_default();
        slot.0 += 1;
        slot.1 += y * 255.0;
    }
    Ok(per_dir
        .into_iter()
        .map(|(dir, (images, sum))| DirStats {
            dir,
            images,
            mean_y: sum / images as f64,
        })
        .collect())
}
