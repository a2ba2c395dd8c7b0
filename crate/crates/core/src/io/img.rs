use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{Shape, Tensor};

/// Extensions that [`load_image`] and [`save_image`] understand.
pub fn is_image_path(p: &Path) -> bool {
    format_of(p).is_some()
}

fn format_of(p: &Path) -> Option<ImageFormat> {
    let ext = p.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageFormat::Png),
        "ppm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Reads a PNG or binary PPM as a `1 x 3 x H x W` tensor in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let fmt = format_of(path)
        .ok_or_else(|| invalid("load_image", format!("unsupported file {}", path.display())))?;
    let rgb = image::load(std::io::BufReader::new(std::fs::File::open(path)?), fmt)?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = rgb.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Clamps to [0, 1] and rounds to the nearest 8-bit level.
pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(shape_mismatch(
            "to_rgb8",
            format!("expected 1x3xHxW, got {s}"),
        ));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

/// Writes PNG or binary PPM, chosen by extension.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_of(path)
        .ok_or_else(|| invalid("save_image", format!("unsupported file {}", path.display())))?;
    to_rgb8(t)?.save_with_format(path, fmt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(Shape::new(1, 3, 5, 7), |_, c, y, x| {
            ((c * 50 + y * 7 + x) % 256) as f32 / 255.0
        });
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &t).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back.max_abs_diff(&t).unwrap() < 1e-6, "{name}");
        }
    }

    #[test]
    fn rounding_and_clamping() {
        let t = Tensor::from_fn(Shape::new(1, 3, 1, 4), |_, _, _, x| {
            [-0.5, 0.5 / 255.0 - 1e-4, 0.5, 2.0][x]
        });
        let rgb = to_rgb8(&t).unwrap();
        let row: Vec<u8> = (0..4).map(|x| rgb.get_pixel(x, 0)[0]).collect();
        assert_eq!(row, vec![0, 0, 128, 255]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(to_rgb8(&Tensor::zeros(Shape::new(2, 3, 2, 2))).is_err());
        assert!(save_image("x.bmp", &Tensor::zeros(Shape::new(1, 3, 2, 2))).is_err());
        assert!(load_image("/nonexistent/x.png").is_err());
        assert!(is_image_path(Path::new("a/B.PNG")) && !is_image_path(Path::new("a.txt")));
    }
}
