//! Files, synthetic data, accounting and timing.

pub mod accounting;
pub mod bench;
pub mod img;
pub mod loss_log;
pub mod model_file;
pub mod stats;
pub mod synth;

pub use accounting::{
    count_flops, count_macs, count_params, format_gflops, pointwise_ops_per_pixel, FlopConvention,
};
pub use bench::{bench_image, inference_rows, speedup, time_runs, with_threads, BenchRow, Timing};
pub use img::{is_image_path, load_image, save_image};
pub use loss_log::LossLog;
pub use model_file::{ModelData, ModelFile, Provenance, FORMAT_VERSION};
pub use stats::{dataset_stats, DirStats};
pub use synth::{synth_dataset, synth_image, synth_pair, SynthConfig};
