//! File formats shared by every module: the `LH2T` tensor container,
//! 16-bit PGM depth maps, PPM colour images, `key = value` run configs and
//! CSV metric logs.

mod config;
mod image;
mod metrics;
mod tensor;

pub use config::RunConfig;
pub use image::{read_pgm, read_ppm, write_pgm, write_ppm, Raster};
pub use metrics::{emit_metrics, format_sig, metrics_to_string, MetricRecord};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, Tensor};
