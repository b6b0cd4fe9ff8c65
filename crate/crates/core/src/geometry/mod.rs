//! Window partitioning, learned window transforms and bilinear sampling.
//!
//! A feature map is split into `s×s` windows (zero-padded on the bottom
//! and right). Varied-size variants move, rescale and rotate each window
//! per head, then read keys and values at the transformed lattice with
//! bilinear interpolation.

pub mod export;
pub mod partition;
pub(crate) mod sampling;
pub mod transform;

pub use export::{geometry_records, render_svg, window_corners, write_csv, GeometryRecord};
pub use partition::WindowGrid;
pub use sampling::bilinear_sample;
pub use transform::{predict_transform, transform_grid, SampleGrid, WindowParams, WindowTransform};

/// Which sampled stream a recorded transform drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleStream {
    /// one transform shared by keys and values
    KeyValue,
    Key,
    Value,
}

impl SampleStream {
    pub fn tag(self) -> &'static str {
        match self {
            SampleStream::KeyValue => "kv",
            SampleStream::Key => "k",
            SampleStream::Value => "v",
        }
    }
}
