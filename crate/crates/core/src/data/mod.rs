//! Analytic moving-blob scenes and multi-view video datasets on disk.

mod dataset;
mod scene;

pub use dataset::{
    conditioning_cameras, generate_dataset, place_cameras, project_keypoints, read_keypoints, Dataset, DatasetConfig, FrameRecord,
};
pub use scene::{Blob, SyntheticScene};
