//! Synthetic two-camera scenes: a shared 3D layout rendered from a
//! ground-level camera (source) and an elevated camera (target).

pub mod camera;
mod dataset;
mod featurize;
mod generate;
pub mod netpbm;
mod render;

pub use camera::{apply_view_transform, intrinsics, look_rotation, CameraPose, ViewTransform};
pub use dataset::{
    generate_dataset, load_dataset, make_cross_view_dataset, write_dataset, Dataset, DatasetSpec, Manifest, Split,
    SplitEntry, SplitManifest,
};
pub use featurize::{area_downsample, area_downsample_adjoint, featurize, featurize_view};
pub use generate::{sample_poses, sample_scene, PoseRanges, SceneFamily};
pub use render::{
    render, Appearance, SceneConfig, SceneObject, Shape, View, BUILDING, CAR, CLASS_NAMES, DEFAULT_PALETTE,
    NUM_CLASSES, PERSON, ROAD, TERRAIN, TREE,
};
