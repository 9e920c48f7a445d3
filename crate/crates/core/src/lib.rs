//! Thin-object mesh reconstruction from posed silhouettes.
//!
//! The pipeline: COLMAP poses ([`colmap`]) and masked frames ([`dataprep`])
//! feed an SDF on a tetrahedral grid ([`tetgrid`]) that is optimized
//! ([`optimize`]) through a soft silhouette renderer ([`softsil`]) with
//! smoothness regularizers ([`regularize`]). [`meshkit`] exports and scores
//! the result.

pub mod colmap;
pub mod dataprep;
pub mod meshkit;
pub mod optimize;
pub mod regularize;
pub mod scene_file;
pub mod softsil;
pub mod synthetic;
pub mod tetgrid;

pub use colmap::{CameraIntrinsics, CameraModel, ColmapError, Pose, SceneModel, SimTransform};
pub use dataprep::{ImageBuffer, View};
pub use meshkit::MeshQualityReport;
pub use optimize::{train, TrainConfig, TrainError, TrainReport};
pub use tetgrid::{marching_tets, SdfField, TetGrid, TriMesh};
