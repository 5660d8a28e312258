//! Deterministic synthetic multi-view video: parametric solids seen from a
//! ring of pinhole cameras, with one moving actor whose motion pattern is the
//! class label.

pub mod camera;
pub mod dataset;
pub mod render;
pub mod scene;

pub use camera::{project_point, CameraSpec, Projection, Vec3};
pub use dataset::{camera_ring, generate_dataset, Dataset, GenConfig, MultiViewSample};
pub use render::{render_clip, ClipTensor, RenderedView};
pub use scene::{MotionKind, SceneSpec, Solid, SolidKind, Trajectory, NUM_MOTION_KINDS};
