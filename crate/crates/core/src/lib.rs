//! Stage-wise indoor scene synthesis driven by 3D box layouts.
//!
//! Scenes are built one object at a time. Each stage renders the layout to
//! depth, samples a latent with a depth-conditioned denoiser, and keeps the
//! background of the previous stage through depth-aware self-attention and
//! latent blending. Objects can later be moved in 3D through a
//! homography-warped translation stage.

pub mod attention;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod pipeline;
pub mod projector;
pub mod protocol;
pub mod raster;
pub mod render;
pub mod scene;
pub mod session;
pub mod tensor;
pub mod translation;

pub use attention::{KVRecord, TokenMask};
pub use denoiser::{AttentionMode, Capabilities, EpsModel, PredictOutput, PredictRequest, ToyDenoiser};
pub use error::{Error, Result};
pub use kernel::{Latent, NoiseSchedule};
pub use raster::{BBox2D, ImageRgb, Mask, SegmentationMask};
pub use render::{DepthMap, StageMasks};
pub use scene::{Box3D, Camera, Plane, Room, SceneLayout, Vec3};
