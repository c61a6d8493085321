//! Feature-based 3D deformable image registration.
//!
//! Features (MIND-SSC or externally computed) are optionally projected onto
//! a shared PCA basis, matched by a coupled convex search over discrete
//! displacements on a control grid, then refined with Adam. Displacements
//! are in image voxels and follow the pullback convention: the warped
//! moving image is `moving(x + u(x))`.

pub mod adam;
pub mod config;
pub mod convex;
pub mod error;
pub mod features;
pub mod field;
mod filters;
mod interp;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod volume;

pub use adam::{refine, AdamConfig, LossRecord};
pub use config::{FeatureSource, Preprocessing, RegistrationConfig, StridePolicy};
pub use convex::{build_cost_volume, coupled_convex, ConvexConfig, CostVolume};
pub use error::{Error, Result};
pub use features::{FeatureVolume, MindConfig, PcaBasis, PcaConfig};
pub use field::{DisplacementField, Resolution};
pub use metrics::{LabelVolume, MetricsReport};
pub use pipeline::{register, warp_volume, RegistrationResult, StageTimings};
pub use synth::{make_pair, random_smooth_field, SynthConfig, SynthPair, Texture};
pub use volume::{GridGeometry, Volume3};
