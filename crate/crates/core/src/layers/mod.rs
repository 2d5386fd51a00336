//! The LATIS network: local/global feature blocks, pixel-shuffle
//! reconstruction and the bicubic residual path.
//!
//! Forward functions record onto a caller-owned [`Graph`](crate::Graph) and
//! look parameters up by name in a [`BoundParams`], so the same code serves
//! training (parameters as leaves) and inference (parameters as constants).

mod blocks;
mod config;
mod info;
mod model;
mod params;

pub use blocks::{cbam_forward, csconv_forward, gfe_forward, lgfb_forward};
pub use config::ModelConfig;
pub use info::{model_info, ModelInfo, REFERENCE_LR_SIZE};
pub use model::{latis_forward, Latis};
pub use params::{BoundParams, Param, Parameters};

pub(crate) use config::fnv1a;
