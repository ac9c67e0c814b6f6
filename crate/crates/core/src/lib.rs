//! Tabular two-tower recommender whose towers are a feature tokenizer
//! followed by a stack of Mamba or Transformer layers.

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod two_tower;

pub use error::{Error, Result};
pub use harness::{DatasetSpec, Preset, RunConfig};
pub use layers::{EmbedderConfig, EmbedderKind, MambaConfig, TransformerConfig};
pub use metrics::{EvalResult, Metric};
pub use ssm::ScanKernel;
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{Feature, FeatureKind, FeatureRow, FeatureSchema, FeatureValue};
pub use two_tower::{HeadConfig, TowerSpec, TwoTowerModel};
