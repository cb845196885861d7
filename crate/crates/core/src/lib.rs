//! Representation learning for one-shot retail product recognition.
//!
//! A small CNN backbone feeds Local Concepts Accumulation (LCA) pooling,
//! which averages the feature map over every rectangular window. A teacher
//! is trained contrastively on image pairs; its embeddings of unlabeled
//! images serve as pseudolabels for a noisy student. Frozen embeddings are
//! scored with a logistic-regression probe.

pub mod augment;
pub mod backbone;
pub mod ckpt;
pub mod classifier;
pub mod config;
pub mod dataio;
pub mod error;
pub mod lca;
pub mod losses;
pub mod pipeline;
pub mod probe;
pub mod store;
pub mod synthetic;
pub mod tensor;
pub mod tnsr;

pub use augment::AugmentSwitches;
pub use backbone::{Backbone, BackboneConfig, Checkpoint};
pub use ckpt::Container;
pub use classifier::{FitConfig, LogRegModel};
pub use config::RunConfig;
pub use dataio::{ImageRecord, Manifest};
pub use error::{Error, Result};
pub use lca::{lca_backward, lca_forward, lca_forward_bruteforce, lca_window_count, LcaConfig, Weighting};
pub use losses::LossConfig;
pub use pipeline::{ModelConfig, NegativeMode, PairSet, PseudoSet, TrainConfig};
pub use store::PseudolabelStore;
pub use synthetic::SyntheticSpec;
pub use tensor::{Real, SummedAreaTable, Tensor};
