//! Latency-coded spiking neural networks trained with backpropagation
//! through time.
//!
//! The crate covers the full desk-scale pipeline: a small reverse-mode tape
//! ([`autodiff`]), LIF neurons with soft reset and surrogate gradients
//! ([`lif`]), a learned latency encoder with a straight-through backward
//! ([`encoder`]), first-spike decoding with membrane-potential tie-breaking
//! ([`decoder`]), the temporal adaptive decision loss ([`loss`]), training
//! ([`trainer`]), checkpoints, datasets and the energy / similarity /
//! robustness analyses ([`analysis`]).

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod lif;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, NodeId, NormMode};
pub use decoder::{Decision, TieBreak};
pub use encoder::{EncodeMode, EncodedInput, EncoderConfig};
pub use error::{Error, Result};
pub use lif::{LifConfig, LifTrace};
pub use loss::{LossKind, TadConfig};
pub use network::{build_model, ForwardRecord, LayerSpec, Model, ModelSpec, Preset};
pub use tensor::Tensor;
pub use trainer::{Metrics, TrainConfig};
