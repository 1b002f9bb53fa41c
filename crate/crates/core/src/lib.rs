//! Momentum-memory cross-modal knowledge distillation from paired slide and
//! omics data to slide-only inference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graphnet;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, ErrorKind, Result};
pub use evalkit::EvalReport;
pub use memory::{DynamicsRecord, MemoryBank};
pub use model::{ModelDims, MomkdModel};
pub use params::GroupKind;
pub use synthdata::{Dataset, PairedSample, SplitName};
pub use tensor::Tensor;
pub use train::{TrainOptions, TrainOutcome};
