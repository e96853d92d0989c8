//! CAN-bus intrusion detection with a quantised MLP.
//!
//! Frames are parsed or simulated ([`can`], [`sim`]), packed into 40-byte
//! blocks of four messages ([`feature`]), classified by a quantisation-aware
//! MLP ([`cqmlp`], [`training`]) and finally folded into an integer
//! threshold pipeline ([`dataflow`]). [`evalkit`] scores predictions and
//! estimates inference cost.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod can;
pub mod cqmlp;
pub mod dataflow;
pub mod evalkit;
pub mod feature;
pub mod qtensor;
pub mod sim;
pub mod training;

pub use can::{CanFrame, Label};
pub use cqmlp::{CqmlpModel, Mode, Phase};
pub use dataflow::{streamline, ThresholdPipeline};
pub use evalkit::{ConfusionMatrix, CostReport, MetricsReport};
pub use feature::{build_blocks, split_dataset, DatasetSplit, FeatureBlock};
pub use training::{train_qat, TrainConfig};
