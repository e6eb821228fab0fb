//! Transferable displacement fields: query features from a grid of
//! encoded surface normals drive a FiLM-conditioned displacement network.

pub mod grid;
pub mod model;
pub mod pipeline;

pub use grid::{ConvStack, FeatureGrid, GridLayout, GridMode};
pub use model::{Codes, TransferModel, TransferNetConfig, TransferNets};
pub use pipeline::{transfer_pipeline, BaseNetConfig, TransferConfig, TransferInputs, TransferPipeline};
