//! Multi-task volumetric segmentation of tubular structures in 3-D
//! microscopy volumes.
//!
//! The crate bundles everything needed to train and evaluate the network at
//! desk scale: a dense-tensor autodiff engine with the 3-D primitives the
//! architecture needs, the hierarchical view-ensemble convolution blocks,
//! centerline proximity ground truth, losses and overlap metrics, synthetic
//! data generation, and the training/evaluation harness.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod groundtruth;
pub mod hvec;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use model::{EmNet, ModelConfig};
pub use params::{ParamSet, Parameter};
pub use tensor::{Element, Graph, Tensor, Var};
pub use trainer::{Dataset, TrainConfig, TrainSample};
pub use volume::{CenterlineSet, Volume, VolumeData};
