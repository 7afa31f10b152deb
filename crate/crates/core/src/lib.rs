//! Multi-receptive-field segmentation toolkit: an autograd tensor core,
//! the multi-receptive-field module and its parameter-sharing variant, the
//! edge-aware loss, a compact encoder-decoder network, synthetic data, and
//! training and evaluation loops.

pub mod config;
pub mod data;
pub mod eal;
pub mod error;
pub mod mrfm;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use eal::{EalConfig, EdgeMap, LabelMap, WeightMap};
pub use error::{Error, Result, StateDict};
pub use tensor::{Param, Shape, Tape, Tensor, Var};
