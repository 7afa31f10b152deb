//! Synthetic data, augmentation, netpbm image I/O and the on-disk dataset
//! layout.

pub mod augment;
pub mod dataset;
pub mod netpbm;
pub mod synth;

pub use augment::{augment, AugmentParams, SCALES};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, Gray};
pub use synth::{generate, generate_scene, SceneConfig, SegSample, ShapeFamily, ShapeInstance};
