//! One-step generative sampling with energy-distance scoring heads.

pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod mar;
pub mod nn;
pub mod stats;
