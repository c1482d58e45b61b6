pub mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod mathutil;
pub mod metrics;
pub mod gradcheck;
pub mod lab;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scaffold;
pub mod tensor;
pub mod vq;
