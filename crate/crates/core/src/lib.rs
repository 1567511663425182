//! Selective state-space scan kernel with analytic gradients, a bidirectional
//! scan encoder, and a desk-scale RGB-T single-object tracking harness built
//! on top of them, plus a scaling benchmark comparing the linear-time scan
//! against a softmax-attention reference.
//!
//! Everything is deterministic: fixed seeds produce bit-identical parameters,
//! training traces and tracking outputs on a given machine.

pub mod arrayfile;
pub mod assembly;
pub mod bench;
pub mod config;
pub mod encoder;
pub mod fd;
pub mod head;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod num;
pub mod rng;
pub mod selftest;
pub mod ssm;
pub mod synthetic;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use geom::Box2;
pub use rng::Rng;
pub use tensor::Mat;
