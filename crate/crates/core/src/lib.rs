//! Stereo fisheye hand regression.
//!
//! The crate covers the whole pipeline: fisheye camera geometry and the
//! metadata side input, a procedural parametric hand, the regression
//! network with mono and stereo paths, the training objective, a synthetic
//! stereo dataset generator and the train / evaluate / infer harness.

pub mod geometry;
pub mod hand_model;
pub mod harness;
pub mod kv;
pub mod metadata;
pub mod losses;
pub mod regressor;
pub mod synth;
