//! Differentiable volumetric rendering with volume feature rendering (VFR).
//!
//! Standard volume rendering evaluates the colour network once per sample
//! and blends the colours. VFR blends the *features* queried from the hash
//! grid and evaluates the network once per pixel. Both paths share the hash
//! grid, density mapping layer, sampler and trainer in this crate.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
