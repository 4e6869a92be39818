//! Dual-diffusion class-conditional GAN training at desk scale.
//!
//! Two independently scheduled forward-diffusion noise injectors feed a
//! timestep-aware discriminator and a timestep-aware dual-headed classifier,
//! which together supervise a class-conditional generator. Everything runs
//! on a small `f64` reverse-mode autodiff core with MLP networks.

pub mod autodiff;
pub mod diffusion;
pub mod intensity;
pub mod networks;
pub mod objectives;
pub mod datasets;
pub mod metrics;
pub mod checkpoint;
pub mod config;
pub mod training;
