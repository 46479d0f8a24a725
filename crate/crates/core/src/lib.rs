//! MAP denoising under a Fields-of-Experts prior, solved as a robustified
//! nonlinear least-squares problem with Levenberg–Marquardt over a sparse
//! grid-banded normal-equation system.
//!
//! The pieces, bottom up:
//!
//! - [`image`]: rasters, PGM I/O, seeded noise, rounding, PSNR.
//! - [`model`]: filter banks and their text format.
//! - [`loss`]: the log loss and the residual/Jacobian corrector.
//! - [`energy`]: energy, gradient, residual blocks, normal equations.
//! - [`sparse`]: stencil-stored SPD systems and a PCG solver.
//! - [`optimizer`]: LM, a gradient-descent baseline, gradient checking.
//! - [`bench`]: resizing, the scaling benchmark and the image-suite runner.

pub mod bench;
pub mod energy;
pub mod image;
pub mod loss;
pub mod model;
pub mod optimizer;
pub mod sparse;

pub use energy::{energy, gradient, EnergyBreakdown, Problem};
pub use image::{Image, NoiseSpec};
pub use model::{builtin_model, parse_model, serialize_model, FoeModel};
pub use optimizer::{gd_denoise, lm_denoise, LmOptions, SolveReport, Termination};
