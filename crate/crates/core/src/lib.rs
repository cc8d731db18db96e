// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Degenerate Landau-Zener sweeps in the presence of quantum noise.
//!
//! The numerical kernels ([`model`], [`morris_shore`], [`dissipator`],
//! [`integrator`]) are generic over the real scalar type; the experiment
//! harness, the unravelling solver and the file formats work in `f64`.

pub mod config;
pub mod dissipator;
pub mod error;
pub mod experiments;
pub mod integrator;
pub mod model;
pub mod morris_shore;
pub mod scalar;
pub mod unravel;

pub use error::{Error, Result};
pub use scalar::{CMatrix, CVector, Cplx, RMatrix, Real};

pub type Model = model::ModelSpec<f64>;
pub type Noise = model::NoiseSpec<f64>;
pub type Density = model::DensityMatrix<f64>;
pub type Angles = morris_shore::RotationAngles<f64>;
pub type Decomposition = morris_shore::MsDecomposition<f64>;
pub type Generator = dissipator::DaviesGenerator<f64>;
pub type Tolerances = integrator::OdeTolerances<f64>;
pub type Options = integrator::EvolveOptions<f64>;
pub type Trajectory = integrator::Trajectory<f64>;
pub type CMat = CMatrix<f64>;
pub type CVec = CVector<f64>;
pub type RMat = RMatrix<f64>;

/// Toolkit version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
