// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Scalar abstraction shared by the numerical modules.

use na::ComplexField;
use nalgebra as na;
use num_traits as nt;

/// Real floating-point type the physics kernels are generic over (`f32`, `f64`).
pub trait Real:
    na::RealField + Copy + nt::FloatConst + nt::FromPrimitive + nt::ToPrimitive + Send + Sync
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Cplx<T> = na::Complex<T>;
pub type CMatrix<T> = na::DMatrix<Cplx<T>>;
pub type CVector<T> = na::DVector<Cplx<T>>;
pub type RMatrix<T> = na::DMatrix<T>;

#[inline]
pub(crate) fn c<T: Real>(re: T) -> Cplx<T> {
    Cplx::new(re, T::zero())
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).modulus()))
}

/// Largest absolute entry of `m - m†`.
pub fn hermiticity_defect<T: Real>(m: &CMatrix<T>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).modulus());
        }
    }
    worst
}

/// Lift a real matrix into the complex field.
pub fn complexify<T: Real>(m: &RMatrix<T>) -> CMatrix<T> {
    m.map(c)
}
