// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! The M:(N-M) degenerate crossing model and its noise coupling.
//!
//! Units: hbar = 1 and the characteristic coupling scale Omega = 1, so every
//! number handed to these types is one of the dimensionless ratios
//! `kappa/Omega^2`, `gamma/Omega`, `k_B T/Omega` or `kappa t0/Omega`.
//! Omega is taken to be the magnitude of the effective Morris-Shore coupling of
//! the scheme under study.
//!
//! Basis ordering: indices `0..M` span the upper manifold (diabatic energy
//! `kappa t`), indices `M..N` the lower manifold (energy 0).

use nalgebra::{ComplexField, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{c, complexify, hermiticity_defect, CMatrix, CVector, Cplx, RMatrix, Real};

/// Coherent part of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec<T: Real> {
    n_total: usize,
    m_upper: usize,
    couplings: CMatrix<T>,
    chirp_rate: T,
    sweep_half_width: T,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(
        n_total: usize,
        m_upper: usize,
        couplings: CMatrix<T>,
        chirp_rate: T,
        sweep_half_width: T,
    ) -> Result<Self> {
        check_dims(n_total, m_upper)?;
        let expected = (m_upper, n_total - m_upper);
        if couplings.shape() != expected {
            return Err(Error::shape(
                "coupling matrix G",
                fmt_shape(expected),
                fmt_shape(couplings.shape()),
            ));
        }
        if !(chirp_rate > T::zero()) {
            return Err(Error::InvalidParameter(
                "chirp rate must be positive".into(),
            ));
        }
        if !(sweep_half_width > T::zero()) {
            return Err(Error::InvalidParameter(
                "sweep half-width must be positive".into(),
            ));
        }
        if couplings
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::InvalidParameter("couplings must be finite".into()));
        }
        Ok(Self {
            n_total,
            m_upper,
            couplings,
            chirp_rate,
            sweep_half_width,
        })
    }

    /// Build from the dimensionless sweep parameters `kappa/Omega^2` and `kappa t0/Omega`.
    pub fn from_sweep(couplings: CMatrix<T>, kappa: T, kappa_t0: T) -> Result<Self> {
        let m = couplings.nrows();
        let n = m + couplings.ncols();
        Self::new(n, m, couplings, kappa, kappa_t0 / kappa)
    }

    /// Real coupling matrix convenience constructor.
    pub fn from_real_sweep(couplings: &RMatrix<T>, kappa: T, kappa_t0: T) -> Result<Self> {
        Self::from_sweep(complexify(couplings), kappa, kappa_t0)
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn m_upper(&self) -> usize {
        self.m_upper
    }

    pub fn n_lower(&self) -> usize {
        self.n_total - self.m_upper
    }

    pub fn couplings(&self) -> &CMatrix<T> {
        &self.couplings
    }

    pub fn chirp_rate(&self) -> T {
        self.chirp_rate
    }

    pub fn sweep_half_width(&self) -> T {
        self.sweep_half_width
    }

    /// Diabatic energy of the upper manifold at time `t`.
    pub fn detuning(&self, t: T) -> T {
        self.chirp_rate * t
    }

    /// H(t) without the sweep-window check; used on the integrator hot path.
    pub fn hamiltonian(&self, t: T) -> CMatrix<T> {
        let n = self.n_total;
        let m = self.m_upper;
        let eps = c(self.detuning(t));
        let mut h = CMatrix::<T>::zeros(n, n);
        for i in 0..m {
            h[(i, i)] = eps;
        }
        h.view_mut((0, m), (m, n - m)).copy_from(&self.couplings);
        h.view_mut((m, 0), (n - m, m))
            .copy_from(&self.couplings.adjoint());
        h
    }
}

fn check_dims(n_total: usize, m_upper: usize) -> Result<()> {
    if m_upper == 0 || m_upper >= n_total {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= M < N, got M = {m_upper}, N = {n_total}"
        )));
    }
    Ok(())
}

fn fmt_shape(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

/// Block Hamiltonian at time `t`; `t` must lie in the sweep window `[-t0, t0]`.
pub fn build_hamiltonian<T: Real>(spec: &ModelSpec<T>, t: T) -> Result<CMatrix<T>> {
    let t0 = spec.sweep_half_width;
    let slack = t0 * T::lit(1e-12);
    if t < -t0 - slack || t > t0 + slack {
        return Err(Error::Domain(format!(
            "t = {} outside the sweep window [-{t0}, {t0}]",
            t.to_f64_lossy()
        )));
    }
    Ok(spec.hamiltonian(t))
}

/// System side of the system-bath coupling, plus the flattened bath parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec<T: Real> {
    noise_couplings: RMatrix<T>,
    rate_constant: T,
    temperature: T,
}

impl<T: Real> NoiseSpec<T> {
    pub fn new(noise_couplings: RMatrix<T>, rate_constant: T, temperature: T) -> Result<Self> {
        if !(rate_constant >= T::zero()) {
            return Err(Error::InvalidParameter(
                "rate constant gamma must be >= 0".into(),
            ));
        }
        if !(temperature >= T::zero()) {
            return Err(Error::InvalidParameter("temperature must be >= 0".into()));
        }
        if noise_couplings.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise couplings must be finite".into(),
            ));
        }
        Ok(Self {
            noise_couplings,
            rate_constant,
            temperature,
        })
    }

    /// Noiseless spec with the given coupling shape.
    pub fn silent(m_upper: usize, n_lower: usize) -> Self {
        Self {
            noise_couplings: RMatrix::zeros(m_upper, n_lower),
            rate_constant: T::zero(),
            temperature: T::zero(),
        }
    }

    pub fn noise_couplings(&self) -> &RMatrix<T> {
        &self.noise_couplings
    }

    pub fn rate_constant(&self) -> T {
        self.rate_constant
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn with_rate(&self, rate_constant: T) -> Result<Self> {
        Self::new(
            self.noise_couplings.clone(),
            rate_constant,
            self.temperature,
        )
    }
}

/// `X = [[0, W], [W^T, 0]]`.
pub fn build_noise_operator<T: Real>(
    spec: &NoiseSpec<T>,
    n_total: usize,
    m_upper: usize,
) -> Result<RMatrix<T>> {
    check_dims(n_total, m_upper)?;
    let w = &spec.noise_couplings;
    let expected = (m_upper, n_total - m_upper);
    if w.shape() != expected {
        return Err(Error::shape(
            "noise matrix W",
            fmt_shape(expected),
            fmt_shape(w.shape()),
        ));
    }
    let mut x = RMatrix::<T>::zeros(n_total, n_total);
    x.view_mut((0, m_upper), expected).copy_from(w);
    x.view_mut((m_upper, 0), (expected.1, expected.0))
        .copy_from(&w.transpose());
    Ok(x)
}

/// Bose factor `sign(w) / (1 - exp(-w / k_B T))`, with the `T = 0` limit taken analytically.
pub fn thermal_factor<T: Real>(omega: T, temperature: T) -> Result<T> {
    if omega == T::zero() {
        return Err(Error::Domain(
            "thermal factor requested at zero frequency".into(),
        ));
    }
    if temperature < T::zero() || !omega.is_finite() {
        return Err(Error::Domain(
            "need finite frequency and non-negative temperature".into(),
        ));
    }
    if temperature == T::zero() {
        return Ok(if omega > T::zero() {
            T::one()
        } else {
            T::zero()
        });
    }
    // 1 - e^{-x} = -expm1(-x); stays accurate for |x| << 1.
    let x = omega / temperature;
    let denom = -(-x).exp_m1();
    let n = if omega > T::zero() {
        T::one() / denom
    } else {
        -T::one() / denom
    };
    Ok(if n.is_finite() {
        n.max(T::zero())
    } else {
        T::zero()
    })
}

/// A validated density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix<T: Real> {
    entries: CMatrix<T>,
}

/// Tolerances every stored state is checked against.
pub const HERMITICITY_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-7;

impl<T: Real> DensityMatrix<T> {
    pub fn new(entries: CMatrix<T>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvalidState("matrix is not square".into()));
        }
        let herm = hermiticity_defect(&entries);
        if herm > T::lit(HERMITICITY_TOL) {
            return Err(Error::InvalidState(format!(
                "hermiticity defect {}",
                herm.to_f64_lossy()
            )));
        }
        let rho = Self { entries };
        let drift = rho.trace_drift();
        if drift > T::lit(TRACE_TOL) {
            return Err(Error::InvalidState(format!(
                "trace drift {}",
                drift.to_f64_lossy()
            )));
        }
        let min_eig = rho.min_eigenvalue();
        if min_eig < -T::lit(POSITIVITY_TOL) {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue {}",
                min_eig.to_f64_lossy()
            )));
        }
        Ok(rho)
    }

    /// `|psi><psi|` for a normalised `psi`.
    pub fn from_pure(psi: &CVector<T>) -> Result<Self> {
        let norm = psi.norm();
        if (norm - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidState(format!(
                "state norm {} != 1",
                norm.to_f64_lossy()
            )));
        }
        Self::new(psi * psi.adjoint())
    }

    pub fn maximally_mixed(n: usize) -> Self {
        let w = T::one() / T::from_usize(n).expect("dimension fits");
        Self {
            entries: CMatrix::<T>::identity(n, n) * c(w),
        }
    }

    /// Symmetrise `(m + m†)/2` and validate.
    pub fn from_symmetrized(m: &CMatrix<T>) -> Result<Self> {
        Self::new(symmetrize(m))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix<T> {
        &self.entries
    }

    pub fn into_inner(self) -> CMatrix<T> {
        self.entries
    }

    pub fn trace(&self) -> T {
        self.entries.trace().re
    }

    pub fn trace_drift(&self) -> T {
        (self.entries.trace() - Cplx::new(T::one(), T::zero())).modulus()
    }

    pub fn min_eigenvalue(&self) -> T {
        SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .fold(T::max_value().unwrap_or_else(T::one), |a, &b| a.min(b))
    }

    /// Population `<psi|rho|psi>` of a normalised state.
    pub fn population(&self, psi: &CVector<T>) -> T {
        (psi.adjoint() * &self.entries * psi)[(0, 0)].re
    }

    /// Diagonal in the bare basis.
    pub fn populations(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.entries[(i, i)].re).collect()
    }

    /// `(1/2) ||rho - sigma||_1`.
    pub fn trace_distance(&self, other: &Self) -> T {
        let diff = &self.entries - &other.entries;
        let eig = SymmetricEigen::new(symmetrize(&diff)).eigenvalues;
        eig.iter().fold(T::zero(), |a, x| a + x.abs()) * T::lit(0.5)
    }
}

pub(crate) fn symmetrize<T: Real>(m: &CMatrix<T>) -> CMatrix<T> {
    (m + m.adjoint()) * c(T::lit(0.5))
}

/// Projector onto the upper manifold, the derivative of H with respect to the detuning.
pub fn upper_projector<T: Real>(n_total: usize, m_upper: usize) -> CMatrix<T> {
    let mut p = DMatrix::zeros(n_total, n_total);
    for i in 0..m_upper {
        p[(i, i)] = c(T::one());
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::max_abs_diff;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn text_dfs_couplings(g: f64) -> CMatrix<f64> {
        complexify(&dmatrix![g / 2.0, -g / 2.0; -g / 2.0, g / 2.0])
    }

    #[test]
    fn hamiltonian_at_crossing_has_empty_diagonal_blocks() {
        let spec = ModelSpec::from_sweep(text_dfs_couplings(1.0), 0.1, 50.0).unwrap();
        let h = build_hamiltonian(&spec, 0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(h[(i, j)], c(0.0));
                assert_eq!(h[(i + 2, j + 2)], c(0.0));
            }
        }
        assert_eq!(h[(0, 2)], c(0.5));
        assert_eq!(h[(3, 1)], c(0.5));
    }

    #[test]
    fn hamiltonian_matches_two_by_two_block_form() {
        let g = 0.8;
        let spec = ModelSpec::from_sweep(text_dfs_couplings(g), 0.1, 50.0).unwrap();
        let t = -37.5;
        let h = build_hamiltonian(&spec, t).unwrap();
        let eps = 0.1 * t;
        let expected = complexify(&dmatrix![
            eps, 0.0, g / 2.0, -g / 2.0;
            0.0, eps, -g / 2.0, g / 2.0;
            g / 2.0, -g / 2.0, 0.0, 0.0;
            -g / 2.0, g / 2.0, 0.0, 0.0
        ]);
        assert!(max_abs_diff(&h, &expected) < 1e-15);
    }

    #[test]
    fn hamiltonian_rejects_times_outside_window() {
        let spec = ModelSpec::from_sweep(text_dfs_couplings(1.0), 0.1, 50.0).unwrap();
        assert!(build_hamiltonian(&spec, 500.0).is_ok());
        assert!(matches!(
            build_hamiltonian(&spec, 501.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn model_rejects_bad_shapes_and_rates() {
        let g = CMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            ModelSpec::new(4, 2, g.clone(), 0.1, 1.0),
            Err(Error::Shape { .. })
        ));
        assert!(ModelSpec::new(5, 2, g.clone(), 0.1, 1.0).is_ok());
        assert!(ModelSpec::new(5, 2, g.clone(), 0.0, 1.0).is_err());
        assert!(ModelSpec::new(5, 0, CMatrix::zeros(0, 5), 0.1, 1.0).is_err());
        assert!(ModelSpec::new(2, 2, CMatrix::zeros(2, 0), 0.1, 1.0).is_err());
    }

    #[test]
    fn hamiltonian_builds_in_single_precision() {
        let g = complexify(&dmatrix![0.5f32, -0.5; -0.5, 0.5]);
        let spec = ModelSpec::from_sweep(g, 0.1f32, 50.0).unwrap();
        let h = spec.hamiltonian(10.0);
        assert!((h[(0, 0)].re - 1.0).abs() < 1e-6);
        assert_eq!(hermiticity_defect(&h), 0.0);
    }

    #[test]
    fn noise_operator_for_uniform_half_couplings() {
        let noise = NoiseSpec::new(dmatrix![0.5, 0.5; 0.5, 0.5], 1.0, 0.0).unwrap();
        let x = build_noise_operator(&noise, 4, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let same_block = (i < 2) == (j < 2);
                assert_eq!(x[(i, j)], if same_block { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn noise_operator_zero_and_shape_errors() {
        let noise = NoiseSpec::<f64>::silent(1, 2);
        let x = build_noise_operator(&noise, 3, 1).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        assert!(matches!(
            build_noise_operator(&noise, 4, 2),
            Err(Error::Shape { .. })
        ));
        assert!(NoiseSpec::new(dmatrix![1.0], -1.0, 0.0).is_err());
        assert!(NoiseSpec::new(dmatrix![1.0], 1.0, -0.5).is_err());
    }

    #[test]
    fn thermal_factor_limits_and_values() {
        assert_eq!(thermal_factor(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(thermal_factor(-1.0, 0.0).unwrap(), 0.0);
        // 1 / (1 - e^{-0.1})
        let expected = 1.0 / (1.0 - (-0.1f64).exp());
        assert!((thermal_factor(1.0, 10.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 10.508331944775).abs() < 1e-9);
        assert!(matches!(thermal_factor(0.0, 1.0), Err(Error::Domain(_))));
        // deep in the Boltzmann tail
        assert_eq!(thermal_factor(-1e4, 1e-3).unwrap(), 0.0);
        assert_eq!(thermal_factor(1e4, 1e-3).unwrap(), 1.0);
    }

    #[test]
    fn density_matrix_validation() {
        let mixed = DensityMatrix::<f64>::maximally_mixed(4);
        assert!((mixed.trace() - 1.0).abs() < 1e-15);
        assert!(DensityMatrix::new(mixed.matrix() * c(2.0)).is_err());
        let mut bad = CMatrix::<f64>::zeros(2, 2);
        bad[(0, 0)] = c(1.5);
        bad[(1, 1)] = c(-0.5);
        assert!(DensityMatrix::new(bad).is_err());
        let mut skew = CMatrix::<f64>::identity(2, 2) * c(0.5);
        skew[(0, 1)] = Cplx::new(0.1, 0.1);
        skew[(1, 0)] = Cplx::new(0.1, 0.1);
        assert!(DensityMatrix::new(skew).is_err());
    }

    #[test]
    fn trace_distance_of_orthogonal_pure_states_is_one() {
        let a = DensityMatrix::from_pure(&CVector::<f64>::from_vec(vec![c(1.0), c(0.0)])).unwrap();
        let b = DensityMatrix::from_pure(&CVector::<f64>::from_vec(vec![c(0.0), c(1.0)])).unwrap();
        assert!((a.trace_distance(&b) - 1.0).abs() < 1e-14);
        assert!(a.trace_distance(&a) < 1e-15);
    }

    fn arb_coupling(m: usize, k: usize) -> impl Strategy<Value = CMatrix<f64>> {
        proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), m * k).prop_map(move |v| {
            CMatrix::from_iterator(m, k, v.into_iter().map(|(a, b)| Cplx::new(a, b)))
        })
    }

    proptest! {
        #[test]
        fn hamiltonian_is_hermitian(g in arb_coupling(2, 3), t in -100.0f64..100.0) {
            let spec = ModelSpec::from_sweep(g, 0.1, 50.0).unwrap();
            let h = spec.hamiltonian(t);
            prop_assert_eq!(hermiticity_defect(&h), 0.0);
        }

        #[test]
        fn hamiltonian_is_linear_in_time_through_upper_block(
            g in arb_coupling(2, 2), t1 in -500.0f64..500.0, t2 in -500.0f64..500.0
        ) {
            let spec = ModelSpec::from_sweep(g, 0.1, 50.0).unwrap();
            let lhs = spec.hamiltonian(t1) - spec.hamiltonian(t2);
            let rhs = upper_projector::<f64>(4, 2) * c(0.1 * (t1 - t2));
            prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
        }

        #[test]
        fn noise_operator_is_symmetric_with_empty_diagonal_blocks(
            w in proptest::collection::vec(-3.0f64..3.0, 6)
        ) {
            let w = RMatrix::from_vec(2, 3, w);
            let x = build_noise_operator(&NoiseSpec::new(w, 1.0, 0.0).unwrap(), 5, 2).unwrap();
            prop_assert_eq!(&x, &x.transpose());
            for i in 0..5 {
                for j in 0..5 {
                    if (i < 2) == (j < 2) {
                        prop_assert_eq!(x[(i, j)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn bose_factor_offset_is_one(omega in 1e-3f64..50.0, temp in 1e-3f64..50.0) {
            let d = thermal_factor(omega, temp).unwrap() - thermal_factor(-omega, temp).unwrap();
            prop_assert!((d - 1.0).abs() < 1e-12);
        }
    }
}
