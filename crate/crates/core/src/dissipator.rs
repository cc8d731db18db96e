// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Instantaneous Davies generator.
//!
//! At every time the Hamiltonian is split into its eigen-clusters `Pi_i`; the
//! noise operator is sandwiched into jump operators `Pi_i X Pi_j` (i != j),
//! each with rate `gamma N(eps_j - eps_i, T)`. The spectrum can come from a
//! general Hermitian eigensolver or, for the block model, analytically from
//! the Morris-Shore pairs of the coherent coupling.

use nalgebra::SymmetricEigen;

use crate::error::Result;
use crate::model::{build_noise_operator, thermal_factor, ModelSpec, NoiseSpec};
use crate::morris_shore::{morris_shore_general, MsDecomposition, RANK_TOL};
use crate::scalar::{c, complexify, CMatrix, Cplx, Real};

/// Jump operators with Frobenius norm at or below this are dropped.
pub const CHANNEL_NORM_TOL: f64 = 1e-14;

/// Relative degeneracy tolerance: `1e-6 max(1, spectral range)`.
pub const CLUSTER_REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Cluster<T: Real> {
    pub energy: T,
    pub projector: CMatrix<T>,
    pub multiplicity: usize,
}

/// Eigenvalues grouped into degenerate clusters with their orthogonal projectors.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition<T: Real> {
    pub clusters: Vec<Cluster<T>>,
}

impl<T: Real> SpectralDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.projector.nrows())
    }

    /// `sum_i eps_i Pi_i`.
    pub fn reconstruct(&self) -> CMatrix<T> {
        let n = self.dim();
        self.clusters.iter().fold(CMatrix::zeros(n, n), |acc, cl| {
            acc + &cl.projector * c(cl.energy)
        })
    }
}

/// Sorted eigenpairs plus a cluster label per eigenvector.
#[derive(Clone, Debug)]
pub(crate) struct Eigenbasis<T: Real> {
    pub values: Vec<T>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: CMatrix<T>,
    pub labels: Vec<usize>,
    pub cluster_energy: Vec<T>,
}

impl<T: Real> Eigenbasis<T> {
    fn from_unsorted(values: Vec<T>, vectors: CMatrix<T>, tol: Option<T>) -> Self {
        let n = values.len();
        let order = ascending(&values);
        let vals: Vec<T> = order.iter().map(|&i| values[i]).collect();
        let vecs = CMatrix::from_fn(n, n, |r, col| vectors[(r, order[col])]);
        Self::in_given_order(vals, vecs, tol)
    }

    /// Cluster without reordering the columns; labels still follow ascending energy.
    fn in_given_order(values: Vec<T>, vectors: CMatrix<T>, tol: Option<T>) -> Self {
        let n = values.len();
        let order = ascending(&values);
        let sorted: Vec<T> = order.iter().map(|&i| values[i]).collect();
        let tol = tol.unwrap_or_else(|| default_cluster_tol(&sorted));
        let mut labels = vec![0; n];
        let mut energies: Vec<T> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (k, &v) in sorted.iter().enumerate() {
            if k > 0 && v - sorted[k - 1] <= tol {
                let last = energies.len() - 1;
                energies[last] += v;
                counts[last] += 1;
            } else {
                energies.push(v);
                counts.push(1);
            }
            labels[order[k]] = energies.len() - 1;
        }
        let vals = values;
        let vecs = vectors;
        let cluster_energy = energies
            .iter()
            .zip(&counts)
            .map(|(&e, &k)| e / T::from_usize(k).expect("small count"))
            .collect();
        Self {
            values: vals,
            vectors: vecs,
            labels,
            cluster_energy,
        }
    }

    fn decomposition(&self) -> SpectralDecomposition<T> {
        let n = self.values.len();
        let mut clusters: Vec<Cluster<T>> = self
            .cluster_energy
            .iter()
            .map(|&e| Cluster {
                energy: e,
                projector: CMatrix::zeros(n, n),
                multiplicity: 0,
            })
            .collect();
        for (k, &lab) in self.labels.iter().enumerate() {
            let v = self.vectors.column(k);
            clusters[lab].projector += &v * v.adjoint();
            clusters[lab].multiplicity += 1;
        }
        SpectralDecomposition { clusters }
    }
}

fn ascending<T: Real>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn default_cluster_tol<T: Real>(sorted: &[T]) -> T {
    let range = match (sorted.first(), sorted.last()) {
        (Some(&lo), Some(&hi)) => hi - lo,
        _ => T::zero(),
    };
    T::lit(CLUSTER_REL_TOL) * range.max(T::one())
}

fn eigensolve<T: Real>(h: &CMatrix<T>, tol: Option<T>) -> Eigenbasis<T> {
    let eig = SymmetricEigen::new(h.clone());
    Eigenbasis::from_unsorted(
        eig.eigenvalues.iter().copied().collect(),
        eig.eigenvectors,
        tol,
    )
}

/// Cluster the spectrum of a Hermitian `h`: eigenvalues whose gap is at most
/// `tol` share a cluster. `None` selects the default relative tolerance.
pub fn spectral_decompose<T: Real>(h: &CMatrix<T>, tol: Option<T>) -> SpectralDecomposition<T> {
    eigensolve(h, tol).decomposition()
}

/// One dissipative channel `Pi_i X Pi_j`, carrying population from cluster `j` to cluster `i`.
#[derive(Clone, Debug)]
pub struct JumpChannel<T: Real> {
    /// `eps_j - eps_i`
    pub omega: T,
    pub operator: CMatrix<T>,
    pub rate: T,
    pub to: usize,
    pub from: usize,
}

/// All `i != j` channels with a non-negligible jump operator.
pub fn jump_channels<T: Real>(
    sd: &SpectralDecomposition<T>,
    x: &CMatrix<T>,
    gamma: T,
    temperature: T,
) -> Result<Vec<JumpChannel<T>>> {
    let cut = T::lit(CHANNEL_NORM_TOL);
    let mut out = Vec::new();
    for (i, ci) in sd.clusters.iter().enumerate() {
        let left = &ci.projector * x;
        for (j, cj) in sd.clusters.iter().enumerate() {
            if i == j {
                continue;
            }
            let op = &left * &cj.projector;
            if op.norm() <= cut {
                continue;
            }
            let omega = cj.energy - ci.energy;
            let rate = gamma * thermal_factor(omega, temperature)?;
            out.push(JumpChannel {
                omega,
                operator: op,
                rate,
                to: i,
                from: j,
            });
        }
    }
    Ok(out)
}

/// `D(O, rho) = O rho O† - {O†O, rho}/2`
pub fn dissipator<T: Real>(op: &CMatrix<T>, rho: &CMatrix<T>) -> CMatrix<T> {
    let od = op.adjoint();
    let odo = &od * op;
    op * rho * &od - (&odo * rho + rho * &odo) * c(T::lit(0.5))
}

/// `-i[H, rho] + sum gamma_ij D(X_ij, rho)`
pub fn lindblad_rhs<T: Real>(
    rho: &CMatrix<T>,
    h: &CMatrix<T>,
    channels: &[JumpChannel<T>],
) -> CMatrix<T> {
    let minus_i = Cplx::new(T::zero(), -T::one());
    let mut out = (h * rho - rho * h) * minus_i;
    for ch in channels.iter().filter(|ch| ch.rate > T::zero()) {
        out += dissipator(&ch.operator, rho) * c(ch.rate);
    }
    out
}

/// Where the instantaneous spectrum comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpectrumMethod {
    /// Analytic two-level diagonalisation of each Morris-Shore pair of `G`.
    #[default]
    MorrisShore,
    /// Dense Hermitian eigensolver on `H(t)`.
    Eigensolver,
}

/// Exact spectrum of `H(t)` from the time-independent Morris-Shore basis of `G`.
///
/// In that basis `H(t)` is a direct sum of 2x2 blocks `[[kt, s_k], [s_k, 0]]`
/// plus spectators at `kt` (upper) and `0` (lower).
#[derive(Clone, Debug)]
pub struct MorrisShoreSpectrum<T: Real> {
    ms: MsDecomposition<T>,
}

impl<T: Real> MorrisShoreSpectrum<T> {
    pub fn new(model: &ModelSpec<T>) -> Self {
        let mut ms = morris_shore_general(model.couplings());
        // Rank-deficient couplings leave numerically tiny pairs whose mixing angle
        // would flip within ~s/k of the crossing; keep those pairs diabatic.
        let smax = ms.pair_couplings.iter().fold(T::zero(), |a, &b| a.max(b));
        for s in &mut ms.pair_couplings {
            if *s <= T::lit(RANK_TOL) * smax {
                *s = T::zero();
            }
        }
        Self { ms }
    }

    pub fn decomposition(&self) -> &MsDecomposition<T> {
        &self.ms
    }

    pub(crate) fn eigenbasis(&self, detuning: T, tol: Option<T>) -> Eigenbasis<T> {
        let (values, vectors) = self.ordered_eigenpairs(detuning);
        Eigenbasis::from_unsorted(values, vectors, tol)
    }

    /// Eigenpairs in Morris-Shore order: `(+, -)` per pair, then upper and
    /// lower spectators. The columns vary smoothly with the detuning.
    fn ordered_eigenpairs(&self, detuning: T) -> (Vec<T>, CMatrix<T>) {
        let m = self.ms.m_upper();
        let l = self.ms.n_lower();
        let n = m + l;
        let k = self.ms.pair_couplings.len();
        let half = T::lit(0.5);
        let mut values = Vec::with_capacity(n);
        let mut vectors = CMatrix::zeros(n, n);
        let mut col = 0;
        for p in 0..k {
            let s = self.ms.pair_couplings[p];
            let r = (detuning * detuning * T::lit(0.25) + s * s).sqrt();
            let (hi, lo) = if s == T::zero() {
                (detuning, T::zero())
            } else if detuning >= T::zero() {
                let hi = detuning * half + r;
                (
                    hi,
                    if hi > T::zero() {
                        -(s * s) / hi
                    } else {
                        T::zero()
                    },
                )
            } else {
                let lo = detuning * half - r;
                (
                    if lo < T::zero() {
                        -(s * s) / lo
                    } else {
                        T::zero()
                    },
                    lo,
                )
            };
            let theta = if s == T::zero() {
                T::zero()
            } else {
                (T::lit(2.0) * s).atan2(detuning) * half
            };
            let (sn, cs) = theta.sin_cos();
            let u = self.ms.upper_basis.column(p);
            let v = self.ms.lower_basis.column(p);
            for row in 0..m {
                vectors[(row, col)] = u[row] * c(cs);
                vectors[(row, col + 1)] = u[row] * c(-sn);
            }
            for row in 0..l {
                vectors[(m + row, col)] = v[row] * c(sn);
                vectors[(m + row, col + 1)] = v[row] * c(cs);
            }
            values.push(hi);
            values.push(lo);
            col += 2;
        }
        for p in k..m {
            vectors
                .view_mut((0, col), (m, 1))
                .copy_from(&self.ms.upper_basis.column(p));
            values.push(detuning);
            col += 1;
        }
        for p in k..l {
            vectors
                .view_mut((m, col), (l, 1))
                .copy_from(&self.ms.lower_basis.column(p));
            values.push(T::zero());
            col += 1;
        }
        (values, vectors)
    }

    /// Spectral decomposition of `H(t)` for the model this was built from.
    pub fn spectral_decompose(
        &self,
        model: &ModelSpec<T>,
        t: T,
        tol: Option<T>,
    ) -> SpectralDecomposition<T> {
        self.eigenbasis(model.detuning(t), tol).decomposition()
    }
}

/// Time-dependent Lindblad right-hand side for a model/noise pair.
///
/// Evaluates the same generator as [`jump_channels`] + [`lindblad_rhs`] but
/// works in the instantaneous eigenbasis, where every projector is a
/// coordinate mask.
#[derive(Clone, Debug)]
pub struct DaviesGenerator<T: Real> {
    model: ModelSpec<T>,
    x: CMatrix<T>,
    gamma: T,
    temperature: T,
    cluster_tol: Option<T>,
    method: SpectrumMethod,
    ms: Option<MorrisShoreSpectrum<T>>,
    silent: bool,
}

impl<T: Real> DaviesGenerator<T> {
    pub fn new(model: &ModelSpec<T>, noise: &NoiseSpec<T>, method: SpectrumMethod) -> Result<Self> {
        let x = complexify(&build_noise_operator(
            noise,
            model.n_total(),
            model.m_upper(),
        )?);
        let silent =
            noise.rate_constant() == T::zero() || x.iter().all(|z| z.norm_sqr() == T::zero());
        let ms = (method == SpectrumMethod::MorrisShore).then(|| MorrisShoreSpectrum::new(model));
        Ok(Self {
            model: model.clone(),
            x,
            gamma: noise.rate_constant(),
            temperature: noise.temperature(),
            cluster_tol: None,
            method,
            ms,
            silent,
        })
    }

    /// Override the degeneracy clustering tolerance.
    pub fn with_cluster_tol(mut self, tol: T) -> Self {
        self.cluster_tol = Some(tol);
        self
    }

    pub fn model(&self) -> &ModelSpec<T> {
        &self.model
    }

    pub fn noise_operator(&self) -> &CMatrix<T> {
        &self.x
    }

    pub fn method(&self) -> SpectrumMethod {
        self.method
    }

    /// True when the dissipator vanishes identically (gamma = 0 or W = 0).
    pub fn is_unitary(&self) -> bool {
        self.silent
    }

    fn eigenbasis(&self, t: T) -> Eigenbasis<T> {
        match &self.ms {
            Some(ms) => ms.eigenbasis(self.model.detuning(t), self.cluster_tol),
            None => eigensolve(&self.model.hamiltonian(t), self.cluster_tol),
        }
    }

    /// Cluster decomposition of `H(t)` used by this generator.
    pub fn spectral_decomposition(&self, t: T) -> SpectralDecomposition<T> {
        self.eigenbasis(t).decomposition()
    }

    /// Explicit channel list at time `t`.
    pub fn channels(&self, t: T) -> Result<Vec<JumpChannel<T>>> {
        jump_channels(
            &self.spectral_decomposition(t),
            &self.x,
            self.gamma,
            self.temperature,
        )
    }

    /// `d rho / dt` at time `t`.
    pub fn rhs(&self, t: T, rho: &CMatrix<T>) -> CMatrix<T> {
        if self.silent {
            let h = self.model.hamiltonian(t);
            return (&h * rho - rho * &h) * Cplx::new(T::zero(), -T::one());
        }
        let eb = self.eigenbasis(t);
        let v = &eb.vectors;
        let vd = v.adjoint();
        let rp = &vd * rho * v;
        let mut total = self.dissipate_in_eigenbasis(&eb, &rp);
        let minus_i = Cplx::new(T::zero(), -T::one());
        let n = eb.values.len();
        for a in 0..n {
            for b in 0..n {
                total[(a, b)] += rp[(a, b)] * c(eb.values[a] - eb.values[b]) * minus_i;
            }
        }
        v * total * vd
    }

    /// Dissipator acting on `rp`, a state expressed in the columns of `eb`.
    fn dissipate_in_eigenbasis(&self, eb: &Eigenbasis<T>, rp: &CMatrix<T>) -> CMatrix<T> {
        let v = &eb.vectors;
        let xp = v.adjoint() * &self.x * v;
        let n = eb.values.len();
        let nc = eb.cluster_energy.len();
        let lab = &eb.labels;

        // Cluster-pair rates; zero for negligible blocks so the channel set matches `jump_channels`.
        let mut block_norm = vec![T::zero(); nc * nc];
        for a in 0..n {
            for b in 0..n {
                block_norm[lab[a] * nc + lab[b]] += xp[(a, b)].norm_sqr();
            }
        }
        let cut = T::lit(CHANNEL_NORM_TOL * CHANNEL_NORM_TOL);
        let mut rate = vec![T::zero(); nc * nc];
        for i in 0..nc {
            for j in 0..nc {
                if i != j && block_norm[i * nc + j] > cut {
                    let omega = eb.cluster_energy[j] - eb.cluster_energy[i];
                    rate[i * nc + j] = self.gamma
                        * thermal_factor(omega, self.temperature)
                            .expect("distinct clusters have omega != 0");
                }
            }
        }

        let zero = Cplx::new(T::zero(), T::zero());
        let half = T::lit(0.5);
        // Jump part: sum_{J != I} r_IJ (P_I X' P_J rho' P_J X' P_I)
        let mut jump = CMatrix::zeros(n, n);
        // Anticommutator kernel: sum_{I != J} r_IJ P_J X' P_I X' P_J
        let mut kern = CMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                if lab[a] != lab[b] {
                    continue;
                }
                let ci = lab[a];
                let mut acc_j = zero;
                let mut acc_k = zero;
                for k in 0..n {
                    let ck = lab[k];
                    if ck == ci {
                        continue;
                    }
                    let r_in = rate[ci * nc + ck];
                    if r_in > T::zero() {
                        let mut inner = zero;
                        for l in 0..n {
                            if lab[l] == ck {
                                inner += rp[(k, l)] * xp[(l, b)];
                            }
                        }
                        acc_j += xp[(a, k)] * inner * c(r_in);
                    }
                    let r_out = rate[ck * nc + ci];
                    if r_out > T::zero() {
                        acc_k += xp[(a, k)] * xp[(k, b)] * c(r_out);
                    }
                }
                jump[(a, b)] = acc_j;
                kern[(a, b)] = acc_k;
            }
        }
        jump - (&kern * rp + rp * &kern) * c(half)
    }
}

/// The same generator in the adiabatic interaction frame of the analytic
/// spectrum: `r = P(t)^† V(t)^† rho V(t) P(t)`, with `V` the Morris-Shore
/// eigenvectors and `P = exp(-i int_{t_start}^t Lambda)` the dynamical phases.
///
/// Only the nonadiabatic pair coupling `d theta / dt` survives as a coherent
/// term, so the state varies on the slow scale of the sweep instead of the
/// Bohr frequencies.
#[derive(Clone, Debug)]
pub struct AdiabaticFrame<T: Real> {
    generator: DaviesGenerator<T>,
    ms: MorrisShoreSpectrum<T>,
    t_start: T,
    /// Splitting integral of each pair at `t_start`.
    split_start: Vec<T>,
}

impl<T: Real> AdiabaticFrame<T> {
    pub fn new(generator: DaviesGenerator<T>) -> Self {
        let ms = generator
            .ms
            .clone()
            .unwrap_or_else(|| MorrisShoreSpectrum::new(&generator.model));
        let t_start = -generator.model.sweep_half_width();
        let mut frame = Self {
            generator,
            ms,
            t_start,
            split_start: Vec::new(),
        };
        frame.split_start = frame
            .ms
            .ms
            .pair_couplings
            .iter()
            .map(|&s| frame.splitting_integral(s, t_start))
            .collect();
        frame
    }

    pub fn generator(&self) -> &DaviesGenerator<T> {
        &self.generator
    }

    fn basis(&self, t: T) -> Eigenbasis<T> {
        let (values, vectors) = self.ms.ordered_eigenpairs(self.generator.model.detuning(t));
        Eigenbasis::in_given_order(values, vectors, self.generator.cluster_tol)
    }

    /// `int sqrt(k^2 t^2 + 4 s^2) dt`, or `int k t dt` for an uncoupled pair.
    fn splitting_integral(&self, s: T, t: T) -> T {
        let k = self.generator.model.chirp_rate();
        let two = T::lit(2.0);
        let r = (k * k * t * t + T::lit(4.0) * s * s).sqrt();
        if s == T::zero() {
            return k * t * t * T::lit(0.5);
        }
        t * r * T::lit(0.5) + two * s * s / k * (k * t / (two * s)).asinh()
    }

    /// `exp(i phi_a(t))` for every frame vector `a`, with `phi_a` the
    /// dynamical phase accumulated since the start of the sweep.
    fn phase_factors(&self, t: T) -> Vec<Cplx<T>> {
        let ms = &self.ms.ms;
        let k = self.generator.model.chirp_rate();
        let diabatic = k * (t * t - self.t_start * self.t_start);
        let unit = |phi: T| {
            let (sn, cs) = phi.sin_cos();
            Cplx::new(cs, sn)
        };
        let mut out = Vec::with_capacity(ms.m_upper() + ms.n_lower());
        for (&s, &start) in ms.pair_couplings.iter().zip(&self.split_start) {
            let split = (self.splitting_integral(s, t) - start) * T::lit(0.5);
            out.push(unit(diabatic * T::lit(0.25) + split));
            out.push(unit(diabatic * T::lit(0.25) - split));
        }
        let pairs = ms.pair_couplings.len();
        let upper = unit(diabatic * T::lit(0.5));
        out.extend((pairs..ms.m_upper()).map(|_| upper));
        out.extend((pairs..ms.n_lower()).map(|_| Cplx::new(T::one(), T::zero())));
        out
    }

    /// `r_ab e^{i(phi_a - phi_b)}`, or the inverse rotation.
    fn rephase(r: &CMatrix<T>, f: &[Cplx<T>], inverse: bool) -> CMatrix<T> {
        CMatrix::from_fn(r.nrows(), r.ncols(), |a, b| {
            let z = f[a] * f[b].conj();
            r[(a, b)] * if inverse { z.conj() } else { z }
        })
    }

    /// Frame state at `t` from a laboratory-frame matrix.
    pub fn enter(&self, t: T, rho: &CMatrix<T>) -> CMatrix<T> {
        let v = self.basis(t).vectors;
        Self::rephase(&(v.adjoint() * rho * &v), &self.phase_factors(t), false)
    }

    /// Laboratory-frame matrix at `t` from a frame state.
    pub fn leave(&self, t: T, r: &CMatrix<T>) -> CMatrix<T> {
        let v = self.basis(t).vectors;
        &v * Self::rephase(r, &self.phase_factors(t), true) * v.adjoint()
    }

    /// `d r / dt` at time `t`.
    pub fn rhs(&self, t: T, r: &CMatrix<T>) -> CMatrix<T> {
        let ms = &self.ms.ms;
        let model = &self.generator.model;
        let k = model.chirp_rate();
        let a = model.detuning(t);
        let n = r.nrows();
        let f = self.phase_factors(t);
        let minus_i = Cplx::new(T::zero(), -T::one());

        // Coherent part: K(+,-) = i theta' e^{i(phi+ - phi-)}, theta' = -s k / (a^2 + 4 s^2).
        let mut out = CMatrix::zeros(n, n);
        for (p, &s) in ms.pair_couplings.iter().enumerate() {
            if s == T::zero() {
                continue;
            }
            let (hi, lo) = (2 * p, 2 * p + 1);
            let theta_dot = -s * k / (a * a + T::lit(4.0) * s * s);
            let kpm = f[hi] * f[lo].conj() * Cplx::new(T::zero(), theta_dot);
            let kmp = kpm.conj();
            for col in 0..n {
                // (K r)
                out[(hi, col)] += kpm * r[(lo, col)] * minus_i;
                out[(lo, col)] += kmp * r[(hi, col)] * minus_i;
                // -(r K)
                out[(col, lo)] -= r[(col, hi)] * kpm * minus_i;
                out[(col, hi)] -= r[(col, lo)] * kmp * minus_i;
            }
        }
        if self.generator.silent {
            return out;
        }
        let eb = self.basis(t);
        let r_ad = Self::rephase(r, &f, true);
        let d = self.generator.dissipate_in_eigenbasis(&eb, &r_ad);
        out + Self::rephase(&d, &f, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DensityMatrix, NoiseSpec};
    use crate::scalar::{hermiticity_defect, max_abs_diff, RMatrix};
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(rng: &mut impl Rng, n: usize) -> CMatrix<f64> {
        let a = CMatrix::from_fn(n, n, |_, _| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        (&a + a.adjoint()) * c(0.5)
    }

    fn random_state(rng: &mut impl Rng, n: usize) -> CMatrix<f64> {
        let a = CMatrix::from_fn(n, n, |_, _| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let p = &a * a.adjoint();
        let tr = p.trace();
        p / tr
    }

    #[test]
    fn diagonal_hamiltonian_two_clusters() {
        let h = complexify(&RMatrix::from_diagonal(&nalgebra::dvector![
            1.0, 1.0, 0.0, 0.0
        ]));
        let sd = spectral_decompose(&h, Some(0.5));
        assert_eq!(sd.clusters.len(), 2);
        assert_eq!(sd.clusters[0].multiplicity, 2);
        assert_eq!(sd.clusters[0].energy, 0.0);
        let p_low = complexify(&RMatrix::from_diagonal(&nalgebra::dvector![
            0.0, 0.0, 1.0, 1.0
        ]));
        assert!(max_abs_diff(&sd.clusters[0].projector, &p_low) < 1e-15);
    }

    #[test]
    fn single_dfs_coupling_at_crossing_has_three_clusters() {
        // rotated frame, g~13 = g, eps = 0: eigenvalues +g, 0, 0, -g
        let g = 0.7;
        let model = ModelSpec::from_real_sweep(&dmatrix![g, 0.0; 0.0, 0.0], 0.1, 50.0).unwrap();
        let sd = spectral_decompose(&model.hamiltonian(0.0), None);
        let e: Vec<f64> = sd.clusters.iter().map(|c| c.energy).collect();
        let m: Vec<usize> = sd.clusters.iter().map(|c| c.multiplicity).collect();
        assert_eq!(m, vec![1, 2, 1]);
        assert!((e[0] + g).abs() < 1e-14 && e[1].abs() < 1e-14 && (e[2] - g).abs() < 1e-14);
    }

    #[test]
    fn two_state_channels_and_rates() {
        let eps: f64 = 1.3;
        let h = complexify(&dmatrix![eps, 0.0; 0.0, 0.0]);
        let x = complexify(&dmatrix![0.0, 1.0; 1.0, 0.0]);
        let sd = spectral_decompose(&h, None);
        let temp: f64 = 0.8;
        let ch = jump_channels(&sd, &x, 0.5, temp).unwrap();
        assert_eq!(ch.len(), 2);
        let down = ch.iter().find(|c| c.omega > 0.0).unwrap();
        let up = ch.iter().find(|c| c.omega < 0.0).unwrap();
        assert!((down.rate - 0.5 * thermal_factor(eps, temp).unwrap()).abs() < 1e-15);
        assert!((up.rate - 0.5 * thermal_factor(-eps, temp).unwrap()).abs() < 1e-15);
        let cold = jump_channels(&sd, &x, 0.5, 0.0).unwrap();
        let up0 = cold.iter().find(|c| c.omega < 0.0).unwrap();
        assert_eq!(up0.rate, 0.0);
        let none = jump_channels(&sd, &x, 0.0, temp).unwrap();
        assert!(none.iter().all(|c| c.rate == 0.0));
    }

    #[test]
    fn rhs_without_channels_annihilates_eigenprojectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_hermitian(&mut rng, 4);
        let sd = spectral_decompose(&h, None);
        let rho = sd.clusters[0].projector.clone();
        assert!(lindblad_rhs(&rho, &h, &[]).norm() < 1e-13);
    }

    #[test]
    fn rhs_on_maximally_mixed_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hermitian(&mut rng, 3);
        let l = CMatrix::from_fn(3, 3, |_, _| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let r = 0.37;
        let rho = DensityMatrix::<f64>::maximally_mixed(3).into_inner();
        let ch = vec![JumpChannel {
            omega: 1.0,
            operator: l.clone(),
            rate: r,
            to: 0,
            from: 1,
        }];
        let got = lindblad_rhs(&rho, &h, &ch);
        let third = c(1.0 / 3.0);
        let ldl = l.adjoint() * &l;
        let expected = (&l * l.adjoint() * third - &ldl * third) * c(r);
        assert!(max_abs_diff(&got, &expected) < 1e-14);
    }

    #[test]
    fn uniform_noise_channels_miss_dfs_states() {
        // In the frame rotated by -pi/4, the DFS states are |1~> and |3~>.
        let model = ModelSpec::from_real_sweep(&dmatrix![0.5, -0.5; -0.5, 0.5], 0.1, 50.0).unwrap();
        let noise = NoiseSpec::new(dmatrix![0.5, 0.5; 0.5, 0.5], 2.0, 10.0).unwrap();
        let gen = DaviesGenerator::new(&model, &noise, SpectrumMethod::Eigensolver).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v1 = crate::scalar::CVector::from_vec(vec![c(s), c(-s), c(0.0), c(0.0)]);
        let v3 = crate::scalar::CVector::from_vec(vec![c(0.0), c(0.0), c(s), c(-s)]);
        for t in [-400.0, -3.0, 0.3, 120.0] {
            let ch = gen.channels(t).unwrap();
            assert!(!ch.is_empty());
            for c in &ch {
                assert!((&c.operator * &v1).norm() < 1e-10);
                assert!((&c.operator * &v3).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn morris_shore_spectrum_matches_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, l) in [(2, 2), (1, 3), (3, 2), (1, 1)] {
            let g = CMatrix::from_fn(m, l, |_, _| {
                Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let model: ModelSpec<f64> = ModelSpec::from_sweep(g, 0.1, 50.0).unwrap();
            let ms = MorrisShoreSpectrum::new(&model);
            for t in [-500.0, -17.0, 0.0, 2.5, 499.0] {
                let h = model.hamiltonian(t);
                let a = ms.spectral_decompose(&model, t, None);
                let b = spectral_decompose(&h, None);
                assert_eq!(a.clusters.len(), b.clusters.len());
                for (x, y) in a.clusters.iter().zip(&b.clusters) {
                    assert!((x.energy - y.energy).abs() < 1e-9 * (1.0 + x.energy.abs()));
                    assert!(max_abs_diff(&x.projector, &y.projector) < 1e-9);
                }
                assert!(max_abs_diff(&a.reconstruct(), &h) < 1e-9 * h.norm());
            }
        }
    }

    #[test]
    fn fast_generator_matches_reference_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for temp in [0.0, 0.001, 10.0] {
            let g = RMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let w = RMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let model = ModelSpec::from_real_sweep(&g, 0.1, 50.0).unwrap();
            let noise = NoiseSpec::new(w, 0.7, temp).unwrap();
            let x = complexify(&build_noise_operator(&noise, 4, 2).unwrap());
            for method in [SpectrumMethod::MorrisShore, SpectrumMethod::Eigensolver] {
                let gen = DaviesGenerator::new(&model, &noise, method).unwrap();
                for t in [-300.0, -1.0, 0.4, 42.0] {
                    let rho = random_state(&mut rng, 4);
                    let h = model.hamiltonian(t);
                    let sd = spectral_decompose(&h, None);
                    let ch = jump_channels(&sd, &x, 0.7, temp).unwrap();
                    let reference = lindblad_rhs(&rho, &h, &ch);
                    let fast = gen.rhs(t, &rho);
                    assert!(max_abs_diff(&reference, &fast) < 1e-10, "{method:?} t={t}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn projectors_are_complete_and_orthogonal(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..6);
            let h = random_hermitian(&mut rng, n);
            let sd = spectral_decompose(&h, None);
            let sum = sd.clusters.iter().fold(CMatrix::zeros(n, n), |a, c| a + &c.projector);
            prop_assert!(max_abs_diff(&sum, &CMatrix::identity(n, n)) < 1e-10);
            for (i, a) in sd.clusters.iter().enumerate() {
                for (j, b) in sd.clusters.iter().enumerate() {
                    let prod = &a.projector * &b.projector;
                    let want = if i == j { a.projector.clone() } else { CMatrix::zeros(n, n) };
                    prop_assert!(max_abs_diff(&prod, &want) < 1e-10);
                }
            }
            prop_assert!(max_abs_diff(&sd.reconstruct(), &h) < 1e-9 * h.norm().max(1.0));
        }

        #[test]
        fn rhs_is_traceless_and_hermitian(seed in 0u64..u64::MAX, temp in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hermitian(&mut rng, 4);
            let x = random_hermitian(&mut rng, 4);
            let rho = random_state(&mut rng, 4);
            let ch = jump_channels(&spectral_decompose(&h, None), &x, 1.5, temp).unwrap();
            let d = lindblad_rhs(&rho, &h, &ch);
            prop_assert!(d.trace().norm() < 1e-12);
            prop_assert!(hermiticity_defect(&d) < 1e-12);
            if temp == 0.0 {
                prop_assert!(ch.iter().filter(|c| c.omega < 0.0).all(|c| c.rate == 0.0));
            }
        }

        #[test]
        fn rhs_is_gauge_invariant(seed in 0u64..u64::MAX, t in -50.0f64..50.0) {
            // Two eigen-decompositions of the same H: the dense eigensolver and
            // the Morris-Shore route (different phases and orderings).
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = CMatrix::from_fn(2, 2, |_, _| Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let model = ModelSpec::from_sweep(g, 0.1, 50.0).unwrap();
            let noise = NoiseSpec::new(RMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)), 1.0, 0.5).unwrap();
            let a = DaviesGenerator::new(&model, &noise, SpectrumMethod::MorrisShore).unwrap();
            let b = DaviesGenerator::new(&model, &noise, SpectrumMethod::Eigensolver).unwrap();
            let rho = random_state(&mut rng, 4);
            prop_assert!(max_abs_diff(&a.rhs(t, &rho), &b.rhs(t, &rho)) < 1e-10);
        }
    }
}
