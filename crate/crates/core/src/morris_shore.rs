// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Morris-Shore reduction of block couplings and decoherence-free subspaces.
//!
//! A block-off-diagonal operator `[[0, B], [B†, 0]]` between an M-fold and an
//! (N-M)-fold manifold decomposes, after independent unitary rotations of the
//! two manifolds, into `min(M, N-M)` independent two-state pairs plus
//! uncoupled spectator states. Applied to the noise block `W`, the spectators
//! (zero singular value) span the decoherence-free subspace; applied to the
//! coherent block `G`, the pairs are the independent Landau-Zener crossings.
//!
//! For the real 2:2 case there is a closed form in terms of two rotation
//! angles, implemented by [`rotation_angles_2x2`] with its singular fallback
//! [`degenerate_branch_2x2`]. [`morris_shore_general`] handles any shape
//! through a singular-value decomposition.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::NoiseSpec;
use crate::scalar::{c, complexify, CMatrix, CVector, Cplx, RMatrix, Real};

/// Relative cutoff on `|D|`, `|E|` (in units of `||W||_F^2`) below which the
/// closed form is abandoned for the degenerate branch.
pub const BRANCH_TOL: f64 = 1e-9;

/// Relative cutoff (in units of the largest singular value) for a coupling to count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Rotation angles of `R(xi, chi)`: `xi` acts on the upper pair `{|1>, |2>}`,
/// `chi` on the lower pair `{|3>, |4>}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationAngles<T: Real> {
    pub xi: T,
    pub chi: T,
}

impl<T: Real> RotationAngles<T> {
    pub fn new(xi: T, chi: T) -> Self {
        Self {
            xi: wrap_half_turn(xi),
            chi: wrap_half_turn(chi),
        }
    }

    /// `[[cos a, sin a], [-sin a, cos a]]`
    pub fn block(angle: T) -> RMatrix<T> {
        let (s, co) = angle.sin_cos();
        RMatrix::from_row_slice(2, 2, &[co, s, -s, co])
    }

    /// The full 4x4 `R(xi, chi)`.
    pub fn matrix(&self) -> RMatrix<T> {
        let mut r = RMatrix::zeros(4, 4);
        r.view_mut((0, 0), (2, 2)).copy_from(&Self::block(self.xi));
        r.view_mut((2, 2), (2, 2)).copy_from(&Self::block(self.chi));
        r
    }

    /// Rotated upper basis state `|k~>` for k in {1, 2} (as a 2-vector on `{|1>, |2>}`).
    pub fn upper_state(&self, k: usize) -> [T; 2] {
        rotated_state(self.xi, k)
    }

    /// Rotated lower basis state `|k~>` for k in {3, 4} (as a 2-vector on `{|3>, |4>}`).
    pub fn lower_state(&self, k: usize) -> [T; 2] {
        rotated_state(self.chi, k - 2)
    }
}

fn rotated_state<T: Real>(angle: T, k: usize) -> [T; 2] {
    let (s, co) = angle.sin_cos();
    match k {
        1 => [co, s],
        2 => [-s, co],
        _ => panic!("rotated basis index must be 1 or 2 within a manifold"),
    }
}

/// Map into (-pi/2, pi/2]; a half-turn only flips the sign of both rotated basis vectors.
fn wrap_half_turn<T: Real>(mut a: T) -> T {
    let pi = T::pi();
    let half = T::frac_pi_2();
    while a > half {
        a -= pi;
    }
    while a <= -half {
        a += pi;
    }
    a
}

/// The intermediate quantities A..E of the closed-form 2:2 solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormCoefficients<T: Real> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
}

/// Entries of a 2x2 coupling block, named by the bare-state indices they connect.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block2<T: Real> {
    pub x13: T,
    pub x14: T,
    pub x23: T,
    pub x24: T,
}

impl<T: Real> Block2<T> {
    pub fn from_matrix(w: &RMatrix<T>) -> Result<Self> {
        if w.shape() != (2, 2) {
            return Err(Error::shape(
                "2:2 coupling block",
                "2x2",
                format!("{}x{}", w.nrows(), w.ncols()),
            ));
        }
        Ok(Self {
            x13: w[(0, 0)],
            x14: w[(0, 1)],
            x23: w[(1, 0)],
            x24: w[(1, 1)],
        })
    }

    pub fn to_matrix(self) -> RMatrix<T> {
        RMatrix::from_row_slice(2, 2, &[self.x13, self.x14, self.x23, self.x24])
    }

    pub fn norm_squared(&self) -> T {
        self.x13 * self.x13 + self.x14 * self.x14 + self.x23 * self.x23 + self.x24 * self.x24
    }

    pub fn coefficients(&self) -> ClosedFormCoefficients<T> {
        let Self { x13, x14, x23, x24 } = *self;
        let sq = |v: T| v * v;
        ClosedFormCoefficients {
            a: sq(x24) - sq(x13),
            b: sq(x23) - sq(x14),
            c: (sq(x14 + x23) + sq(x13 - x24)) * (sq(x14 - x23) + sq(x13 + x24)),
            d: x13 * x23 + x14 * x24,
            e: x13 * x14 + x23 * x24,
        }
    }

    /// Transformed entries `x~_ij` of `R X R^{-1}` written out component-wise.
    pub fn rotated(&self, angles: &RotationAngles<T>) -> Self {
        let Self { x13, x14, x23, x24 } = *self;
        let (sx, cx) = angles.xi.sin_cos();
        let (sc, cc) = angles.chi.sin_cos();
        Self {
            x13: cc * (x13 * cx + x23 * sx) + sc * (x14 * cx + x24 * sx),
            x14: cc * (x14 * cx + x24 * sx) - sc * (x13 * cx + x23 * sx),
            x23: cc * (x23 * cx - x13 * sx) + sc * (x24 * cx - x14 * sx),
            x24: cc * (x24 * cx - x14 * sx) - sc * (x23 * cx - x13 * sx),
        }
    }

    fn off_diagonal_residual(&self, angles: &RotationAngles<T>) -> T {
        let r = self.rotated(angles);
        r.x14.abs().max(r.x23.abs())
    }
}

/// Closed-form angles that annihilate `x~14` and `x~23`.
///
/// Uses the `-sqrt(C)` root for both angles and confirms it by conjugation;
/// the other root combinations are tried if that check fails. Returns
/// [`Error::DegenerateBranch`] when `D` or `E` vanishes relative to `||W||^2`.
pub fn rotation_angles_2x2<T: Real>(w: &RMatrix<T>) -> Result<RotationAngles<T>> {
    let blk = Block2::from_matrix(w)?;
    let norm2 = blk.norm_squared();
    let cf = blk.coefficients();
    let cut = T::lit(BRANCH_TOL) * norm2;
    if norm2 == T::zero() || cf.d.abs() <= cut || cf.e.abs() <= cut {
        return Err(Error::DegenerateBranch);
    }
    let root = cf.c.max(T::zero()).sqrt();
    let two = T::lit(2.0);
    let accept = T::lit(1e-11) * norm2.sqrt().max(T::one());

    let mut best: Option<(T, RotationAngles<T>)> = None;
    for (s_xi, s_chi) in [(-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (1.0, -1.0)] {
        let xi = ((cf.a + cf.b + T::lit(s_xi) * root) / (two * cf.d)).atan();
        let chi = ((cf.a - cf.b + T::lit(s_chi) * root) / (two * cf.e)).atan();
        let angles = RotationAngles::new(xi, chi);
        let res = blk.off_diagonal_residual(&angles);
        if res <= accept {
            return Ok(angles);
        }
        if best.as_ref().map_or(true, |(r, _)| res < *r) {
            best = Some((res, angles));
        }
    }
    Ok(best.expect("four candidates evaluated").1)
}

/// Same closed form applied to the coherent couplings `g_ij`.
pub fn angles_from_couplings<T: Real>(g: &RMatrix<T>) -> Result<RotationAngles<T>> {
    rotation_angles_2x2(g)
}

/// Angles for the singular cases: when `D = 0` the rows of W are orthogonal
/// (xi = 0, chi aligns `|3~>` with row 1); when `E = 0` the columns are
/// orthogonal (chi = 0, xi aligns `|1~>` with column 1).
pub fn degenerate_angles_2x2<T: Real>(w: &RMatrix<T>) -> Result<RotationAngles<T>> {
    let blk = Block2::from_matrix(w)?;
    let norm2 = blk.norm_squared();
    let cf = blk.coefficients();
    if norm2 == T::zero() {
        return Ok(RotationAngles::new(T::zero(), T::zero()));
    }
    let cut = T::lit(BRANCH_TOL) * norm2;
    let tiny = norm2 * T::lit(1e-24);
    if cf.d.abs() <= cut {
        let row1 = blk.x13 * blk.x13 + blk.x14 * blk.x14;
        let chi = if row1 > tiny {
            blk.x14.atan2(blk.x13)
        } else {
            (-blk.x23).atan2(blk.x24)
        };
        Ok(RotationAngles::new(T::zero(), chi))
    } else if cf.e.abs() <= cut {
        let col1 = blk.x13 * blk.x13 + blk.x23 * blk.x23;
        let xi = if col1 > tiny {
            blk.x23.atan2(blk.x13)
        } else {
            (-blk.x14).atan2(blk.x24)
        };
        Ok(RotationAngles::new(xi, T::zero()))
    } else {
        Err(Error::Domain(
            "degenerate branch requested but D and E are both non-zero".into(),
        ))
    }
}

/// Rotation angles from whichever branch applies.
pub fn angles_2x2<T: Real>(w: &RMatrix<T>) -> Result<RotationAngles<T>> {
    match rotation_angles_2x2(w) {
        Err(Error::DegenerateBranch) => degenerate_angles_2x2(w),
        other => other,
    }
}

/// Morris-Shore decomposition of a block `B`: `U† B V` is rectangular-diagonal
/// with `pair_couplings` on the diagonal. Columns of `upper_basis` and
/// `lower_basis` with equal index form a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MsDecomposition<T: Real> {
    pub upper_basis: CMatrix<T>,
    pub lower_basis: CMatrix<T>,
    pub pair_couplings: Vec<T>,
    pub dfs_upper: Vec<usize>,
    pub dfs_lower: Vec<usize>,
}

impl<T: Real> MsDecomposition<T> {
    pub fn m_upper(&self) -> usize {
        self.upper_basis.nrows()
    }

    pub fn n_lower(&self) -> usize {
        self.lower_basis.nrows()
    }

    /// `U† B V`.
    pub fn transformed(&self, block: &CMatrix<T>) -> CMatrix<T> {
        self.upper_basis.adjoint() * block * &self.lower_basis
    }

    /// Frobenius norm of `U† B V` minus its ideal rectangular-diagonal form.
    pub fn residual(&self, block: &CMatrix<T>) -> T {
        let t = self.transformed(block);
        let mut acc = T::zero();
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                let ideal = if i == j && i < self.pair_couplings.len() {
                    c(self.pair_couplings[i])
                } else {
                    Cplx::new(T::zero(), T::zero())
                };
                acc += (t[(i, j)] - ideal).norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// Upper basis vector `k` embedded in the full N-dimensional space.
    pub fn embed_upper(&self, k: usize) -> CVector<T> {
        let m = self.m_upper();
        let mut v = CVector::zeros(m + self.n_lower());
        v.rows_mut(0, m).copy_from(&self.upper_basis.column(k));
        v
    }

    /// Lower basis vector `k` embedded in the full N-dimensional space.
    pub fn embed_lower(&self, k: usize) -> CVector<T> {
        let m = self.m_upper();
        let l = self.n_lower();
        let mut v = CVector::zeros(m + l);
        v.rows_mut(m, l).copy_from(&self.lower_basis.column(k));
        v
    }

    /// `blockdiag(U, V)`, mapping Morris-Shore coordinates to bare coordinates.
    pub fn basis_change(&self) -> CMatrix<T> {
        let m = self.m_upper();
        let l = self.n_lower();
        let mut b = CMatrix::zeros(m + l, m + l);
        b.view_mut((0, 0), (m, m)).copy_from(&self.upper_basis);
        b.view_mut((m, m), (l, l)).copy_from(&self.lower_basis);
        b
    }

    fn mark_dfs(&mut self) {
        let smax = self.pair_couplings.iter().fold(T::zero(), |a, &b| a.max(b));
        let zero = |s: T| smax == T::zero() || s <= T::lit(RANK_TOL) * smax;
        let k = self.pair_couplings.len();
        let dark = |dim: usize| -> Vec<usize> {
            (0..dim)
                .filter(|&i| i >= k || zero(self.pair_couplings[i]))
                .collect()
        };
        self.dfs_upper = dark(self.m_upper());
        self.dfs_lower = dark(self.n_lower());
    }
}

/// Closed-form decomposition for the singular 2:2 cases (`D = 0` or `E = 0`).
pub fn degenerate_branch_2x2<T: Real>(w: &RMatrix<T>) -> Result<MsDecomposition<T>> {
    let angles = degenerate_angles_2x2(w)?;
    Ok(decomposition_from_angles(w, &angles))
}

/// Build the decomposition implied by a 2:2 rotation that diagonalises `w`.
pub fn decomposition_from_angles<T: Real>(
    w: &RMatrix<T>,
    angles: &RotationAngles<T>,
) -> MsDecomposition<T> {
    let blk = Block2::from_matrix(w).expect("2x2 block");
    let rot = blk.rotated(angles);
    let up = [angles.upper_state(1), angles.upper_state(2)];
    let mut lo = [angles.lower_state(3), angles.lower_state(4)];
    let mut s = [rot.x13, rot.x24];
    for k in 0..2 {
        if s[k] < T::zero() {
            s[k] = -s[k];
            lo[k] = [-lo[k][0], -lo[k][1]];
        }
    }
    let mut order = [0usize, 1];
    if s[1] > s[0] {
        order = [1, 0];
    }
    let mut u = CMatrix::zeros(2, 2);
    let mut v = CMatrix::zeros(2, 2);
    let mut couplings = Vec::with_capacity(2);
    for (col, &k) in order.iter().enumerate() {
        let (mut uk, mut vk) = (up[k], lo[k]);
        if first_nonzero_sign(&uk) < T::zero() {
            uk = [-uk[0], -uk[1]];
            vk = [-vk[0], -vk[1]];
        }
        for r in 0..2 {
            u[(r, col)] = c(uk[r]);
            v[(r, col)] = c(vk[r]);
        }
        couplings.push(s[k]);
    }
    let mut dec = MsDecomposition {
        upper_basis: u,
        lower_basis: v,
        pair_couplings: couplings,
        dfs_upper: vec![],
        dfs_lower: vec![],
    };
    dec.mark_dfs();
    dec
}

fn first_nonzero_sign<T: Real>(v: &[T; 2]) -> T {
    let tol = T::lit(1e-12);
    if v[0].abs() > tol {
        v[0].signum()
    } else {
        v[1].signum()
    }
}

/// General Morris-Shore decomposition through the singular-value decomposition
/// of the coupling block.
///
/// Conventions: couplings sorted descending; every upper vector's first
/// non-negligible component is real and positive; lower vectors of coupled
/// pairs carry the same phase as their partner, uncoupled ones get the same
/// phase convention independently.
pub fn morris_shore_general<T: Real>(block: &CMatrix<T>) -> MsDecomposition<T> {
    let (m, l) = block.shape();
    let k = m.min(l);
    if k == 0 {
        let mut dec = MsDecomposition {
            upper_basis: CMatrix::identity(m, m),
            lower_basis: CMatrix::identity(l, l),
            pair_couplings: vec![],
            dfs_upper: vec![],
            dfs_lower: vec![],
        };
        dec.mark_dfs();
        return dec;
    }
    let svd = block.clone().svd(true, true);
    let u_thin = svd.u.expect("left singular vectors requested");
    let v_thin = svd.v_t.expect("right singular vectors requested").adjoint();
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        sv[b]
            .partial_cmp(&sv[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let smax = sv[order[0]];
    let is_zero = |s: T| smax == T::zero() || s <= T::lit(RANK_TOL) * smax;

    let mut ups: Vec<CVector<T>> = Vec::with_capacity(m);
    let mut los: Vec<CVector<T>> = Vec::with_capacity(l);
    let mut couplings = Vec::with_capacity(k);
    for &i in &order {
        let mut u = u_thin.column(i).into_owned();
        let mut v = v_thin.column(i).into_owned();
        let s = sv[i];
        let ph = leading_phase(&u);
        u *= ph.conj();
        if is_zero(s) {
            let pv = leading_phase(&v);
            v *= pv.conj();
        } else {
            v *= ph.conj();
        }
        ups.push(u);
        los.push(v);
        couplings.push(s);
    }
    let upper_basis = complete_basis(ups, m);
    let lower_basis = complete_basis(los, l);
    let mut dec = MsDecomposition {
        upper_basis,
        lower_basis,
        pair_couplings: couplings,
        dfs_upper: vec![],
        dfs_lower: vec![],
    };
    dec.mark_dfs();
    dec
}

/// Unit phase of the first component whose modulus is not negligible.
fn leading_phase<T: Real>(v: &CVector<T>) -> Cplx<T> {
    let scale = v.iter().fold(T::zero(), |a, z| a.max(z.modulus()));
    let tol = scale * T::lit(1e-8);
    for z in v.iter() {
        let r = z.modulus();
        if r > tol {
            return *z / c(r);
        }
    }
    c(T::one())
}

/// Extend orthonormal columns to a full orthonormal basis of dimension `dim`,
/// greedily picking the coordinate vector with the largest residual.
fn complete_basis<T: Real>(mut cols: Vec<CVector<T>>, dim: usize) -> CMatrix<T> {
    while cols.len() < dim {
        let mut best: Option<(T, CVector<T>)> = None;
        for e in 0..dim {
            let mut v = CVector::<T>::zeros(dim);
            v[e] = c(T::one());
            for _ in 0..2 {
                for q in &cols {
                    let proj = q.dotc(&v);
                    v -= q * proj;
                }
            }
            let n = v.norm();
            if best.as_ref().map_or(true, |(bn, _)| n > *bn) {
                best = Some((n, v));
            }
        }
        let (n, mut v) = best.expect("dimension > 0");
        v /= c(n);
        let ph = leading_phase(&v);
        v *= ph.conj();
        cols.push(v);
    }
    if dim == 0 {
        return CMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Split of the system Hilbert space into noise-immune and noise-coupled states.
#[derive(Clone, Debug)]
pub struct DfsSplit<T: Real> {
    /// Upper-manifold DFS vectors, embedded in the N-dimensional space.
    pub dfs_upper: Vec<CVector<T>>,
    /// Lower-manifold DFS vectors, embedded in the N-dimensional space.
    pub dfs_lower: Vec<CVector<T>>,
    /// Noise-coupled Morris-Shore vectors (both manifolds).
    pub noisy: Vec<CVector<T>>,
    pub decomposition: MsDecomposition<T>,
}

impl<T: Real> DfsSplit<T> {
    pub fn dimension(&self) -> usize {
        self.dfs_upper.len() + self.dfs_lower.len()
    }

    pub fn dfs(&self) -> impl Iterator<Item = &CVector<T>> {
        self.dfs_upper.iter().chain(self.dfs_lower.iter())
    }
}

/// Decoherence-free subspace of the noise operator built from `noise`.
pub fn find_dfs<T: Real>(
    noise: &NoiseSpec<T>,
    m_upper: usize,
    n_total: usize,
) -> Result<DfsSplit<T>> {
    let w = noise.noise_couplings();
    if m_upper == 0 || m_upper >= n_total || w.shape() != (m_upper, n_total - m_upper) {
        return Err(Error::shape(
            "noise matrix W",
            format!("{}x{}", m_upper, n_total.saturating_sub(m_upper)),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    let dec = morris_shore_general(&complexify(w));
    let dfs_upper: Vec<_> = dec.dfs_upper.iter().map(|&k| dec.embed_upper(k)).collect();
    let dfs_lower: Vec<_> = dec.dfs_lower.iter().map(|&k| dec.embed_lower(k)).collect();
    let mut noisy = Vec::new();
    for k in (0..m_upper).filter(|k| !dec.dfs_upper.contains(k)) {
        noisy.push(dec.embed_upper(k));
    }
    for k in (0..n_total - m_upper).filter(|k| !dec.dfs_lower.contains(k)) {
        noisy.push(dec.embed_lower(k));
    }
    Ok(DfsSplit {
        dfs_upper,
        dfs_lower,
        noisy,
        decomposition: dec,
    })
}

/// Coherent coupling `G = g a b†` that links the first upper DFS vector `a` to
/// the first lower DFS vector `b` and nothing else.
pub fn synthesize_dfs_coupling<T: Real>(
    noise: &NoiseSpec<T>,
    m_upper: usize,
    n_total: usize,
    g_magnitude: T,
) -> Result<CMatrix<T>> {
    let split = find_dfs(noise, m_upper, n_total)?;
    let dec = &split.decomposition;
    let (Some(&a), Some(&b)) = (dec.dfs_upper.first(), dec.dfs_lower.first()) else {
        return Err(Error::NoNoiseFreeTransfer(format!(
            "decoherence-free subspace has {} upper and {} lower states",
            dec.dfs_upper.len(),
            dec.dfs_lower.len()
        )));
    };
    let ua = dec.upper_basis.column(a);
    let vb = dec.lower_basis.column(b);
    Ok(ua * vb.adjoint() * c(g_magnitude))
}

/// Real part of a coupling matrix, for the real 2:2 closed-form path.
pub fn real_part<T: Real>(m: &CMatrix<T>) -> RMatrix<T> {
    m.map(|z| z.re)
}

/// Two-component real vector lifted into the N-dimensional space at `offset`.
pub fn embed_pair<T: Real>(v: [T; 2], offset: usize, n_total: usize) -> CVector<T> {
    let mut out = DVector::zeros(n_total);
    out[offset] = c(v[0]);
    out[offset + 1] = c(v[1]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_noise_operator;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};

    fn half_w() -> RMatrix<f64> {
        dmatrix![0.5, 0.5; 0.5, 0.5]
    }

    /// Conjugation by the explicit 4x4 rotation, independent of the component formulas.
    fn conjugate_4x4(w: &RMatrix<f64>, angles: &RotationAngles<f64>) -> RMatrix<f64> {
        let mut x = RMatrix::zeros(4, 4);
        x.view_mut((0, 2), (2, 2)).copy_from(w);
        x.view_mut((2, 0), (2, 2)).copy_from(&w.transpose());
        let r = angles.matrix();
        &r * x * r.transpose()
    }

    #[test]
    fn uniform_half_noise_gives_minus_quarter_turns() {
        let a = rotation_angles_2x2(&half_w()).unwrap();
        assert!((a.xi + FRAC_PI_4).abs() < 1e-12);
        assert!((a.chi + FRAC_PI_4).abs() < 1e-12);
        let r = Block2::from_matrix(&half_w()).unwrap().rotated(&a);
        assert!(r.x13.abs() < 1e-15 && r.x14.abs() < 1e-15 && r.x23.abs() < 1e-15);
        assert!((r.x24 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn text_coupling_set_angles() {
        // g13 = g24 = 1/2, g14 = g23 = -1/2: the closed form lands on +pi/4.
        let g = dmatrix![0.5, -0.5; -0.5, 0.5];
        let a = angles_from_couplings(&g).unwrap();
        assert!((a.xi - FRAC_PI_4).abs() < 1e-12);
        assert!((a.chi - FRAC_PI_4).abs() < 1e-12);
        let r = Block2::from_matrix(&g).unwrap().rotated(&a);
        assert!(r.x13.abs() < 1e-15);
        assert!((r.x24 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_block_signals_degenerate_branch() {
        let w = dmatrix![0.7, 0.0; 0.0, 0.3];
        assert_eq!(rotation_angles_2x2(&w), Err(Error::DegenerateBranch));
        let a = angles_2x2(&w).unwrap();
        assert_eq!((a.xi, a.chi), (0.0, 0.0));
    }

    #[test]
    fn identity_block_pairs_bare_states() {
        let dec = degenerate_branch_2x2(&dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        assert_eq!(dec.pair_couplings, vec![1.0, 1.0]);
        assert!(dec.dfs_upper.is_empty() && dec.dfs_lower.is_empty());
        assert_eq!(dec.upper_basis, CMatrix::identity(2, 2));
        assert_eq!(dec.lower_basis, CMatrix::identity(2, 2));
    }

    #[test]
    fn orthogonal_rows_branch() {
        let w = dmatrix![1.0, 1.0; 1.0, -1.0];
        let dec = degenerate_branch_2x2(&w).unwrap();
        let s = std::f64::consts::SQRT_2;
        assert!((dec.pair_couplings[0] - s).abs() < 1e-14);
        assert!((dec.pair_couplings[1] - s).abs() < 1e-14);
        // |1> <-> (|3>+|4>)/sqrt2, |2> <-> (|3>-|4>)/sqrt2
        let expect_v =
            complexify(&dmatrix![FRAC_1_SQRT_2, FRAC_1_SQRT_2; FRAC_1_SQRT_2, -FRAC_1_SQRT_2]);
        assert!(crate::scalar::max_abs_diff(&dec.lower_basis, &expect_v) < 1e-15);
        assert_eq!(dec.upper_basis, CMatrix::identity(2, 2));
        assert!(dec.residual(&complexify(&w)) < 1e-14);
    }

    #[test]
    fn orthogonal_columns_branch() {
        let w = dmatrix![2.0, 1.0; 1.0, -2.0];
        // E = 2 - 2 = 0, D = 2 - 2 = 0 too; perturb to make only E vanish.
        let w2 = dmatrix![2.0, 3.0; 1.0, -6.0];
        let cf = Block2::from_matrix(&w2).unwrap().coefficients();
        assert_eq!(cf.e, 0.0);
        assert!(cf.d != 0.0);
        for w in [w, w2] {
            let dec = degenerate_branch_2x2(&w).unwrap();
            assert!(dec.residual(&complexify(&w)) < 1e-13);
        }
    }

    #[test]
    fn zero_block_is_all_spectators() {
        let w = RMatrix::<f64>::zeros(2, 2);
        let dec = degenerate_branch_2x2(&w).unwrap();
        assert_eq!(dec.pair_couplings, vec![0.0, 0.0]);
        assert_eq!(dec.dfs_upper, vec![0, 1]);
        assert_eq!(dec.dfs_lower, vec![0, 1]);
        let gen = morris_shore_general(&complexify(&w));
        assert_eq!(gen.dfs_upper.len(), 2);
    }

    #[test]
    fn general_route_on_uniform_half_noise() {
        let dec = morris_shore_general(&complexify(&half_w()));
        assert!((dec.pair_couplings[0] - 1.0).abs() < 1e-14);
        assert!(dec.pair_couplings[1].abs() < 1e-14);
        assert_eq!(dec.dfs_upper, vec![1]);
        assert_eq!(dec.dfs_lower, vec![1]);
        let dark_u = dec.upper_basis.column(1);
        let dark_l = dec.lower_basis.column(1);
        assert!(
            (dark_u[0].re - FRAC_1_SQRT_2).abs() < 1e-14
                && (dark_u[1].re + FRAC_1_SQRT_2).abs() < 1e-14
        );
        assert!(
            (dark_l[0].re - FRAC_1_SQRT_2).abs() < 1e-14
                && (dark_l[1].re + FRAC_1_SQRT_2).abs() < 1e-14
        );
    }

    #[test]
    fn general_route_on_rectangular_and_identity_blocks() {
        let b = CMatrix::from_row_slice(
            3,
            2,
            &[
                Cplx::new(0.3, -0.2),
                Cplx::new(1.1, 0.4),
                Cplx::new(-0.7, 0.0),
                Cplx::new(0.2, 0.9),
                Cplx::new(0.5, 0.5),
                Cplx::new(-1.3, 0.1),
            ],
        );
        let dec = morris_shore_general(&b);
        assert!(dec.residual(&b) < 1e-10);
        assert_eq!(dec.dfs_upper, vec![2]);
        assert!(dec.dfs_lower.is_empty());
        let unit = (dec.upper_basis.adjoint() * &dec.upper_basis) - CMatrix::identity(3, 3);
        assert!(unit.norm() < 1e-12);

        let id = CMatrix::<f64>::identity(2, 2);
        let dec = morris_shore_general(&id);
        assert!(dec.pair_couplings.iter().all(|s| (s - 1.0).abs() < 1e-14));
        assert!(dec.dfs_upper.is_empty() && dec.dfs_lower.is_empty());
    }

    #[test]
    fn dfs_of_uniform_noise() {
        let noise = NoiseSpec::new(half_w(), 1.0, 0.0).unwrap();
        let split = find_dfs(&noise, 2, 4).unwrap();
        assert_eq!(split.dimension(), 2);
        let s = FRAC_1_SQRT_2;
        let u = &split.dfs_upper[0];
        let l = &split.dfs_lower[0];
        assert!((u[0].re - s).abs() < 1e-14 && (u[1].re + s).abs() < 1e-14 && u[2].norm() == 0.0);
        assert!((l[2].re - s).abs() < 1e-14 && (l[3].re + s).abs() < 1e-14 && l[0].norm() == 0.0);
        assert_eq!(split.noisy.len(), 2);
    }

    #[test]
    fn dfs_empty_for_full_rank_noise() {
        let noise = NoiseSpec::new(dmatrix![1.0, 0.0; 0.0, 1.0], 1.0, 0.0).unwrap();
        assert_eq!(find_dfs(&noise, 2, 4).unwrap().dimension(), 0);
        assert!(matches!(
            synthesize_dfs_coupling(&noise, 2, 4, 1.0),
            Err(Error::NoNoiseFreeTransfer(_))
        ));
    }

    #[test]
    fn singlet_fully_coupled_has_no_upper_dfs() {
        let noise = NoiseSpec::new(dmatrix![0.6, 0.8], 1.0, 0.0).unwrap();
        let split = find_dfs(&noise, 1, 3).unwrap();
        assert!(split.dfs_upper.is_empty());
        assert_eq!(split.dfs_lower.len(), 1);
        assert!(synthesize_dfs_coupling(&noise, 1, 3, 1.0).is_err());
    }

    #[test]
    fn synthesized_coupling_for_uniform_noise() {
        let noise = NoiseSpec::new(half_w(), 1.0, 0.0).unwrap();
        let g = 0.8;
        let gm = synthesize_dfs_coupling(&noise, 2, 4, g).unwrap();
        let expected = complexify(&dmatrix![g / 2.0, -g / 2.0; -g / 2.0, g / 2.0]);
        assert!(crate::scalar::max_abs_diff(&gm, &expected) < 1e-14);
    }

    #[test]
    fn text_couplings_are_not_the_caption_couplings() {
        // Caption form at delta = 0 is g/sqrt2 times an orthogonal matrix: no dark pair.
        let cap = dmatrix![0.5, 0.5; -0.5, 0.5];
        let dec = morris_shore_general(&complexify(&cap));
        assert!((dec.pair_couplings[0] - FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((dec.pair_couplings[1] - FRAC_1_SQRT_2).abs() < 1e-14);
        assert!(dec.dfs_upper.is_empty());
    }

    fn arb_w() -> impl Strategy<Value = RMatrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, 4).prop_map(|v| RMatrix::from_row_slice(2, 2, &v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(400))]

        #[test]
        fn closed_form_annihilates_cross_couplings(w in arb_w()) {
            let blk = Block2::from_matrix(&w).unwrap();
            let cf = blk.coefficients();
            let n2 = blk.norm_squared();
            prop_assume!(cf.d.abs() > 1e-6 * n2 && cf.e.abs() > 1e-6 * n2);
            let a = rotation_angles_2x2(&w).unwrap();
            let x = conjugate_4x4(&w, &a);
            prop_assert!(x[(0, 3)].abs() <= 1e-10 && x[(1, 2)].abs() <= 1e-10);
            // component formulas agree with the matrix conjugation
            let r = blk.rotated(&a);
            prop_assert!((r.x13 - x[(0, 2)]).abs() < 1e-12 && (r.x24 - x[(1, 3)]).abs() < 1e-12);
            prop_assert!(a.xi > -std::f64::consts::FRAC_PI_2 && a.xi <= std::f64::consts::FRAC_PI_2);
        }

        #[test]
        fn c_is_a_perfect_discriminant(w in arb_w()) {
            let cf = Block2::from_matrix(&w).unwrap().coefficients();
            let alt = (cf.a + cf.b).powi(2) + 4.0 * cf.d * cf.d;
            let alt2 = (cf.a - cf.b).powi(2) + 4.0 * cf.e * cf.e;
            prop_assert!((cf.c - alt).abs() <= 1e-10 * (1.0 + cf.c));
            prop_assert!((cf.c - alt2).abs() <= 1e-10 * (1.0 + cf.c));
        }

        #[test]
        fn svd_route_matches_closed_form(w in arb_w()) {
            let a = angles_2x2(&w).unwrap();
            let r = Block2::from_matrix(&w).unwrap().rotated(&a);
            let mut closed = [r.x13.abs(), r.x24.abs()];
            closed.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let dec = morris_shore_general(&complexify(&w));
            prop_assert!((dec.pair_couplings[0] - closed[0]).abs() < 1e-10);
            prop_assert!((dec.pair_couplings[1] - closed[1]).abs() < 1e-10);
            let res = dec.residual(&complexify(&w));
            prop_assert!(res < 1e-10, "residual {} couplings {:?}", res, dec.pair_couplings);
        }

        #[test]
        fn singular_values_invariant_under_block_rotations(
            w in arb_w(), p in -3.0f64..3.0, q in -3.0f64..3.0
        ) {
            let rot = RotationAngles::<f64>::block(p) * &w * RotationAngles::<f64>::block(q).transpose();
            let d1 = morris_shore_general(&complexify(&w));
            let d2 = morris_shore_general(&complexify(&rot));
            for k in 0..2 {
                prop_assert!((d1.pair_couplings[k] - d2.pair_couplings[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn rank_one_noise_has_two_dimensional_dfs(
            a in proptest::collection::vec(-2.0f64..2.0, 2),
            b in proptest::collection::vec(-2.0f64..2.0, 2)
        ) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            prop_assume!(na > 0.1 && nb > 0.1);
            let w = RMatrix::from_row_slice(2, 2, &[a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]);
            let noise = NoiseSpec::new(w.clone(), 1.0, 0.0).unwrap();
            let split = find_dfs(&noise, 2, 4).unwrap();
            prop_assert_eq!(split.dimension(), 2);
            let x = complexify(&build_noise_operator(&noise, 4, 2).unwrap());
            for v in split.dfs() {
                prop_assert!((&x * v).norm() <= 1e-10);
            }
            let g = synthesize_dfs_coupling(&noise, 2, 4, 1.3).unwrap();
            let dec = &split.decomposition;
            let t = dec.transformed(&g);
            let (i, j) = (dec.dfs_upper[0], dec.dfs_lower[0]);
            for r in 0..2 {
                for s in 0..2 {
                    let want = if (r, s) == (i, j) { 1.3 } else { 0.0 };
                    prop_assert!((t[(r, s)] - c(want)).norm() <= 1e-12);
                }
            }
        }
    }
}
