// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Propagation across the sweep window `[-t0, t0]`.
//!
//! Both the Lindblad and the Schroedinger propagators share one adaptive
//! Dormand-Prince 5(4) driver with proportional-integral step control.
//! Output sample times are hit exactly by clipping the step.

use nalgebra::ComplexField;

use crate::dissipator::{AdiabaticFrame, DaviesGenerator, SpectrumMethod};
use crate::error::{Error, Result};
use crate::model::{symmetrize, DensityMatrix, ModelSpec, NoiseSpec};
use crate::scalar::{c, hermiticity_defect, CMatrix, CVector, Cplx, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeTolerances<T: Real> {
    pub rtol: T,
    pub atol: T,
    pub initial_step: T,
    pub max_step: T,
}

impl<T: Real> Default for OdeTolerances<T> {
    fn default() -> Self {
        Self {
            rtol: T::lit(1e-8),
            atol: T::lit(1e-10),
            initial_step: T::lit(1e-3),
            max_step: T::lit(0.1),
        }
    }
}

impl<T: Real> OdeTolerances<T> {
    /// Tight setting for reference propagations that other runs are checked against.
    pub fn reference() -> Self {
        Self {
            rtol: T::lit(1e-11),
            atol: T::lit(1e-13),
            ..Self::default()
        }
    }

    /// Both tolerances scaled by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolveOptions<T: Real> {
    pub tolerances: OdeTolerances<T>,
    /// Uniformly spaced output times including both ends (at least 2).
    pub samples: usize,
    pub spectrum: SpectrumMethod,
}

impl<T: Real> Default for EvolveOptions<T> {
    fn default() -> Self {
        Self {
            tolerances: OdeTolerances::default(),
            samples: 501,
            spectrum: SpectrumMethod::MorrisShore,
        }
    }
}

impl<T: Real> EvolveOptions<T> {
    /// Only the initial and final states are kept.
    pub fn endpoints() -> Self {
        Self {
            samples: 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleDiagnostics<T: Real> {
    pub trace_drift: T,
    pub min_eigenvalue: T,
}

/// Run-level counters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats<T: Real> {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evaluations: usize,
    /// Largest `|tr rho - 1|` over all accepted steps.
    pub max_trace_drift: T,
    /// Largest Hermiticity defect seen before re-symmetrisation.
    pub max_hermiticity_defect: T,
}

#[derive(Clone, Debug)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<DensityMatrix<T>>,
    pub diagnostics: Vec<SampleDiagnostics<T>>,
    pub stats: StepStats<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_state(&self) -> &DensityMatrix<T> {
        self.states
            .last()
            .expect("trajectory has at least two samples")
    }

    pub fn max_trace_drift(&self) -> T {
        self.diagnostics
            .iter()
            .fold(self.stats.max_trace_drift, |a, d| a.max(d.trace_drift))
    }

    pub fn min_eigenvalue(&self) -> T {
        self.diagnostics
            .iter()
            .fold(T::max_value().unwrap_or_else(T::one), |a, d| {
                a.min(d.min_eigenvalue)
            })
    }
}

/// Vector-space operations the stepper needs; implemented for complex matrices
/// (density matrices and column states alike).
fn axpy<T: Real>(y: &mut CMatrix<T>, a: T, x: &CMatrix<T>) {
    let a = c(a);
    y.zip_apply(x, |yi, xi| *yi += xi * a);
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// error coefficients: b - b*
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Integrate `y' = f(t, y)` over `times` (strictly increasing), calling
/// `post_step` after every accepted step and `on_sample` at every entry of
/// `times` (including the first).
fn drive<T, F, P, S>(
    mut f: F,
    times: &[T],
    y0: CMatrix<T>,
    tol: &OdeTolerances<T>,
    mut post_step: P,
    mut on_sample: S,
) -> Result<(CMatrix<T>, usize, usize, usize)>
where
    T: Real,
    F: FnMut(T, &CMatrix<T>) -> CMatrix<T>,
    P: FnMut(&mut CMatrix<T>),
    S: FnMut(usize, T, &CMatrix<T>) -> Result<()>,
{
    let lit = T::lit;
    let mut t = times[0];
    let t_end = *times.last().expect("non-empty time grid");
    let mut y = y0;
    on_sample(0, t, &y)?;
    let mut k1 = f(t, &y);
    let mut evals = 1usize;
    let mut h = tol.initial_step.min(tol.max_step);
    let mut err_old = lit(1e-4);
    let mut rejected_last = false;
    let mut non_finite = 0usize;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut next = 1usize;
    let span = (t_end - t).abs().max(T::one());
    let h_floor = span * lit(1e-14);

    while next < times.len() {
        let target = times[next];
        let mut lands = false;
        if t + h >= target - h_floor {
            h = target - t;
            lands = true;
        }
        if h <= h_floor {
            return Err(Error::StepUnderflow {
                time: t.to_f64_lossy(),
            });
        }

        let stage = |base: &CMatrix<T>, terms: &[(f64, &CMatrix<T>)]| {
            let mut s = base.clone();
            for (a, k) in terms {
                axpy(&mut s, h * lit(*a), k);
            }
            s
        };
        let k2 = f(t + h * lit(C2), &stage(&y, &[(A21, &k1)]));
        let k3 = f(t + h * lit(C3), &stage(&y, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(
            t + h * lit(C4),
            &stage(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = f(
            t + h * lit(C5),
            &stage(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + h,
            &stage(
                &y,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = stage(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = f(t + h, &y_new);
        evals += 6;

        let mut err_acc = T::zero();
        let mut finite = true;
        for idx in 0..y.len() {
            let e = k1[idx] * c(lit(E1))
                + k3[idx] * c(lit(E3))
                + k4[idx] * c(lit(E4))
                + k5[idx] * c(lit(E5))
                + k6[idx] * c(lit(E6))
                + k7[idx] * c(lit(E7));
            let e = e * c(h);
            let sc = tol.atol + tol.rtol * y[idx].modulus().max(y_new[idx].modulus());
            let r = e.modulus() / sc;
            if !r.is_finite() {
                finite = false;
            }
            err_acc += r * r;
        }
        if !finite
            || y_new
                .iter()
                .any(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            // overflowing trial step: shrink hard and retry; only a vanishing step is fatal
            non_finite += 1;
            if non_finite > 60 {
                return Err(Error::NonFinite {
                    time: t.to_f64_lossy(),
                });
            }
            h *= lit(FAC_MIN);
            rejected_last = true;
            rejected += 1;
            continue;
        }
        non_finite = 0;
        let err = (err_acc / T::from_usize(y.len()).expect("small")).sqrt();

        if err <= T::one() {
            let expo = lit(0.2 - BETA * 0.75);
            let mut fac = lit(SAFETY) * err.max(lit(1e-10)).powf(-expo) * err_old.powf(lit(BETA));
            fac = fac.max(lit(FAC_MIN)).min(lit(FAC_MAX));
            if rejected_last {
                fac = fac.min(T::one());
            }
            err_old = err.max(lit(1e-4));
            rejected_last = false;
            accepted += 1;

            let h_used = h;
            t = if lands { target } else { t + h };
            y = y_new;
            post_step(&mut y);
            // FSAL: reuse the last stage unless post-processing changed y
            k1 = k7;
            if lands {
                on_sample(next, t, &y)?;
                next += 1;
            }
            h = (h_used * fac).min(tol.max_step);
        } else {
            let expo = lit(0.2 - BETA * 0.75);
            let fac = (lit(SAFETY) * err.powf(-expo)).max(lit(FAC_MIN));
            h *= fac;
            rejected_last = true;
            rejected += 1;
        }
    }
    Ok((y, accepted, rejected, evals))
}

fn sample_times<T: Real>(t0: T, samples: usize) -> Vec<T> {
    let n = samples.max(2);
    let last = T::from_usize(n - 1).expect("small");
    (0..n)
        .map(|i| {
            if i == n - 1 {
                t0
            } else {
                -t0 + t0 * T::lit(2.0) * T::from_usize(i).expect("small") / last
            }
        })
        .collect()
}

/// Lindblad propagation of `rho0` across `[-t0, t0]`.
pub fn evolve<T: Real>(
    rho0: &DensityMatrix<T>,
    model: &ModelSpec<T>,
    noise: &NoiseSpec<T>,
    options: &EvolveOptions<T>,
) -> Result<Trajectory<T>> {
    let generator = DaviesGenerator::new(model, noise, options.spectrum)?;
    evolve_with_generator(rho0, &generator, options)
}

/// Lindblad propagation with a prebuilt generator.
pub fn evolve_with_generator<T: Real>(
    rho0: &DensityMatrix<T>,
    generator: &DaviesGenerator<T>,
    options: &EvolveOptions<T>,
) -> Result<Trajectory<T>> {
    let model = generator.model();
    if rho0.dim() != model.n_total() {
        return Err(Error::shape("initial state", model.n_total(), rho0.dim()));
    }
    let times = sample_times(model.sweep_half_width(), options.samples);
    let mut states = Vec::with_capacity(times.len());
    let mut diagnostics = Vec::with_capacity(times.len());
    let mut max_trace = T::zero();
    let mut max_herm = T::zero();
    let one = Cplx::new(T::one(), T::zero());

    let frame = (generator.method() == SpectrumMethod::MorrisShore)
        .then(|| AdiabaticFrame::new(generator.clone()));
    let y0 = match &frame {
        Some(fr) => symmetrize(&fr.enter(times[0], rho0.matrix())),
        None => rho0.matrix().clone(),
    };

    let (_, accepted, rejected, evals) = drive(
        |t, y| match &frame {
            Some(fr) => fr.rhs(t, y),
            None => generator.rhs(t, y),
        },
        &times,
        y0,
        &options.tolerances,
        |rho| {
            max_herm = max_herm.max(hermiticity_defect(rho));
            *rho = symmetrize(rho);
            max_trace = max_trace.max((rho.trace() - one).modulus());
        },
        |_, t, y| {
            let rho = match &frame {
                Some(fr) => symmetrize(&fr.leave(t, y)),
                None => y.clone(),
            };
            let state = DensityMatrix::new(rho).map_err(|e| match e {
                Error::InvalidState(msg) => {
                    Error::InvalidState(format!("at t = {}: {msg}", t.to_f64_lossy()))
                }
                other => other,
            })?;
            diagnostics.push(SampleDiagnostics {
                trace_drift: state.trace_drift(),
                min_eigenvalue: state.min_eigenvalue(),
            });
            states.push(state);
            Ok(())
        },
    )?;

    Ok(Trajectory {
        times,
        states,
        diagnostics,
        stats: StepStats {
            accepted,
            rejected,
            rhs_evaluations: evals,
            max_trace_drift: max_trace,
            max_hermiticity_defect: max_herm,
        },
    })
}

/// Schroedinger propagation of a pure state across `[-t0, t0]`.
///
/// Integrates in the interaction picture of the diabatic energies, where the
/// upper-manifold amplitudes carry the phase `exp(-i kappa t^2 / 2)`
/// analytically; the returned state is back in the bare Schroedinger picture.
pub fn evolve_unitary<T: Real>(
    psi0: &CVector<T>,
    model: &ModelSpec<T>,
    tol: &OdeTolerances<T>,
) -> Result<CVector<T>> {
    let n = model.n_total();
    let m = model.m_upper();
    if psi0.len() != n {
        return Err(Error::shape("initial state", n, psi0.len()));
    }
    let norm0 = psi0.norm();
    if (norm0 - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::InvalidState(format!(
            "state norm {} != 1",
            norm0.to_f64_lossy()
        )));
    }
    let t0 = model.sweep_half_width();
    let kappa = model.chirp_rate();
    let g = model.couplings().clone();
    let gd = g.adjoint();
    let phase = |t: T| {
        let (s, co) = (kappa * t * t * T::lit(0.5)).sin_cos();
        Cplx::new(co, s)
    };
    // psi_I = diag(e^{+i phi} on upper, 1 on lower) psi, phi = kappa t^2 / 2
    let mut y0 = CMatrix::from_column_slice(n, 1, psi0.as_slice());
    let p0 = phase(-t0);
    for i in 0..m {
        y0[(i, 0)] *= p0;
    }
    let (y, ..) = drive(
        |t, psi| {
            let e = phase(t);
            let upper = psi.rows(0, m);
            let lower = psi.rows(m, n - m);
            let mut out = CMatrix::zeros(n, 1);
            // d psi_u / dt = -i e^{i phi} G psi_l,  d psi_l / dt = -i e^{-i phi} G† psi_u
            let du = &g * lower * (e * Cplx::new(T::zero(), -T::one()));
            let dl = &gd * upper * (e.conj() * Cplx::new(T::zero(), -T::one()));
            out.rows_mut(0, m).copy_from(&du);
            out.rows_mut(m, n - m).copy_from(&dl);
            out
        },
        &[-t0, t0],
        y0,
        tol,
        |_| {},
        |_, _, _| Ok(()),
    )?;
    let mut psi = CVector::from_column_slice(y.as_slice());
    let p1 = phase(t0).conj();
    for i in 0..m {
        psi[i] *= p1;
    }
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::complexify;
    use nalgebra::dmatrix;

    fn lz_model(g: f64) -> ModelSpec<f64> {
        ModelSpec::from_real_sweep(&dmatrix![g], 0.1, 50.0).unwrap()
    }

    #[test]
    fn rk_driver_integrates_exponential_decay() {
        let y0 = CMatrix::from_element(1, 1, c(1.0));
        let tol = OdeTolerances::<f64>::default();
        let (y, ..) = drive(
            |_, y| y * c(-0.5),
            &[0.0, 4.0],
            y0,
            &tol,
            |_| {},
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!((y[(0, 0)].re - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn uncoupled_model_leaves_populations_alone() {
        let model = lz_model(0.0);
        let psi = CVector::from_vec(vec![c(0.0), c(1.0)]);
        let out = evolve_unitary(&psi, &model, &OdeTolerances::default()).unwrap();
        assert!((out[1].norm() - 1.0).abs() < 1e-12);
        assert!(out[0].norm() < 1e-14);
    }

    #[test]
    fn unitary_norm_is_preserved() {
        let g = complexify(&dmatrix![0.3, -0.8; 0.5, 0.1]);
        let model = ModelSpec::from_sweep(g, 0.1, 50.0).unwrap();
        let psi = CVector::from_vec(vec![c(0.0), c(0.0), c(0.6), c(0.8)]);
        let out = evolve_unitary(&psi, &model, &OdeTolerances::reference()).unwrap();
        assert!(
            (out.norm() - 1.0).abs() < 1e-9,
            "norm drift {}",
            (out.norm() - 1.0).abs()
        );
    }

    #[test]
    fn maximally_mixed_is_stationary_without_noise() {
        let model = lz_model(0.5);
        let rho = DensityMatrix::maximally_mixed(2);
        let traj = evolve(
            &rho,
            &model,
            &NoiseSpec::silent(1, 1),
            &EvolveOptions::endpoints(),
        )
        .unwrap();
        assert!(traj.final_state().trace_distance(&rho) < 1e-12);
    }

    #[test]
    fn trajectory_samples_cover_window() {
        let model = ModelSpec::from_real_sweep(&dmatrix![0.5], 0.5, 5.0).unwrap();
        let rho = DensityMatrix::from_pure(&CVector::from_vec(vec![c(0.0), c(1.0)])).unwrap();
        let noise = NoiseSpec::new(dmatrix![1.0], 0.2, 0.5).unwrap();
        let opts = EvolveOptions {
            samples: 11,
            ..EvolveOptions::default()
        };
        let traj = evolve(&rho, &model, &noise, &opts).unwrap();
        assert_eq!(traj.times.len(), 11);
        assert_eq!(traj.times[0], -10.0);
        assert_eq!(*traj.times.last().unwrap(), 10.0);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert!(traj.max_trace_drift() < 1e-7);
        assert!(traj.min_eigenvalue() > -1e-7);
        assert!(traj.stats.max_hermiticity_defect < 1e-10);
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let model = lz_model(0.5);
        let rho = DensityMatrix::<f64>::maximally_mixed(3);
        assert!(matches!(
            evolve(
                &rho,
                &model,
                &NoiseSpec::silent(1, 1),
                &EvolveOptions::endpoints()
            ),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adiabatic_frame_matches_laboratory_frame() {
        let model = ModelSpec::from_real_sweep(&dmatrix![0.7, -0.2; 0.4, 0.9], 0.5, 8.0).unwrap();
        let noise = NoiseSpec::new(dmatrix![0.3, -0.6; 0.8, 0.1], 0.7, 0.4).unwrap();
        let psi = CVector::from_vec(vec![c(0.0), c(0.0), c(0.6), c(0.8)]);
        let rho = DensityMatrix::from_pure(&psi).unwrap();
        let run = |spectrum| {
            let opts = EvolveOptions {
                tolerances: OdeTolerances::reference(),
                samples: 9,
                spectrum,
            };
            evolve(&rho, &model, &noise, &opts).unwrap()
        };
        let a = run(SpectrumMethod::MorrisShore);
        let b = run(SpectrumMethod::Eigensolver);
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!(x.trace_distance(y) < 1e-8, "{}", x.trace_distance(y));
        }
    }

    #[test]
    fn frame_round_trip() {
        let model = ModelSpec::from_real_sweep(&dmatrix![0.7, -0.2; 0.4, 0.9], 0.5, 8.0).unwrap();
        let noise = NoiseSpec::new(dmatrix![0.3, -0.6; 0.8, 0.1], 0.7, 0.4).unwrap();
        let frame = AdiabaticFrame::new(
            DaviesGenerator::new(&model, &noise, SpectrumMethod::MorrisShore).unwrap(),
        );
        let rho = DensityMatrix::<f64>::maximally_mixed(4).into_inner() * c(0.5)
            + CMatrix::from_fn(4, 4, |i, j| if i == 0 && j == 0 { c(0.5) } else { c(0.0) });
        for t in [-16.0, -3.0, 0.0, 2.5, 16.0] {
            let back = frame.leave(t, &frame.enter(t, &rho));
            assert!((back - &rho).norm() < 1e-12);
        }
    }
}
