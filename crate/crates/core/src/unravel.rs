// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Noise-matrix estimation from transfer efficiencies measured under several
//! coherent coupling schemes.
//!
//! Only `gamma * (W x W)` enters the generator, so `W` and `-W` give identical
//! data and the magnitude of `W` trades against the rate. The solver fits the
//! raw entries at the measured rate and reports the unit direction together
//! with the folded effective rate `gamma * |W|_F^2`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiments::{
    fig3_couplings, transfer_efficiency, transfer_states, CouplingSet, Scenario,
};
use crate::integrator::OdeTolerances;
use crate::model::build_noise_operator;
use crate::scalar::{complexify, CVector, RMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub couplings: RMatrix<f64>,
    /// Perturbation angles when the couplings come from a named family.
    pub delta: Option<(f64, f64)>,
    pub gamma: f64,
    pub temperature: f64,
    pub kappa: f64,
    pub tau0: f64,
    pub efficiency: f64,
    pub weight: f64,
}

impl Measurement {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0 + 1e-9).contains(&self.efficiency) {
            return Err(Error::InvalidParameter(format!(
                "measured efficiency {} outside [0, 1]",
                self.efficiency
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "negative weight {}",
                self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnravelOptions {
    pub starts: usize,
    pub seed: u64,
    /// Best screened starts that get a full local refinement.
    pub refine_starts: usize,
    /// Tolerances of the final fit; data are assumed to be this accurate.
    pub tolerances: OdeTolerances<f64>,
    /// Tolerance loosening for screening and the first refinement stage.
    pub coarse_factor: f64,
    /// Step cap for the coarse stage.
    pub coarse_max_step: f64,
    pub max_iterations: usize,
    pub polish_iterations: usize,
    /// Box on every entry of `W`.
    pub bound: f64,
    /// Minimum number of measurements below which the result is flagged;
    /// `None` means the number of entries of `W`.
    pub identifiability_floor: Option<usize>,
    /// A measurement within this of its coherent (noise-free) efficiency is
    /// taken as observed noise-free and constrains the starting points.
    pub noise_free_tol: f64,
}

impl Default for UnravelOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            refine_starts: 3,
            tolerances: OdeTolerances::default(),
            coarse_factor: 10.0,
            coarse_max_step: 1.0,
            max_iterations: 40,
            polish_iterations: 3,
            bound: 2.0,
            identifiability_floor: None,
            noise_free_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnravelResult {
    /// Fitted noise couplings, sign-normalised (largest entry positive).
    pub estimated_w: RMatrix<f64>,
    /// `estimated_w / |estimated_w|_F`.
    pub direction: RMatrix<f64>,
    /// `gamma * |estimated_w|_F^2`, the only magnitude the data fix.
    pub effective_rate: f64,
    /// Root-mean-square weighted efficiency misfit.
    pub residual: f64,
    pub possibly_ill_posed: bool,
    /// Singular values of the misfit Jacobian at the estimate, descending.
    pub sensitivity: Vec<f64>,
    pub equivalence_note: String,
    /// Indices of measurements recognised as noise-free.
    pub noise_free: Vec<usize>,
    pub forward_evaluations: usize,
}

struct Problem<'a> {
    data: &'a [Measurement],
    states: Vec<(CVector<f64>, CVector<f64>)>,
    shape: (usize, usize),
    cache: Mutex<HashMap<(Vec<u64>, u64), f64>>,
    evaluations: Mutex<usize>,
}

impl<'a> Problem<'a> {
    fn new(data: &'a [Measurement]) -> Result<Self> {
        let shape = data[0].couplings.shape();
        let mut states = Vec::with_capacity(data.len());
        for m in data {
            m.validate()?;
            if m.couplings.shape() != shape {
                return Err(Error::shape(
                    "measurement couplings",
                    format!("{shape:?}"),
                    format!("{:?}", m.couplings.shape()),
                ));
            }
            states.push(transfer_states(&m.couplings)?);
        }
        Ok(Self {
            data,
            states,
            shape,
            cache: Mutex::new(HashMap::new()),
            evaluations: Mutex::new(0),
        })
    }

    fn dim(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    fn matrix(&self, p: &DVector<f64>) -> RMatrix<f64> {
        DMatrix::from_row_slice(self.shape.0, self.shape.1, p.as_slice())
    }

    fn efficiency(&self, k: usize, p: &DVector<f64>, tol: &OdeTolerances<f64>) -> Result<f64> {
        let mut key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        key.push(k as u64);
        key.push(tol.max_step.to_bits());
        let key = (key, tol.rtol.to_bits());
        if let Some(&e) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(e);
        }
        let m = &self.data[k];
        let (e, _) = transfer_efficiency(
            &m.couplings,
            &self.matrix(p),
            &self.states[k],
            m.gamma,
            m.temperature,
            m.kappa,
            m.tau0,
            tol,
        )?;
        *self.evaluations.lock().expect("counter lock") += 1;
        self.cache.lock().expect("cache lock").insert(key, e);
        Ok(e)
    }

    /// Weighted residual vector `sqrt(w_k) (eff_k(W) - observed_k)`.
    fn residuals(&self, p: &DVector<f64>, tol: &OdeTolerances<f64>) -> Result<DVector<f64>> {
        let r: Result<Vec<f64>> = (0..self.data.len())
            .into_par_iter()
            .map(|k| {
                let m = &self.data[k];
                Ok(m.weight.sqrt() * (self.efficiency(k, p, tol)? - m.efficiency))
            })
            .collect();
        Ok(DVector::from_vec(r?))
    }

    /// Forward-difference Jacobian of the residuals.
    fn jacobian(
        &self,
        p: &DVector<f64>,
        r0: &DVector<f64>,
        tol: &OdeTolerances<f64>,
    ) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.data.len(), self.dim());
        for j in 0..self.dim() {
            let h = 1e-3 * p[j].abs().max(1.0);
            let mut up = p.clone();
            up[j] += h;
            jac.set_column(j, &((self.residuals(&up, tol)? - r0) / h));
        }
        Ok(jac)
    }
}

fn clamp(p: &DVector<f64>, bound: f64) -> DVector<f64> {
    p.map(|x| x.clamp(-bound, bound))
}

struct LocalFit {
    p: DVector<f64>,
    cost: f64,
    /// Jacobian at `p` when the last iteration produced one.
    jacobian: Option<DMatrix<f64>>,
}

/// Levenberg iterations (isotropic damping, Nielsen updates) on a difference
/// Jacobian, restricted to `W = basis * q` for orthonormal `basis` columns.
/// Stops once `cost <= floor`.
fn levenberg(
    problem: &Problem<'_>,
    basis: &DMatrix<f64>,
    start: &DVector<f64>,
    tol: &OdeTolerances<f64>,
    iterations: usize,
    floor: f64,
    bound: f64,
) -> Result<LocalFit> {
    let k = basis.ncols();
    let lift = |q: &DVector<f64>| clamp(&(basis * q), bound);
    let mut q = basis.transpose() * clamp(start, bound);
    let mut p = lift(&q);
    let mut r = problem.residuals(&p, tol)?;
    let mut cost = r.norm_squared();
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut jac: Option<DMatrix<f64>> = None;
    for _ in 0..iterations {
        if cost <= floor || k == 0 {
            break;
        }
        let j = match jac.take() {
            Some(j) => j,
            None => problem.jacobian(&p, &r, tol)? * basis,
        };
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        if lambda < 0.0 {
            lambda = 1e-3 * a.diagonal().max().max(1e-12);
        }
        let damped = &a + DMatrix::identity(k, k) * lambda;
        let step = damped
            .cholesky()
            .map(|ch| ch.solve(&(-&g)))
            .unwrap_or_else(|| -&g / lambda);
        let p_trial = lift(&(&q + &step));
        let q_trial = basis.transpose() * &p_trial;
        let step = &q_trial - &q;
        if step.norm() <= 1e-12 * (q.norm() + 1e-12) {
            jac = Some(j);
            break;
        }
        let r_trial = match problem.residuals(&p_trial, tol) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => DVector::from_element(r.len(), f64::INFINITY),
            Err(e) => return Err(e),
        };
        let cost_trial = r_trial.norm_squared();
        let predicted = -(2.0 * step.dot(&g) + (&j * &step).norm_squared());
        if cost_trial < cost {
            let gain = if predicted > 0.0 {
                (cost - cost_trial) / predicted
            } else {
                1.0
            };
            q = q_trial;
            p = p_trial;
            r = r_trial;
            cost = cost_trial;
            lambda *= (1.0 - (2.0 * gain.min(1.0) - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
        } else {
            lambda *= nu;
            nu *= 2.0;
            jac = Some(j);
        }
    }
    let jacobian = jac.filter(|_| k == problem.dim());
    Ok(LocalFit { p, cost, jacobian })
}

/// Flip the sign so the largest-magnitude entry is positive.
fn canonical_sign(w: RMatrix<f64>) -> RMatrix<f64> {
    let lead = w
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        -w
    } else {
        w
    }
}

fn random_start(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0) * bound.min(1.0))
}

/// Linear constraints `W psi_lower = 0`, `W^T psi_upper = 0` from one noise-free
/// scheme, as rows acting on the row-major entries of `W`.
fn annihilation_rows(
    states: &(CVector<f64>, CVector<f64>),
    m: usize,
    l: usize,
) -> Vec<DVector<f64>> {
    let mut rows = Vec::new();
    for psi in [&states.0, &states.1] {
        for part in [0, 1] {
            let comp = |i: usize| if part == 0 { psi[i].re } else { psi[i].im };
            // (W psi_lower)_i = sum_j W_ij psi_{m+j}
            for i in 0..m {
                let mut row = DVector::zeros(m * l);
                for j in 0..l {
                    row[i * l + j] = comp(m + j);
                }
                rows.push(row);
            }
            // (W^T psi_upper)_j = sum_i W_ij psi_i
            for j in 0..l {
                let mut row = DVector::zeros(m * l);
                for i in 0..m {
                    row[i * l + j] = comp(i);
                }
                rows.push(row);
            }
        }
    }
    rows
}

/// Orthonormal basis (columns) of the entries of `W` compatible with every row.
fn null_space(rows: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(n, n);
    }
    let a = DMatrix::from_fn(rows.len().max(n), n, |r, c| {
        rows.get(r).map_or(0.0, |v| v[c])
    });
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let keep: Vec<usize> = (0..n).filter(|&k| svd.singular_values[k] <= 1e-9).collect();
    DMatrix::from_fn(n, keep.len(), |r, c| vt[(keep[c], r)])
}

/// Fit `W` to the measurements by multi-start least squares.
pub fn unravel_noise(
    measurements: &[Measurement],
    initial_guess: Option<&RMatrix<f64>>,
    options: &UnravelOptions,
) -> Result<UnravelResult> {
    if measurements.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one measurement is required".into(),
        ));
    }
    let problem = Problem::new(measurements)?;
    let n = problem.dim();
    if let Some(g) = initial_guess {
        if g.shape() != problem.shape {
            return Err(Error::shape(
                "initial guess",
                format!("{:?}", problem.shape),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let fine = options.tolerances;
    let coarse = OdeTolerances {
        max_step: options.coarse_max_step.max(fine.max_step),
        ..fine.scaled(options.coarse_factor.max(1.0))
    };

    // Schemes whose efficiency is untouched by the noise pin W to a subspace.
    let (m, l) = problem.shape;
    let mut noise_free = Vec::new();
    let mut rows = Vec::new();
    for (k, meas) in measurements.iter().enumerate() {
        if meas.gamma == 0.0 {
            continue;
        }
        let (coherent, _) = transfer_efficiency(
            &meas.couplings,
            &DMatrix::zeros(m, l),
            &problem.states[k],
            0.0,
            meas.temperature,
            meas.kappa,
            meas.tau0,
            &fine,
        )?;
        if (coherent - meas.efficiency).abs() <= options.noise_free_tol {
            noise_free.push(k);
            rows.extend(annihilation_rows(&problem.states[k], m, l));
        }
    }
    let basis = null_space(&rows, n);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut starts: Vec<DVector<f64>> = Vec::new();
    if let Some(g) = initial_guess {
        starts.push(DVector::from_row_slice(g.transpose().as_slice()));
    }
    if basis.ncols() == 0 {
        // only W = 0 keeps every observed scheme noise-free
        starts.push(DVector::zeros(n));
    }
    while starts.len() < options.starts.max(1) {
        let coeffs = random_start(&mut rng, basis.ncols(), options.bound);
        starts.push(&basis * coeffs);
    }

    let mut screened: Vec<(f64, DVector<f64>)> = starts
        .into_iter()
        .map(|s| match problem.residuals(&s, &coarse) {
            Ok(r) => Ok((r.norm_squared(), s)),
            Err(e) if e.is_numerical() => Ok((f64::INFINITY, s)),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    screened.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Misfit floors: what the integration error alone can explain.
    let floor_of = |t: &OdeTolerances<f64>| {
        let per_point = 10.0 * t.rtol;
        measurements
            .iter()
            .map(|m| m.weight * per_point * per_point)
            .sum::<f64>()
    };
    let mut best: Option<LocalFit> = None;
    for (_, s) in screened.into_iter().take(options.refine_starts.max(1)) {
        let fit = levenberg(
            &problem,
            &basis,
            &s,
            &coarse,
            options.max_iterations,
            floor_of(&coarse),
            options.bound,
        )?;
        let done = fit.cost <= floor_of(&coarse);
        if best.as_ref().map_or(true, |b| fit.cost < b.cost) {
            best = Some(fit);
        }
        if done {
            break;
        }
    }
    let best = best.expect("at least one start");

    // Unconstrained polish: noise-free schemes only bound the leakage, not exclude it.
    let full = DMatrix::identity(n, n);
    let fit = levenberg(
        &problem,
        &full,
        &best.p,
        &fine,
        options.polish_iterations,
        floor_of(&fine),
        options.bound,
    )?;
    let (p, cost) = (fit.p, fit.cost);
    let jac = match fit.jacobian {
        Some(j) => j,
        None => problem.jacobian(&p, &problem.residuals(&p, &fine)?, &fine)?,
    };
    let mut sensitivity: Vec<f64> = jac
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sensitivity.sort_by(|a, b| b.total_cmp(a));

    let total_weight: f64 = measurements
        .iter()
        .map(|m| m.weight)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let residual = (cost / total_weight).sqrt();
    let w = canonical_sign(problem.matrix(&p));
    let norm = w.norm();
    let direction = if norm > 0.0 { &w / norm } else { w.clone() };
    let gamma_ref = measurements[0].gamma;
    let floor = options.identifiability_floor.unwrap_or(n);
    let possibly_ill_posed = measurements.len() < floor;

    let mut note = String::from("sign class {W, -W}: the data are quadratic in W");
    if measurements.iter().all(|m| m.gamma == gamma_ref) {
        let _ = write!(
            note,
            "; magnitude folded into the effective rate gamma*|W|^2"
        );
    }
    let top = sensitivity.first().copied().unwrap_or(0.0);
    let weak = sensitivity.iter().filter(|&&s| s < 1e-3 * top).count();
    if weak > 0 {
        let _ = write!(note, "; {weak} weakly determined direction(s) (Jacobian singular value < 1e-3 of the largest)");
    }
    if !noise_free.is_empty() {
        let _ = write!(
            note,
            "; {} noise-free scheme(s) restrict the start space to {} of {n} dimensions",
            noise_free.len(),
            basis.ncols()
        );
    }
    if possibly_ill_posed {
        let _ = write!(
            note,
            "; possibly ill-posed: {} measurement(s) for {n} unknowns",
            measurements.len()
        );
    }

    let forward_evaluations = *problem.evaluations.lock().expect("counter lock");
    Ok(UnravelResult {
        effective_rate: gamma_ref * norm * norm,
        estimated_w: w,
        direction,
        residual,
        possibly_ill_posed,
        sensitivity,
        equivalence_note: note,
        noise_free,
        forward_evaluations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeCheck {
    pub scheme: usize,
    /// `max(|X psi_i|, |X psi_f|)` for the scheme's transfer states.
    pub defect: f64,
    pub pass: bool,
}

/// For each scheme observed to be noise-free, check that the candidate noise
/// annihilates both of its transfer states.
pub fn dfs_constraint_check(
    candidate_w: &RMatrix<f64>,
    schemes: &[RMatrix<f64>],
    tol: f64,
) -> Result<Vec<SchemeCheck>> {
    let (m, l) = candidate_w.shape();
    let x = complexify(&build_noise_operator(
        &crate::model::NoiseSpec::new(candidate_w.clone(), 0.0, 0.0)?,
        m + l,
        m,
    )?);
    schemes
        .iter()
        .enumerate()
        .map(|(scheme, g)| {
            if g.shape() != (m, l) {
                return Err(Error::shape(
                    "scheme couplings",
                    format!("{:?}", (m, l)),
                    format!("{:?}", g.shape()),
                ));
            }
            let (init, target) = transfer_states(g)?;
            let defect = (&x * init).norm().max((&x * target).norm());
            Ok(SchemeCheck {
                scheme,
                defect,
                pass: defect <= tol,
            })
        })
        .collect()
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<f64> {
    record
        .get(idx)
        .ok_or_else(|| Error::config(name, format!("missing on line {line}")))?
        .trim()
        .parse()
        .map_err(|e| Error::config(name, format!("line {line}: {e}")))
}

/// Measurements in the sweep CSV schema plus a `weight` column. Couplings are
/// rebuilt from the scenario and angles with `g = g_magnitude`.
pub fn read_measurements<R: Read>(input: R, g_magnitude: f64) -> Result<Vec<Measurement>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::config(name, "column missing from measurement file"))
    };
    let idx = [
        col("scenario")?,
        col("delta1")?,
        col("delta2")?,
        col("gamma_over_omega")?,
        col("kBT_over_omega")?,
        col("kappa_over_omega2")?,
        col("kappa_t0_over_omega")?,
        col("efficiency")?,
        col("weight")?,
    ];
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let scenario: Scenario = rec
            .get(idx[0])
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| Error::config("scenario", format!("line {line}: {e}")))?;
        let d1 = parse_field(&rec, idx[1], "delta1", line)?;
        let d2 = parse_field(&rec, idx[2], "delta2", line)?;
        let couplings = match scenario {
            Scenario::PerturbedCouplings(set) => fig3_couplings(d1, d2, g_magnitude, set),
            Scenario::PerturbedNoise => fig3_couplings(0.0, 0.0, g_magnitude, CouplingSet::Text),
            Scenario::Custom => {
                return Err(Error::config(
                    "scenario",
                    format!("line {line}: custom rows carry no couplings"),
                ))
            }
        };
        let m = Measurement {
            couplings,
            delta: Some((d1, d2)),
            gamma: parse_field(&rec, idx[3], "gamma_over_omega", line)?,
            temperature: parse_field(&rec, idx[4], "kBT_over_omega", line)?,
            kappa: parse_field(&rec, idx[5], "kappa_over_omega2", line)?,
            tau0: parse_field(&rec, idx[6], "kappa_t0_over_omega", line)?,
            efficiency: parse_field(&rec, idx[7], "efficiency", line)?,
            weight: parse_field(&rec, idx[8], "weight", line)?,
        };
        m.validate()
            .map_err(|e| Error::config("efficiency", format!("line {line}: {e}")))?;
        out.push(m);
    }
    Ok(out)
}

/// `upper_level,lower_level,x` table of the estimate (1-based level labels).
pub fn write_estimate_csv<W: Write>(out: W, result: &UnravelResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["upper_level", "lower_level", "x"])?;
    let (m, l) = result.estimated_w.shape();
    for i in 0..m {
        for j in 0..l {
            wtr.write_record(&[
                (i + 1).to_string(),
                (m + j + 1).to_string(),
                format!("{:.11e}", result.estimated_w[(i, j)]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Plain-text summary of a fit.
pub fn report(result: &UnravelResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "estimated W (sign class representative):");
    for row in result.estimated_w.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:+.6e}")).collect();
        let _ = writeln!(s, "  [{}]", cells.join(", "));
    }
    let _ = writeln!(
        s,
        "effective rate gamma*|W|^2: {:.6e}",
        result.effective_rate
    );
    let _ = writeln!(s, "rms residual: {:.3e}", result.residual);
    let sv: Vec<String> = result
        .sensitivity
        .iter()
        .map(|x| format!("{x:.3e}"))
        .collect();
    let _ = writeln!(s, "jacobian singular values: {}", sv.join(" "));
    let _ = writeln!(s, "possibly ill-posed: {}", result.possibly_ill_posed);
    let _ = writeln!(s, "forward evaluations: {}", result.forward_evaluations);
    let _ = writeln!(s, "note: {}", result.equivalence_note);
    s
}
