// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Transfer-efficiency sweeps over the noise rate.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{evolve, EvolveOptions, OdeTolerances};
use crate::model::{DensityMatrix, ModelSpec, NoiseSpec};
use crate::morris_shore::{angles_2x2, embed_pair, morris_shore_general, Block2};
use crate::scalar::{complexify, CVector, Cplx, RMatrix};

pub const CSV_HEADER: [&str; 8] = [
    "scenario",
    "delta1",
    "delta2",
    "gamma_over_omega",
    "kBT_over_omega",
    "kappa_over_omega2",
    "kappa_t0_over_omega",
    "efficiency",
];

/// Which coupling matrix the perturbation angles act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CouplingSet {
    /// `g13, g14` on `pi/4 + delta1`; orthogonal (no dark state) at `delta = 0`.
    #[default]
    Caption,
    /// `g13, g14` on `-pi/4 + delta1`; equals `(g/2, -g/2, -g/2, g/2)` at `delta = 0`,
    /// the coupling that keeps the transfer inside the all-1/2 DFS.
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Coherent couplings perturbed, noise fixed at `x_ij = 1/2`.
    PerturbedCouplings(CouplingSet),
    /// Couplings at the DFS values, noise perturbed.
    PerturbedNoise,
    /// Explicit matrices from the configuration.
    Custom,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::PerturbedCouplings(CouplingSet::Caption) => "perturbed-couplings",
            Scenario::PerturbedCouplings(CouplingSet::Text) => "perturbed-couplings-text",
            Scenario::PerturbedNoise => "perturbed-noise",
            Scenario::Custom => "custom",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "perturbed-couplings" => Ok(Scenario::PerturbedCouplings(CouplingSet::Caption)),
            "perturbed-couplings-text" => Ok(Scenario::PerturbedCouplings(CouplingSet::Text)),
            "perturbed-noise" => Ok(Scenario::PerturbedNoise),
            "custom" => Ok(Scenario::Custom),
            other => Err(Error::InvalidParameter(format!(
                "unknown scenario '{other}'"
            ))),
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

pub fn default_gamma_grid() -> Vec<f64> {
    log_grid(1e-3, 10.0, 25)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub scenario: Scenario,
    pub delta1: f64,
    pub delta2: f64,
    pub gamma_grid: Vec<f64>,
    pub temperature: f64,
    pub kappa: f64,
    pub tau0: f64,
    pub g_magnitude: f64,
    pub tolerances: OdeTolerances<f64>,
    /// Couplings and noise for [`Scenario::Custom`].
    pub custom_couplings: Option<RMatrix<f64>>,
    pub custom_noise: Option<RMatrix<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::PerturbedCouplings(CouplingSet::Caption),
            delta1: 0.0,
            delta2: 0.0,
            gamma_grid: default_gamma_grid(),
            temperature: 0.001,
            kappa: 0.1,
            tau0: 50.0,
            g_magnitude: 1.0,
            tolerances: OdeTolerances::default(),
            custom_couplings: None,
            custom_noise: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .gamma_grid
            .iter()
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "gamma grid must be finite and nonnegative".into(),
            ));
        }
        if self.gamma_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("gamma grid must be sorted".into()));
        }
        if !(self.tau0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau0 must be positive, got {}",
                self.tau0
            )));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if self.scenario == Scenario::Custom
            && (self.custom_couplings.is_none() || self.custom_noise.is_none())
        {
            return Err(Error::InvalidParameter(
                "custom scenario needs couplings and noise".into(),
            ));
        }
        Ok(())
    }

    /// Coherent and noise coupling blocks for this scenario.
    pub fn matrices(&self) -> Result<(RMatrix<f64>, RMatrix<f64>)> {
        Ok(match self.scenario {
            Scenario::PerturbedCouplings(set) => (
                fig3_couplings(self.delta1, self.delta2, self.g_magnitude, set),
                DMatrix::from_element(2, 2, 0.5),
            ),
            Scenario::PerturbedNoise => (
                fig3_couplings(0.0, 0.0, self.g_magnitude, CouplingSet::Text),
                fig4_noise(self.delta1, self.delta2),
            ),
            Scenario::Custom => {
                let g = self.custom_couplings.clone().ok_or_else(|| {
                    Error::InvalidParameter("custom scenario needs couplings".into())
                })?;
                let w = self
                    .custom_noise
                    .clone()
                    .ok_or_else(|| Error::InvalidParameter("custom scenario needs noise".into()))?;
                (g, w)
            }
        })
    }
}

/// 2:2 coherent couplings `[[g13, g14], [g23, g24]]` under the perturbation angles.
pub fn fig3_couplings(delta1: f64, delta2: f64, g: f64, set: CouplingSet) -> RMatrix<f64> {
    use std::f64::consts::FRAC_PI_4;
    let a = g * std::f64::consts::FRAC_1_SQRT_2;
    let first = match set {
        CouplingSet::Caption => FRAC_PI_4 + delta1,
        CouplingSet::Text => -FRAC_PI_4 + delta1,
    };
    let second = 3.0 * FRAC_PI_4 + delta2;
    DMatrix::from_row_slice(
        2,
        2,
        &[
            a * first.cos(),
            a * first.sin(),
            a * second.cos(),
            a * second.sin(),
        ],
    )
}

/// 2:2 noise couplings `[[x13, x14], [x23, x24]]`; all entries 1/2 at `delta = 0`.
pub fn fig4_noise(delta1: f64, delta2: f64) -> RMatrix<f64> {
    use std::f64::consts::FRAC_PI_4;
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let (p, q) = (FRAC_PI_4 + delta1, FRAC_PI_4 + delta2);
    DMatrix::from_row_slice(2, 2, &[a * p.cos(), a * p.sin(), a * q.cos(), a * q.sin()])
}

/// Initial (lower manifold) and target (upper manifold) states of the
/// Morris-Shore pair carrying the transfer.
///
/// For 2x2 couplings: `-sin(chi)|3> + cos(chi)|4>` and
/// `-sin(xi)|1> + cos(xi)|2>`, or the `(cos, sin)` partners when the rotation
/// puts the coupling on that pair instead. Otherwise the strongest singular pair.
pub fn transfer_states(g: &RMatrix<f64>) -> Result<(CVector<f64>, CVector<f64>)> {
    let (m, l) = g.shape();
    let n = m + l;
    if m == 2 && l == 2 {
        let angles = angles_2x2(g)?;
        let x = Block2::from_matrix(g)?.rotated(&angles);
        // the 2~-4~ pair unless the rotation left the coupling on 1~-3~
        let (up, low) = if x.x13.abs() > x.x24.abs() * (1.0 + 1e-9) {
            (1, 3)
        } else {
            (2, 4)
        };
        return Ok((
            embed_pair(angles.lower_state(low), 2, n),
            embed_pair(angles.upper_state(up), 0, n),
        ));
    }
    let ms = morris_shore_general(&complexify(g));
    if ms.pair_couplings.is_empty() {
        return Err(Error::InvalidParameter(
            "couplings vanish; no transfer pair".into(),
        ));
    }
    Ok((ms.embed_lower(0), ms.embed_upper(0)))
}

/// Per-point numerical health, kept next to each efficiency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointDiagnostics {
    pub accepted_steps: usize,
    pub max_trace_drift: f64,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyResult {
    pub scenario: String,
    pub delta1: f64,
    pub delta2: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub kappa: f64,
    pub tau0: f64,
    pub efficiency: f64,
    pub diagnostics: PointDiagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointFailure {
    pub scenario: String,
    pub gamma: f64,
    pub error: String,
}

pub type PointResult = std::result::Result<EfficiencyResult, PointFailure>;

/// One Lindblad run from `initial` over the full sweep; returns the target
/// population at `+t0` with the run diagnostics.
pub fn transfer_efficiency(
    g: &RMatrix<f64>,
    w: &RMatrix<f64>,
    states: &(CVector<f64>, CVector<f64>),
    gamma: f64,
    temperature: f64,
    kappa: f64,
    tau0: f64,
    tolerances: &OdeTolerances<f64>,
) -> Result<(f64, PointDiagnostics)> {
    let model = ModelSpec::from_real_sweep(g, kappa, tau0)?;
    let noise = NoiseSpec::new(w.clone(), gamma, temperature)?;
    let rho0 = DensityMatrix::from_pure(&states.0)?;
    let options = EvolveOptions {
        tolerances: *tolerances,
        ..EvolveOptions::endpoints()
    };
    let traj = evolve(&rho0, &model, &noise, &options)?;
    let eff = traj.final_state().population(&states.1);
    let diag = PointDiagnostics {
        accepted_steps: traj.stats.accepted,
        max_trace_drift: traj.max_trace_drift(),
        min_eigenvalue: traj.min_eigenvalue(),
    };
    Ok((eff, diag))
}

fn sweep_points(
    label: &str,
    delta: (f64, f64),
    g: &RMatrix<f64>,
    w: &RMatrix<f64>,
    states: &(CVector<f64>, CVector<f64>),
    config: &SweepConfig,
) -> Vec<PointResult> {
    config
        .gamma_grid
        .par_iter()
        .map(|&gamma| {
            transfer_efficiency(
                g,
                w,
                states,
                gamma,
                config.temperature,
                config.kappa,
                config.tau0,
                &config.tolerances,
            )
            .map(|(efficiency, diagnostics)| EfficiencyResult {
                scenario: label.to_string(),
                delta1: delta.0,
                delta2: delta.1,
                gamma,
                temperature: config.temperature,
                kappa: config.kappa,
                tau0: config.tau0,
                efficiency,
                diagnostics,
            })
            .map_err(|e| PointFailure {
                scenario: label.to_string(),
                gamma,
                error: e.to_string(),
            })
        })
        .collect()
}

/// Efficiency at every grid rate, in grid order. A failed point is reported
/// in place and does not stop the others.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<PointResult>> {
    config.validate()?;
    let (g, w) = config.matrices()?;
    let states = transfer_states(&g)?;
    Ok(sweep_points(
        config.scenario.name(),
        (config.delta1, config.delta2),
        &g,
        &w,
        &states,
        config,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Upper singlet to the bright lower state; rides the lower adiabatic branch.
    Downhill,
    /// Bright lower state to the upper singlet.
    Uphill,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "downhill" => Ok(Direction::Downhill),
            "uphill" => Ok(Direction::Uphill),
            other => Err(Error::InvalidParameter(format!(
                "unknown direction '{other}'"
            ))),
        }
    }
}

/// Sweep for a single upper level coupled to `N - 1` lower levels.
///
/// `config.custom_couplings` (1 x (N-1)) and `config.custom_noise` are used;
/// the scenario label is `one-to-n-<direction>`.
pub fn run_1_to_n(config: &SweepConfig, direction: Direction) -> Result<Vec<PointResult>> {
    let mut cfg = config.clone();
    cfg.scenario = Scenario::Custom;
    cfg.validate()?;
    let (g, w) = cfg.matrices()?;
    if g.nrows() != 1 {
        return Err(Error::shape("upper manifold size", 1, g.nrows()));
    }
    let ms = morris_shore_general(&complexify(&g));
    let norm = g.norm();
    if norm == 0.0 {
        return Err(Error::InvalidParameter(
            "couplings vanish; nothing to transfer".into(),
        ));
    }
    let n = g.ncols() + 1;
    let singlet = ms.embed_upper(0);
    let bright = CVector::from_fn(n, |i, _| {
        if i == 0 {
            Cplx::new(0.0, 0.0)
        } else {
            Cplx::new(g[(0, i - 1)] / norm, 0.0)
        }
    });
    let (label, states) = match direction {
        Direction::Downhill => ("one-to-n-downhill", (singlet, bright)),
        Direction::Uphill => ("one-to-n-uphill", (bright, singlet)),
    };
    Ok(sweep_points(label, (0.0, 0.0), &g, &w, &states, &cfg))
}

/// Twelve significant digits, the fixed format of every CSV float.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.11e}")
}

/// Efficiency table in the sweep CSV schema; failed points carry `NaN`.
pub fn write_csv<W: Write>(out: W, config: &SweepConfig, results: &[PointResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for r in results {
        let row = match r {
            Ok(e) => [
                e.scenario.clone(),
                fmt_float(e.delta1),
                fmt_float(e.delta2),
                fmt_float(e.gamma),
                fmt_float(e.temperature),
                fmt_float(e.kappa),
                fmt_float(e.tau0),
                fmt_float(e.efficiency),
            ],
            Err(f) => [
                f.scenario.clone(),
                fmt_float(config.delta1),
                fmt_float(config.delta2),
                fmt_float(f.gamma),
                fmt_float(config.temperature),
                fmt_float(config.kappa),
                fmt_float(config.tau0),
                "NaN".to_string(),
            ],
        };
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
