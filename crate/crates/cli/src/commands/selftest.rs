//! Invariant checks over the bundled configurations.

use std::fmt::Write as _;

use lzms_core::config::{sweep_config, Config};
use lzms_core::experiments::{run_1_to_n, run_sweep, transfer_states, Direction, PointResult};
use lzms_core::integrator::{evolve, evolve_unitary, EvolveOptions, OdeTolerances};
use lzms_core::model::{thermal_factor, DensityMatrix, ModelSpec, NoiseSpec};
use lzms_core::morris_shore::find_dfs;
use lzms_core::{CVec, Cplx, Error};

use super::{Failure, Outcome, Run};

const FIG3_TEXT: &str = include_str!("../../configs/fig3_text.conf");
const SIMULATE_DFS: &str = include_str!("../../configs/simulate_dfs.conf");
const DFS_HALF: &str = include_str!("../../configs/dfs_half.conf");
const ONE_TO_TWO: &str = include_str!("../../configs/one_to_two.conf");

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn bundled(text: &str) -> Result<Config, Failure> {
    Ok(text.parse::<Config>()?)
}

fn efficiencies(results: &[PointResult]) -> Result<Vec<f64>, Failure> {
    results
        .iter()
        .map(|r| {
            r.as_ref()
                .map(|e| e.efficiency)
                .map_err(|f| Failure::Numerical(f.error.clone()))
        })
        .collect()
}

fn thermal_identity() -> Result<Check, Failure> {
    let mut worst = 0.0f64;
    for i in 1..=10 {
        for j in 1..=10 {
            let omega = 0.05 * f64::from(i * i);
            let temp = 1e-3 * 10f64.powf(f64::from(j) * 0.4);
            let up = thermal_factor(omega, temp)?;
            let down = thermal_factor(-omega, temp)?;
            worst = worst.max((up - down - 1.0).abs());
        }
    }
    let frozen = thermal_factor(-1.0, 0.0)?;
    Ok(check(
        "thermal identity",
        worst <= 1e-12 && frozen == 0.0,
        format!("max |N(w)-N(-w)-1| = {worst:.2e}, uphill at T=0: {frozen}"),
    ))
}

fn uniform_noise_dfs() -> Result<Check, Failure> {
    let cfg = bundled(DFS_HALF)?;
    let w = cfg
        .get_matrix("noise")?
        .ok_or_else(|| Error::config("noise", "missing"))?;
    let split = find_dfs(&NoiseSpec::new(w, 1.0, 0.0)?, 2, 4)?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [[h, -h, 0.0, 0.0], [0.0, 0.0, h, -h]];
    let overlap = |v: &CVec, e: &[f64; 4]| -> f64 {
        v.iter()
            .zip(e)
            .map(|(z, &x)| *z * Cplx::new(x, 0.0))
            .sum::<Cplx<f64>>()
            .norm()
    };
    let found: Vec<&CVec> = split.dfs().collect();
    let pass = found.len() == 2
        && expected
            .iter()
            .zip(&found)
            .all(|(e, v)| (overlap(v, e) - 1.0).abs() < 1e-10);
    Ok(check(
        "uniform-noise DFS",
        pass,
        format!("dimension {}", found.len()),
    ))
}

fn flat_dfs_sweep() -> Result<Check, Failure> {
    let mut cfg = bundled(FIG3_TEXT)?;
    cfg.set("gamma_points", 5);
    let eff = efficiencies(&run_sweep(&sweep_config(&cfg)?)?)?;
    let lo = eff.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(check(
        "DFS transfer is rate independent",
        lo >= 0.99 && hi - lo <= 1e-3,
        format!("min {lo:.9}, spread {:.2e}", hi - lo),
    ))
}

fn dfs_trajectory() -> Result<Check, Failure> {
    let cfg = bundled(SIMULATE_DFS)?;
    let sweep = sweep_config(&cfg)?;
    let (g, w) = sweep.matrices()?;
    let (initial, target) = transfer_states(&g)?;
    let model = ModelSpec::from_real_sweep(&g, sweep.kappa, sweep.tau0)?;
    let noise = NoiseSpec::new(w, cfg.require("gamma")?, sweep.temperature)?;
    let options = EvolveOptions {
        samples: cfg.get_or("samples", 501)?,
        ..EvolveOptions::default()
    };
    let traj = evolve(
        &DensityMatrix::from_pure(&initial)?,
        &model,
        &noise,
        &options,
    )?;
    let eff = traj.final_state().population(&target);
    let drift = traj.max_trace_drift();
    let low = traj.min_eigenvalue();
    Ok(check(
        "DFS trajectory stays valid",
        eff >= 0.99 && drift <= 1e-7 && low >= -1e-7,
        format!("final target {eff:.9}, trace drift {drift:.1e}, min eigenvalue {low:.1e}"),
    ))
}

fn unitary_limit() -> Result<Check, Failure> {
    let cfg = bundled(SIMULATE_DFS)?;
    let sweep = sweep_config(&cfg)?;
    let (g, _) = sweep.matrices()?;
    let (initial, _) = transfer_states(&g)?;
    let model = ModelSpec::from_real_sweep(&g, sweep.kappa, sweep.tau0)?;
    let tight = OdeTolerances::reference();
    let options = EvolveOptions {
        tolerances: tight,
        ..EvolveOptions::endpoints()
    };
    let rho = evolve(
        &DensityMatrix::from_pure(&initial)?,
        &model,
        &NoiseSpec::silent(2, 2),
        &options,
    )?;
    let psi = evolve_unitary(&initial, &model, &tight)?;
    let dist = rho
        .final_state()
        .trace_distance(&DensityMatrix::from_pure(&psi)?);
    Ok(check(
        "noiseless run is unitary",
        dist <= 1e-6,
        format!("trace distance {dist:.2e}"),
    ))
}

fn downhill_preference() -> Result<Check, Failure> {
    let cfg = bundled(ONE_TO_TWO)?;
    let sweep = sweep_config(&cfg)?;
    let down = efficiencies(&run_1_to_n(&sweep, Direction::Downhill)?)?;
    let up = efficiencies(&run_1_to_n(&sweep, Direction::Uphill)?)?;
    let pass = (down[0] - up[0]).abs() <= 1e-6 && down[1] >= up[1];
    Ok(check(
        "noise favours the downhill direction",
        pass,
        format!(
            "gamma 0: {:.9} vs {:.9}; gamma 1: {:.9} vs {:.9}",
            down[0], up[0], down[1], up[1]
        ),
    ))
}

pub fn selftest(run: &mut Run) -> Outcome {
    let checks = [
        thermal_identity()?,
        uniform_noise_dfs()?,
        unitary_limit()?,
        dfs_trajectory()?,
        flat_dfs_sweep()?,
        downhill_preference()?,
    ];
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(
            text,
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    run.write("selftest.txt", text.as_bytes())?;
    print!("{text}");
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "{failed} of {} self-test checks failed",
            checks.len()
        )))
    }
}
