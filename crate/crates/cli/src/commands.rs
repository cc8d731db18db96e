use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lzms_core::config::{self, Config, SWEEP_KEYS, UNRAVEL_KEYS};
use lzms_core::dissipator::SpectrumMethod;
use lzms_core::experiments::{
    fmt_float, run_1_to_n, run_sweep, transfer_states, Direction, PointResult,
};
use lzms_core::integrator::{evolve, EvolveOptions};
use lzms_core::model::{DensityMatrix, ModelSpec, NoiseSpec};
use lzms_core::morris_shore::{find_dfs, synthesize_dfs_coupling};
use lzms_core::unravel::{
    dfs_constraint_check, read_measurements, report, unravel_noise, write_estimate_csv,
};
use lzms_core::{CVec, Error, RMat};

use crate::Common;

mod selftest;

pub use selftest::selftest;

/// Why a run stopped; selects the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad or missing input (exit 2).
    Config(String),
    /// The numerics failed or a check did not hold (exit 1).
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

/// State shared by a command and the manifest writer.
pub struct Run {
    pub common: Common,
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl Run {
    pub fn new(common: &Common) -> Self {
        Self {
            common: common.clone(),
            seed: common.seed.unwrap_or(0),
            outputs: Vec::new(),
        }
    }

    /// The config file with command-line overrides applied, echoed to
    /// `config_echo.txt`.
    fn config(&mut self, command: &str) -> Result<Config, Failure> {
        let path = self
            .common
            .config
            .as_ref()
            .ok_or_else(|| Error::config("--config", format!("required for `{command}`")))?;
        let mut cfg = Config::load(path)?;
        if self.common.text_couplings {
            cfg.set("text_couplings", "true");
        }
        if let Some(seed) = self.common.seed {
            cfg.set("seed", seed);
        }
        self.seed = cfg.get_or("seed", 0u64)?;
        let echo = format!("# lzms {}\n{}", lzms_core::VERSION, cfg.echo());
        self.write("config_echo.txt", echo.as_bytes())?;
        Ok(cfg)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.common.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Outcome {
        std::fs::write(self.path(name), bytes)?;
        Ok(())
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

fn with_keys(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(extra).copied().collect()
}

fn grid_keys() -> Vec<&'static str> {
    ["gamma_grid", "gamma_min", "gamma_max", "gamma_points"].to_vec()
}

fn spectrum(cfg: &Config) -> Result<SpectrumMethod, Failure> {
    match cfg.raw("spectrum").unwrap_or("morris-shore") {
        "morris-shore" => Ok(SpectrumMethod::MorrisShore),
        "eigensolver" => Ok(SpectrumMethod::Eigensolver),
        other => Err(Error::config(
            "spectrum",
            format!("expected `morris-shore` or `eigensolver`, got `{other}`"),
        )
        .into()),
    }
}

pub fn simulate(run: &mut Run) -> Outcome {
    let cfg = run.config("simulate")?;
    let known: Vec<_> = with_keys(SWEEP_KEYS, &["samples", "spectrum", "seed"])
        .into_iter()
        .filter(|k| !grid_keys().contains(k))
        .collect();
    cfg.reject_unknown(&known)?;
    let gamma: f64 = cfg.require("gamma")?;
    let sweep = config::sweep_config(&cfg)?;
    let samples: usize = cfg.get_or("samples", 501)?;
    if samples < 2 {
        return Err(Error::config("samples", "at least 2 output times are required").into());
    }
    let (g, w) = sweep.matrices()?;
    let (initial, target) = transfer_states(&g)?;
    let model = ModelSpec::from_real_sweep(&g, sweep.kappa, sweep.tau0)?;
    let noise = NoiseSpec::new(w, gamma, sweep.temperature)?;
    let options = EvolveOptions {
        tolerances: sweep.tolerances,
        samples,
        spectrum: spectrum(&cfg)?,
    };
    let traj = evolve(
        &DensityMatrix::from_pure(&initial)?,
        &model,
        &noise,
        &options,
    )?;

    let n = model.n_total();
    let mut out = csv::Writer::from_writer(run.create("trajectory.csv")?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("p{k}")));
    header.extend([
        "target".to_string(),
        "trace_drift".into(),
        "min_eigenvalue".into(),
    ]);
    out.write_record(&header).map_err(Error::from)?;
    for ((t, rho), d) in traj.times.iter().zip(&traj.states).zip(&traj.diagnostics) {
        let mut row = vec![fmt_float(*t)];
        row.extend(rho.populations().into_iter().map(fmt_float));
        row.push(fmt_float(rho.population(&target)));
        row.push(fmt_float(d.trace_drift));
        row.push(fmt_float(d.min_eigenvalue));
        out.write_record(&row).map_err(Error::from)?;
    }
    out.flush()?;
    Ok(())
}

fn failures(results: &[PointResult]) -> Outcome {
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.as_ref().err())
        .map(|f| format!("gamma {}: {}", f.gamma, f.error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "{} of {} sweep points failed ({})",
            failed.len(),
            results.len(),
            failed.join("; ")
        )))
    }
}

pub fn sweep(run: &mut Run) -> Outcome {
    let cfg = run.config("sweep")?;
    cfg.reject_unknown(&with_keys(SWEEP_KEYS, &["direction", "seed"]))?;
    let sweep = config::sweep_config(&cfg)?;
    let results = match cfg.raw("direction") {
        Some(d) => {
            let direction: Direction = d
                .parse()
                .map_err(|e: Error| Error::config("direction", e.to_string()))?;
            run_1_to_n(&sweep, direction)?
        }
        None => run_sweep(&sweep)?,
    };
    lzms_core::experiments::write_csv(run.create("efficiency.csv")?, &sweep, &results)?;
    failures(&results)
}

/// Phase fixed so the first non-negligible component is real and positive.
fn canonical_phase(v: &CVec) -> CVec {
    let top = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    match v.iter().find(|z| z.norm() > 1e-9 * top) {
        Some(z) => v * (z.conj() / z.norm()),
        None => v.clone(),
    }
}

fn fmt_vector(v: &CVec) -> String {
    let v = canonical_phase(v);
    let cells: Vec<String> = v
        .iter()
        .map(|z| {
            let re = if z.re.abs() < 1e-12 { 0.0 } else { z.re };
            if z.im.abs() < 1e-12 {
                format!("{re:+.6}")
            } else {
                format!("{re:+.6}{:+.6}i", z.im)
            }
        })
        .collect();
    format!("({})", cells.join(", "))
}

fn fmt_matrix(m: &RMat) -> String {
    m.row_iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:+.6}")).collect();
            format!("  [{}]\n", cells.join(", "))
        })
        .collect()
}

pub fn dfs(run: &mut Run) -> Outcome {
    let cfg = run.config("dfs")?;
    cfg.reject_unknown(&["noise", "g", "seed"])?;
    let w = cfg
        .get_matrix("noise")?
        .ok_or_else(|| Error::config("noise", "required key missing"))?;
    let g: f64 = cfg.get_or("g", 1.0)?;
    let (m, l) = w.shape();
    let noise =
        NoiseSpec::new(w.clone(), 1.0, 0.0).map_err(|e| Error::config("noise", e.to_string()))?;
    let split = find_dfs(&noise, m, m + l)?;

    let mut text = String::new();
    let _ = writeln!(text, "noise matrix W ({m} upper x {l} lower levels):");
    text.push_str(&fmt_matrix(&w));
    let _ = writeln!(
        text,
        "decoherence-free subspace: dimension {}",
        split.dimension()
    );
    for v in &split.dfs_upper {
        let _ = writeln!(text, "  upper {}", fmt_vector(v));
    }
    for v in &split.dfs_lower {
        let _ = writeln!(text, "  lower {}", fmt_vector(v));
    }
    let _ = writeln!(text, "noise-coupled states:");
    for v in &split.noisy {
        let _ = writeln!(text, "  {}", fmt_vector(v));
    }
    match synthesize_dfs_coupling(&noise, m, m + l, g) {
        Ok(gc) => {
            let _ = writeln!(text, "coherent coupling confined to the DFS (g = {g}):");
            text.push_str(&fmt_matrix(&gc.map(|z| z.re)));
        }
        Err(Error::NoNoiseFreeTransfer(why)) => {
            let _ = writeln!(text, "no noise-free transfer: {why}");
        }
        Err(e) => return Err(e.into()),
    }
    run.write("dfs_report.txt", text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn resolve(config_path: Option<&Path>, data: &str) -> PathBuf {
    let p = PathBuf::from(data);
    match config_path.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

pub fn unravel(run: &mut Run, data: Option<&Path>) -> Outcome {
    let cfg = run.config("unravel")?;
    cfg.reject_unknown(&with_keys(
        UNRAVEL_KEYS,
        &["data", "g", "initial_guess", "dfs_tol"],
    ))?;
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => resolve(
            run.common.config.as_deref(),
            cfg.raw("data")
                .ok_or_else(|| Error::config("data", "required key missing (or pass --data)"))?,
        ),
    };
    let g: f64 = cfg.get_or("g", 1.0)?;
    let file =
        File::open(&path).map_err(|e| Error::config("data", format!("{}: {e}", path.display())))?;
    let measurements = read_measurements(file, g)?;
    let options = config::unravel_options(&cfg)?;
    let guess = cfg.get_matrix("initial_guess")?;
    let dfs_tol: f64 = cfg.get_or("dfs_tol", 1e-3)?;
    let result = unravel_noise(&measurements, guess.as_ref(), &options)?;

    let mut text = report(&result);
    let _ = writeln!(text, "measurements: {}", measurements.len());
    let schemes: Vec<RMat> = result
        .noise_free
        .iter()
        .map(|&k| measurements[k].couplings.clone())
        .collect();
    let checks = dfs_constraint_check(&result.estimated_w, &schemes, dfs_tol)?;
    let _ = writeln!(
        text,
        "DFS constraint check on noise-free schemes (tolerance {dfs_tol:e}):"
    );
    if checks.is_empty() {
        let _ = writeln!(text, "  no noise-free schemes observed");
    }
    for (c, &k) in checks.iter().zip(&result.noise_free) {
        let verdict = if c.pass { "pass" } else { "FAIL" };
        let _ = writeln!(
            text,
            "  measurement {}: defect {:.3e} {verdict}",
            k + 1,
            c.defect
        );
    }
    run.write("unravel_report.txt", text.as_bytes())?;
    write_estimate_csv(run.create("w_estimate.csv")?, &result)?;
    print!("{text}");
    Ok(())
}
