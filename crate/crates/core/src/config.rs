// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

//! Flat `key = value` run configuration.
//!
//! One entry per line; `#` starts a comment; keys are unique. Matrices are
//! written row-major with `;` between rows, e.g. `couplings = 0.5, -0.5; -0.5, 0.5`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::experiments::{log_grid, CouplingSet, Scenario, SweepConfig};
use crate::integrator::OdeTolerances;
use crate::scalar::RMatrix;
use crate::unravel::UnravelOptions;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config("", format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::config(key, format!("line {}: duplicate key", n + 1)));
            }
        }
        Ok(Self { entries })
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        text.parse()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn parse<T: FromStr>(&self, key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse()
            .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).map(|v| self.parse(key, v)).transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::config(key, "required key missing"))?;
        self.parse(key, v)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
            })
            .transpose()
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| v.split(',').map(|x| self.parse(key, x.trim())).collect())
            .transpose()
    }

    pub fn get_matrix(&self, key: &str) -> Result<Option<RMatrix<f64>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let rows: Vec<Vec<f64>> = v
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|x| self.parse(key, x.trim()))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::config(
                key,
                "matrix rows must be non-empty and equally long",
            ));
        }
        Ok(Some(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])))
    }

    /// Flag any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }

    /// The entries as `key = value` lines, sorted by key.
    pub fn echo(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// `rtol`, `atol` and `max_step` over `base`; each must be positive.
pub fn tolerances(cfg: &Config, base: OdeTolerances<f64>) -> Result<OdeTolerances<f64>> {
    let pick = |key: &str, default: f64| -> Result<f64> {
        let v = cfg.get_or(key, default)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::config(key, "must be positive"))
        }
    };
    Ok(OdeTolerances {
        rtol: pick("rtol", base.rtol)?,
        atol: pick("atol", base.atol)?,
        max_step: pick("max_step", base.max_step)?,
        ..base
    })
}

/// Keys read by [`sweep_config`].
pub const SWEEP_KEYS: &[&str] = &[
    "scenario",
    "delta1",
    "delta2",
    "gamma",
    "gamma_grid",
    "gamma_min",
    "gamma_max",
    "gamma_points",
    "temperature",
    "kappa",
    "tau0",
    "g",
    "text_couplings",
    "couplings",
    "noise",
    "rtol",
    "atol",
    "max_step",
];

/// Sweep settings. `scenario` is required; everything else has defaults.
///
/// The rate grid is `gamma_grid` (explicit list), a single `gamma`, or
/// `gamma_points` log-spaced values on `[gamma_min, gamma_max]`.
pub fn sweep_config(cfg: &Config) -> Result<SweepConfig> {
    let d = SweepConfig::default();
    let name: String = cfg.require("scenario")?;
    let mut scenario: Scenario = name
        .parse()
        .map_err(|e: Error| Error::config("scenario", e.to_string()))?;
    if cfg.get_bool("text_couplings")? == Some(true) {
        if let Scenario::PerturbedCouplings(_) = scenario {
            scenario = Scenario::PerturbedCouplings(CouplingSet::Text);
        }
    }
    let gamma_grid = if let Some(list) = cfg.get_list("gamma_grid")? {
        list
    } else if let Some(g) = cfg.get::<f64>("gamma")? {
        vec![g]
    } else {
        let lo = cfg.get_or("gamma_min", 1e-3)?;
        let hi = cfg.get_or("gamma_max", 10.0)?;
        let n = cfg.get_or("gamma_points", 25usize)?;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(
                "gamma_min",
                "log grid needs 0 < gamma_min <= gamma_max",
            ));
        }
        log_grid(lo, hi, n)
    };
    let tolerances = tolerances(cfg, d.tolerances)?;
    let config = SweepConfig {
        scenario,
        delta1: cfg.get_or("delta1", d.delta1)?,
        delta2: cfg.get_or("delta2", d.delta2)?,
        gamma_grid,
        temperature: cfg.get_or("temperature", d.temperature)?,
        kappa: cfg.get_or("kappa", d.kappa)?,
        tau0: cfg.get_or("tau0", d.tau0)?,
        g_magnitude: cfg.get_or("g", d.g_magnitude)?,
        tolerances,
        custom_couplings: cfg.get_matrix("couplings")?,
        custom_noise: cfg.get_matrix("noise")?,
    };
    config.validate().map_err(|e| {
        let key = match &e {
            Error::InvalidParameter(m) if m.contains("gamma") => "gamma_grid",
            Error::InvalidParameter(m) if m.contains("tau0") => "tau0",
            Error::InvalidParameter(m) if m.contains("kappa") => "kappa",
            Error::InvalidParameter(m) if m.contains("temperature") => "temperature",
            _ => "couplings",
        };
        Error::config(key, e.to_string())
    })?;
    Ok(config)
}

/// Keys read by [`unravel_options`].
pub const UNRAVEL_KEYS: &[&str] = &[
    "starts",
    "seed",
    "refine_starts",
    "rtol",
    "atol",
    "max_step",
    "coarse_factor",
    "coarse_max_step",
    "max_iterations",
    "polish_iterations",
    "bound",
    "identifiability_floor",
    "noise_free_tol",
];

pub fn unravel_options(cfg: &Config) -> Result<UnravelOptions> {
    let d = UnravelOptions::default();
    let tolerances = tolerances(cfg, d.tolerances)?;
    let options = UnravelOptions {
        starts: cfg.get_or("starts", d.starts)?,
        seed: cfg.get_or("seed", d.seed)?,
        refine_starts: cfg.get_or("refine_starts", d.refine_starts)?,
        tolerances,
        coarse_factor: cfg.get_or("coarse_factor", d.coarse_factor)?,
        coarse_max_step: cfg.get_or("coarse_max_step", d.coarse_max_step)?,
        max_iterations: cfg.get_or("max_iterations", d.max_iterations)?,
        polish_iterations: cfg.get_or("polish_iterations", d.polish_iterations)?,
        bound: cfg.get_or("bound", d.bound)?,
        identifiability_floor: cfg.get("identifiability_floor")?,
        noise_free_tol: cfg.get_or("noise_free_tol", d.noise_free_tol)?,
    };
    if !(options.bound > 0.0) {
        return Err(Error::config("bound", "must be positive"));
    }
    if options.starts == 0 {
        return Err(Error::config("starts", "at least one start is required"));
    }
    Ok(options)
}
