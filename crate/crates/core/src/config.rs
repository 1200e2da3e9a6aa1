//! Run configuration: TOML file, command-line overrides, resolved defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GmyError, Result};
use crate::systems::System;

/// Configuration as written by the user; every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub constants: ConstantsSection,
    pub grids: GridsSection,
    pub horizons: HorizonsSection,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub name: Option<String>,
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    pub sigma: Option<f64>,
    pub a: Option<f64>,
    pub delta1: Option<f64>,
    pub delta0: Option<f64>,
    pub delta_s: Option<f64>,
    pub n0: Option<usize>,
    pub n_max: Option<usize>,
    pub n0_cap: Option<usize>,
    pub epsilon: Option<f64>,
    pub cesaro_tol: Option<f64>,
    pub tv_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridsSection {
    pub partition: Option<usize>,
    pub density: Option<usize>,
    pub histogram: Option<usize>,
    pub k0: Option<usize>,
    pub search: Option<usize>,
    pub census: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonsSection {
    pub hyptimes: Option<usize>,
    pub hyptimes_starts: Option<usize>,
    pub certify_samples: Option<usize>,
    pub cesaro_iterations: Option<usize>,
    pub birkhoff_steps: Option<usize>,
    pub birkhoff_starts: Option<usize>,
    pub hsr_steps: Option<usize>,
    pub hsr_orbits: Option<usize>,
    pub census_horizon: Option<usize>,
    pub census_burn_in: Option<usize>,
    pub census_starts: Option<usize>,
    pub expanding_n_max: Option<usize>,
}

/// Every constant of a run, with defaults filled in. Echoed in each report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub sigma: f64,
    pub a: f64,
    pub delta1: f64,
    pub delta0: Option<f64>,
    pub delta_s: f64,
    pub n0: usize,
    pub n_max: usize,
    pub n0_cap: usize,
    pub epsilon: f64,
    pub cesaro_tol: f64,
    pub tv_threshold: f64,
    pub partition_grid: usize,
    pub density_grid: usize,
    pub histogram_grid: usize,
    pub k0_grid: usize,
    pub search_grid: usize,
    pub census_grid: usize,
    pub hyptimes_horizon: usize,
    pub hyptimes_starts: usize,
    pub certify_samples: usize,
    pub cesaro_iterations: usize,
    pub birkhoff_steps: usize,
    pub birkhoff_starts: usize,
    pub hsr_steps: usize,
    pub hsr_orbits: usize,
    pub census_horizon: usize,
    pub census_burn_in: usize,
    pub census_starts: usize,
    pub expanding_n_max: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| GmyError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses `k=v` overrides into the system parameter table.
    pub fn set_params(&mut self, pairs: &[String]) -> Result<()> {
        for kv in pairs {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| GmyError::Config(format!("parameter `{kv}` is not of the form key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| GmyError::Config(format!("parameter `{kv}` has a non-numeric value")))?;
            self.system.params.insert(k.trim().to_string(), v);
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<(System, Resolved)> {
        let name = self.system.name.clone().unwrap_or_else(|| "cat".to_string());
        let system = System::from_name(&name, &self.system.params)?;
        let c = &self.constants;
        let g = &self.grids;
        let h = &self.horizons;
        let mp = name == "mp_skew";
        let sigma = c.sigma.unwrap_or(if mp { 0.8 } else { 0.4 });
        let delta1 = c.delta1.unwrap_or(if mp { 0.1 } else { 0.05 });
        let n0 = match c.n0 {
            Some(n) => n,
            None => default_n0(&system)?,
        };
        let r = Resolved {
            system: name,
            params: system.params(),
            sigma,
            a: c.a.unwrap_or(0.5),
            delta1,
            delta0: c.delta0,
            delta_s: c.delta_s.unwrap_or(delta1 / 4.0),
            n0,
            n_max: c.n_max.unwrap_or(40),
            n0_cap: c.n0_cap.unwrap_or(4),
            epsilon: c.epsilon.unwrap_or(0.2),
            cesaro_tol: c.cesaro_tol.unwrap_or(1e-8),
            tv_threshold: c.tv_threshold.unwrap_or(crate::census::DEFAULT_TV_THRESHOLD),
            partition_grid: g.partition.unwrap_or(1 << 12),
            density_grid: g.density.unwrap_or(1 << 12),
            histogram_grid: g.histogram.unwrap_or(128),
            k0_grid: g.k0.unwrap_or(100),
            search_grid: g.search.unwrap_or(8),
            census_grid: g.census.unwrap_or(64),
            hyptimes_horizon: h.hyptimes.unwrap_or(1000),
            hyptimes_starts: h.hyptimes_starts.unwrap_or(32),
            certify_samples: h.certify_samples.unwrap_or(1000),
            cesaro_iterations: h.cesaro_iterations.unwrap_or(500),
            birkhoff_steps: h.birkhoff_steps.unwrap_or(1_000_000),
            birkhoff_starts: h.birkhoff_starts.unwrap_or(100),
            hsr_steps: h.hsr_steps.unwrap_or(100_000),
            hsr_orbits: h.hsr_orbits.unwrap_or(10),
            census_horizon: h.census_horizon.unwrap_or(100_000),
            census_burn_in: h.census_burn_in.unwrap_or(1000),
            census_starts: h.census_starts.unwrap_or(50),
            expanding_n_max: h.expanding_n_max.unwrap_or(10),
            seed: self.seed.unwrap_or(0),
            output: self.output.clone().unwrap_or_else(|| PathBuf::from("out")),
        };
        r.validate()?;
        Ok((system, r))
    }
}

/// Smallest `n0` with `lambda_s^n0 <= 1/4`, from the sampled stable contraction.
pub fn default_n0(system: &System) -> Result<usize> {
    let cert = crate::cones::certify(system, 200, 0, crate::cones::DEFAULT_SPLITTING_ITERS, 1e-8);
    let ls = cert.lambda_s_hat;
    if !(ls > 0.0 && ls < 1.0) {
        return Err(GmyError::Config(format!("stable contraction estimate {ls} is not in (0, 1)")));
    }
    Ok(((0.25f64).ln() / ls.ln() - 1e-12).ceil().max(1.0) as usize)
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("sigma", self.sigma),
            ("a", self.a),
            ("delta1", self.delta1),
            ("delta_s", self.delta_s),
            ("epsilon", self.epsilon),
            ("cesaro_tol", self.cesaro_tol),
            ("tv_threshold", self.tv_threshold),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GmyError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.sigma >= 1.0 {
            return Err(GmyError::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.delta_s > crate::leaf::DEFAULT_MAX_DELTA_S {
            return Err(GmyError::Config(format!(
                "delta_s = {} exceeds the maximum {}",
                self.delta_s,
                crate::leaf::DEFAULT_MAX_DELTA_S
            )));
        }
        if let Some(d0) = self.delta0 {
            if !(d0 > 0.0) {
                return Err(GmyError::Config(format!("delta0 must be positive, got {d0}")));
            }
        }
        if self.n0 == 0 || self.n0 > self.n_max {
            return Err(GmyError::Config(format!("need 1 <= n0 <= n_max, got n0 = {}, n_max = {}", self.n0, self.n_max)));
        }
        let grids = [
            ("partition grid", self.partition_grid),
            ("density grid", self.density_grid),
            ("histogram grid", self.histogram_grid),
            ("k0 grid", self.k0_grid),
            ("search grid", self.search_grid),
            ("census grid", self.census_grid),
        ];
        for (k, v) in grids {
            if v == 0 {
                return Err(GmyError::Config(format!("{k} must be positive")));
            }
        }
        if self.census_burn_in >= self.census_horizon {
            return Err(GmyError::Config("census burn-in must be below the census horizon".into()));
        }
        if self.hyptimes_horizon < crate::hyptimes::MIN_NUE_HORIZON {
            return Err(GmyError::Config(format!(
                "hyperbolic-time horizon must be at least {}",
                crate::hyptimes::MIN_NUE_HORIZON
            )));
        }
        Ok(())
    }
}
