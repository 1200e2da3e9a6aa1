//! Hyperbolic times along orbits, expansion diagnostics and Lyapunov estimates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cones::{estimate_splitting, DEFAULT_SPLITTING_ITERS};
use crate::error::{GmyError, Result};
use crate::systems::{Point, System, Vec2};

/// Slack used when comparing accumulated log-sums.
pub const SUM_SLACK: f64 = 1e-12;

/// `values[j-1] = log |Df^{-1}|E^cu_{f^j(x)}|` for `j = 1..=n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionLog {
    pub base_point: Point,
    pub values: Vec<f64>,
}

impl ContractionLog {
    pub fn from_values(values: Vec<f64>) -> Self {
        ContractionLog {
            base_point: Point::new(0.0, 0.0),
            values,
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }
}

/// Streams the centre-unstable stretch along the orbit of `x`.
///
/// Calls `visit(j, p_j, stretch)` for `j = 0..n` with `stretch = |Df(p_j) e_cu(p_j)|`.
pub fn walk_cu_stretch<F>(system: &System, x: Point, n: usize, n_iters: usize, mut visit: F) -> Result<()>
where
    F: FnMut(usize, Point, f64),
{
    let frame = estimate_splitting(system, x, n_iters, f64::INFINITY)?;
    let mut v: Vec2 = frame.e_cu;
    let mut p = x;
    for j in 0..n {
        let w = system.derivative(p) * v;
        let s = w.norm();
        if !(s > 0.0 && s.is_finite()) {
            return Err(GmyError::FrameDivergence { index: j });
        }
        visit(j, p, s);
        v = w / s;
        p = system.apply(p);
    }
    Ok(())
}

pub fn contraction_log(system: &System, x: Point, n: usize) -> Result<ContractionLog> {
    let mut values = Vec::with_capacity(n);
    walk_cu_stretch(system, x, n, DEFAULT_SPLITTING_ITERS, |_, _, s| values.push(-s.ln()))?;
    Ok(ContractionLog { base_point: x, values })
}

/// `(1/n) log |Df^n(x) e_cu(x)|`.
pub fn lyapunov_cu(system: &System, x: Point, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(GmyError::InvalidParameter("lyapunov horizon must be positive".into()));
    }
    let mut sum = 0.0;
    walk_cu_stretch(system, x, n, DEFAULT_SPLITTING_ITERS, |_, _, s| sum += s.ln())?;
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicTimeReport {
    pub sigma: f64,
    pub times: Vec<usize>,
    pub frequency: f64,
    pub theta_bound: f64,
    pub horizon: usize,
    pub slack: f64,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(GmyError::InvalidParameter(format!("sigma must lie in (0,1), got {sigma}")));
    }
    Ok(())
}

/// Times `n` such that every backward partial sum ending at `n` is at most `k log sigma`.
///
/// With `w_j = values_j - log sigma` and prefix sums `P`, `n` qualifies iff
/// `P_n <= min_{i<n} P_i`, so a single pass with a running minimum suffices.
pub fn hyperbolic_time_set(values: &[f64], sigma: f64) -> Result<Vec<usize>> {
    check_sigma(sigma)?;
    let c1 = sigma.ln();
    let mut times = Vec::new();
    let mut prefix = 0.0;
    let mut running_min = 0.0f64;
    for (j, v) in values.iter().enumerate() {
        prefix += v - c1;
        if prefix - running_min <= SUM_SLACK {
            times.push(j + 1);
        }
        running_min = running_min.min(prefix);
    }
    Ok(times)
}

/// Definitional check, quadratic in the horizon.
pub fn hyperbolic_time_set_direct(values: &[f64], sigma: f64) -> Result<Vec<usize>> {
    check_sigma(sigma)?;
    let c1 = sigma.ln();
    let mut times = Vec::new();
    for n in 1..=values.len() {
        let mut sum = 0.0;
        let mut ok = true;
        for k in 1..=n {
            sum += values[n - k] - c1;
            if sum > SUM_SLACK {
                ok = false;
                break;
            }
        }
        if ok {
            times.push(n);
        }
    }
    Ok(times)
}

/// Pliss lower bound on the density of `sigma`-hyperbolic times.
///
/// With `c1 = log sigma`, `c2` the mean of the values and `m` their minimum,
/// returns `(c1 - c2)/(c1 - m)` when `m < c2 < c1`, else 0.
pub fn pliss_theta(values: &[f64], sigma: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let c1 = sigma.ln();
    let c2 = values.iter().sum::<f64>() / values.len() as f64;
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if c2 < c1 && m < c2 {
        (c1 - c2) / (c1 - m)
    } else {
        0.0
    }
}

pub fn hyperbolic_times(log: &ContractionLog, sigma: f64) -> Result<HyperbolicTimeReport> {
    let times = hyperbolic_time_set(&log.values, sigma)?;
    let n = log.values.len();
    let frequency = if n == 0 { 0.0 } else { times.len() as f64 / n as f64 };
    Ok(HyperbolicTimeReport {
        sigma,
        frequency,
        theta_bound: pliss_theta(&log.values, sigma),
        horizon: n,
        times,
        slack: SUM_SLACK,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NueMode {
    Nue1,
    Nue2Only,
    PositiveExponentOnly,
    None,
}

impl NueMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NueMode::Nue1 => "NUE1",
            NueMode::Nue2Only => "NUE2_only",
            NueMode::PositiveExponentOnly => "positive_exponent_only",
            NueMode::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NueClassification {
    pub mode: NueMode,
    pub epsilon: f64,
    pub horizon: usize,
    pub tail_max: f64,
    pub tail_min: f64,
    pub running_averages: Vec<f64>,
}

pub const MIN_NUE_HORIZON: usize = 100;

/// Finite-horizon surrogate for the limsup/liminf conditions: statistics of
/// the running averages over the last half of the horizon.
pub fn classify_nue(log: &ContractionLog, epsilon: f64) -> Result<NueClassification> {
    let n = log.values.len();
    if n < MIN_NUE_HORIZON {
        return Err(GmyError::InvalidParameter(format!(
            "classification needs horizon >= {MIN_NUE_HORIZON}, got {n}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(GmyError::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut running = Vec::with_capacity(n);
    let mut sum = 0.0;
    for (j, v) in log.values.iter().enumerate() {
        sum += v;
        running.push(sum / (j + 1) as f64);
    }
    let tail = &running[n / 2..];
    let tail_max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail_min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let mode = if tail_max < -epsilon {
        NueMode::Nue1
    } else if tail_min < -epsilon {
        NueMode::Nue2Only
    } else if running[n - 1] < 0.0 {
        NueMode::PositiveExponentOnly
    } else {
        NueMode::None
    };
    Ok(NueClassification {
        mode,
        epsilon,
        horizon: n,
        tail_max,
        tail_min,
        running_averages: running,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyptimeRow {
    pub x: f64,
    pub y: f64,
    pub horizon: usize,
    pub frequency: f64,
    pub theta_bound: f64,
    pub classification: String,
    pub lyapunov: f64,
}

/// Full per-orbit diagnostic row.
pub fn orbit_row(system: &System, x: Point, horizon: usize, sigma: f64, epsilon: f64) -> Result<HyptimeRow> {
    let log = contraction_log(system, x, horizon)?;
    let rep = hyperbolic_times(&log, sigma)?;
    let class = classify_nue(&log, epsilon)?;
    let lyapunov = -log.values.iter().sum::<f64>() / horizon as f64;
    Ok(HyptimeRow {
        x: x.x,
        y: x.y,
        horizon,
        frequency: rep.frequency,
        theta_bound: rep.theta_bound,
        classification: class.mode.as_str().to_string(),
        lyapunov,
    })
}

pub fn write_hyptimes_csv(path: &Path, rows: &[HyptimeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
