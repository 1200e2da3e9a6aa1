//! Induced map on `Delta_0`, its invariant measure, the lifted measure and
//! return-time diagnostics.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmyError, Result};
use crate::hyptimes::{contraction_log, hyperbolic_time_set};
use crate::leaf::{stable_leaf, CuDisk, LeafShape, LocalChart};
use crate::partition::{element_chart, return_coords, PartitionState};
use crate::rng;
use crate::systems::{Point, System, Vec2};

/// Slack on the cylinder bounds when projecting a returned point.
const PROJECTION_SLACK: f64 = 1e-6;

pub struct InducedMap<'a> {
    pub system: &'a System,
    pub state: &'a PartitionState,
    charts: Vec<LocalChart>,
    /// Element indices sorted by left endpoint.
    order: Vec<usize>,
}

impl<'a> InducedMap<'a> {
    pub fn new(system: &'a System, state: &'a PartitionState) -> Self {
        let charts = state
            .elements
            .par_iter()
            .map(|e| element_chart(system, &state.reference, e))
            .collect();
        let mut order: Vec<usize> = (0..state.elements.len()).collect();
        order.sort_by(|&a, &b| state.elements[a].lo.total_cmp(&state.elements[b].lo));
        InducedMap {
            system,
            state,
            charts,
            order,
        }
    }

    pub fn element_at(&self, t: f64) -> Option<usize> {
        let els = &self.state.elements;
        let k = self.order.partition_point(|&i| els[i].lo <= t);
        if k == 0 {
            return None;
        }
        let i = self.order[k - 1];
        (t <= els[i].hi).then_some(i)
    }

    /// Leaf parameter of `pi(f^R(x))` for `x` at parameter `t` in element `k`.
    pub fn image_param(&self, k: usize, t: f64) -> Result<f64> {
        let r = &self.state.reference;
        let e = &self.state.elements[k];
        let (tau, s) = return_coords(self.system, r, &self.charts[k], e.return_time, t);
        let slack = PROJECTION_SLACK * r.delta0;
        if s.abs() > r.delta_s * (1.0 + PROJECTION_SLACK) || tau.abs() > r.delta0 + slack {
            return Err(GmyError::ProjectionFailed);
        }
        Ok(r.param_of_tau(tau.clamp(-r.delta0, r.delta0)))
    }

    pub fn step(&self, t: f64) -> Result<(f64, usize)> {
        let k = self.element_at(t).ok_or(GmyError::ResidualPoint(t))?;
        Ok((self.image_param(k, t)?, self.state.elements[k].return_time))
    }
}

/// A sub-interval of one element, the unit of the transfer operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub element: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nu {
    pub pieces: Vec<Piece>,
    /// Probability mass per piece.
    pub masses: Vec<f64>,
    pub element_weights: Vec<f64>,
    pub iterations: usize,
    pub gap: f64,
    pub gaps: Vec<f64>,
    pub converged: bool,
    /// Mass leaving `U omega` per step at the returned measure.
    pub escape: f64,
    pub grid: usize,
}

struct Transfer {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Transfer {
    /// Push forward and return the retained mass fraction, before normalisation.
    fn apply(&self, v: &[f64], out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            if v[i] == 0.0 {
                continue;
            }
            for &(j, w) in row {
                out[j] += v[i] * w;
            }
        }
        out.iter().sum()
    }

    fn push_normalized(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let mut out = vec![0.0; v.len()];
        let kept = self.apply(v, &mut out);
        if kept > 0.0 {
            out.iter_mut().for_each(|x| *x /= kept);
        }
        (out, kept)
    }
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Pieces of all elements cut along a uniform grid of `grid` cells on `Delta_0`.
pub fn element_pieces(state: &PartitionState, grid: usize) -> Vec<Piece> {
    let (d_lo, d_hi) = state.reference.delta0_range();
    let cell = (d_hi - d_lo) / grid as f64;
    let mut out = Vec::new();
    for (k, e) in state.elements.iter().enumerate() {
        let first = (((e.lo - d_lo) / cell).floor().max(0.0) as usize).min(grid - 1);
        let last = (((e.hi - d_lo) / cell).ceil().max(1.0) as usize).min(grid);
        for c in first..last {
            let a = (d_lo + c as f64 * cell).max(e.lo);
            let b = (d_lo + (c + 1) as f64 * cell).min(e.hi);
            if b > a {
                out.push(Piece { element: k, lo: a, hi: b });
            }
        }
    }
    out.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    out
}

fn build_transfer(im: &InducedMap, pieces: &[Piece]) -> Result<Transfer> {
    let starts: Vec<f64> = pieces.iter().map(|p| p.lo).collect();
    let rows = pieces
        .par_iter()
        .map(|p| {
            let ua = im.image_param(p.element, p.lo)?;
            let ub = im.image_param(p.element, p.hi)?;
            let (u1, u2) = if ua <= ub { (ua, ub) } else { (ub, ua) };
            let len = u2 - u1;
            let mut row = Vec::new();
            if len <= 0.0 {
                if let Some(j) = piece_containing(pieces, &starts, u1) {
                    row.push((j, 1.0));
                }
                return Ok(row);
            }
            let mut j = starts.partition_point(|s| *s <= u1).saturating_sub(1);
            while j < pieces.len() && pieces[j].lo < u2 {
                let ov = pieces[j].hi.min(u2) - pieces[j].lo.max(u1);
                if ov > 0.0 {
                    row.push((j, ov / len));
                }
                j += 1;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Transfer { rows })
}

fn piece_containing(pieces: &[Piece], starts: &[f64], t: f64) -> Option<usize> {
    let j = starts.partition_point(|s| *s <= t).checked_sub(1)?;
    (t <= pieces[j].hi).then_some(j)
}

/// Quasi-stationary measure of the induced map on `U omega`.
///
/// Starts from normalised arc length, pushes forward piecewise (Ulam), drops
/// the mass landing in the residual set and renormalises. Returns the Cesaro
/// average over the trailing half of the iterates once pushing it forward
/// moves it by less than `tol` in total variation.
pub fn invariant_density(im: &InducedMap, grid: usize, iterations: usize, tol: f64) -> Result<Nu> {
    let state = im.state;
    if state.elements.is_empty() {
        return Err(GmyError::InvalidParameter("partition has no elements".into()));
    }
    let pieces = element_pieces(state, grid);
    let transfer = build_transfer(im, &pieces)?;
    let total: f64 = pieces.iter().map(|p| p.hi - p.lo).sum();
    let mut v: Vec<f64> = pieces.iter().map(|p| (p.hi - p.lo) / total).collect();
    let mut history = vec![v.clone()];
    let mut gaps = Vec::new();
    let mut avg = v.clone();
    let mut gap = f64::INFINITY;
    let mut escape = 0.0;
    let mut iters = 0;
    for k in 1..=iterations.max(1) {
        let (next, _) = transfer.push_normalized(&v);
        v = next;
        history.push(v.clone());
        let from = k / 2;
        let count = (k - from + 1) as f64;
        avg = vec![0.0; v.len()];
        for h in &history[from..=k] {
            for (a, x) in avg.iter_mut().zip(h) {
                *a += x / count;
            }
        }
        let (pushed, kept) = transfer.push_normalized(&avg);
        gap = tv(&pushed, &avg);
        escape = 1.0 - kept;
        gaps.push(gap);
        iters = k;
        if gap < tol {
            break;
        }
    }
    let mut element_weights = vec![0.0; state.elements.len()];
    for (p, m) in pieces.iter().zip(&avg) {
        element_weights[p.element] += m;
    }
    Ok(Nu {
        pieces,
        masses: avg,
        element_weights,
        iterations: iters,
        converged: gap < tol,
        gap,
        gaps,
        escape,
        grid,
    })
}

/// Total-variation change of `nu` under one more normalised push-forward.
pub fn stationarity_gap(im: &InducedMap, nu: &Nu) -> Result<f64> {
    let transfer = build_transfer(im, &nu.pieces)?;
    let (pushed, _) = transfer.push_normalized(&nu.masses);
    Ok(tv(&pushed, &nu.masses))
}

impl Nu {
    /// Density per unit leaf length on a uniform grid over `Delta_0`.
    pub fn density_grid(&self, state: &PartitionState, cells: usize) -> Vec<f64> {
        let (d_lo, d_hi) = state.reference.delta0_range();
        let h = (d_hi - d_lo) / cells as f64;
        let mut out = vec![0.0; cells];
        for (p, m) in self.pieces.iter().zip(&self.masses) {
            let dens = m / (p.hi - p.lo);
            let a = (((p.lo - d_lo) / h).floor().max(0.0) as usize).min(cells - 1);
            let b = (((p.hi - d_lo) / h).ceil() as usize).min(cells);
            for (c, slot) in out.iter_mut().enumerate().take(b).skip(a) {
                let ov = (d_lo + (c + 1) as f64 * h).min(p.hi) - (d_lo + c as f64 * h).max(p.lo);
                if ov > 0.0 {
                    *slot += dens * ov / h;
                }
            }
        }
        out
    }
}

/// `sum_j nu(R > j)` from element weights and return times.
pub fn tail_sum_mass(weights: &[f64], r: &[usize]) -> f64 {
    let rmax = r.iter().copied().max().unwrap_or(0);
    (0..rmax)
        .map(|j| weights.iter().zip(r).filter(|(_, rk)| **rk > j).map(|(w, _)| *w).sum::<f64>())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerMeasure {
    /// Weighted cloud of `mu_hat`.
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub mass: f64,
    /// `sum_j nu(R > j)`, computed independently of the cloud.
    pub tail_mass: f64,
}

impl TowerMeasure {
    pub fn mass_gap(&self) -> f64 {
        (self.mass - self.tail_mass).abs()
    }

    /// `int phi d mu` with `mu = mu_hat / mass`.
    pub fn integral(&self, phi: impl Fn(Point) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * phi(*p)).sum::<f64>() / self.mass
    }

    /// `|int phi o f d mu - int phi d mu|`.
    pub fn invariance_gap(&self, system: &System, phi: impl Fn(Point) -> f64) -> f64 {
        let a = self.integral(|p| phi(system.apply(p)));
        let b = self.integral(&phi);
        (a - b).abs()
    }

    /// `mu` histogram on a `g x g` chart grid, row `i` for `y`.
    pub fn histogram(&self, g: usize) -> Vec<Vec<f64>> {
        let mut h = vec![vec![0.0; g]; g];
        for (p, w) in self.points.iter().zip(&self.weights) {
            let i = ((p.y * g as f64) as usize).min(g - 1);
            let j = ((p.x * g as f64) as usize).min(g - 1);
            h[i][j] += w / self.mass;
        }
        h
    }

    pub fn write_histogram_csv(&self, path: &Path, g: usize) -> Result<()> {
        let h = self.histogram(g);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "x", "y", "mass"])?;
        for (i, row) in h.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    format!("{:.6}", (j as f64 + 0.5) / g as f64),
                    format!("{:.6}", (i as f64 + 0.5) / g as f64),
                    format!("{m:.12e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `mu_hat = sum_j f^j_*(nu|{R > j})` as a cloud: piece midpoints pushed `0..R` steps.
pub fn lift_measure(im: &InducedMap, nu: &Nu) -> TowerMeasure {
    let state = im.state;
    let per_piece: Vec<(Vec<Point>, f64, usize)> = nu
        .pieces
        .par_iter()
        .zip(nu.masses.par_iter())
        .map(|(p, m)| {
            let e = &state.elements[p.element];
            let chart = &im.charts[p.element];
            let t = 0.5 * (p.lo + p.hi);
            let mut pts = Vec::with_capacity(e.return_time);
            let mut d = chart.seed.dir * (t - chart.t0);
            for j in 0..e.return_time {
                pts.push(chart.orbit[j].translate(d));
                d = im.system.apply_offset(chart.orbit[j].to_vec(), d);
            }
            (pts, *m, e.return_time)
        })
        .collect();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut mass = 0.0;
    for (pts, m, r) in per_piece {
        mass += m * r as f64;
        for q in pts {
            points.push(q);
            weights.push(m);
        }
    }
    let r: Vec<usize> = state.elements.iter().map(|e| e.return_time).collect();
    TowerMeasure {
        points,
        weights,
        mass,
        tail_mass: tail_sum_mass(&nu.element_weights, &r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    /// `(j, nu(R > j))` for `j = 0..=max R`.
    pub tail: Vec<(usize, f64)>,
    pub leb_mean: f64,
    pub tail_non_increasing: bool,
}

pub fn return_time_stats_from(weights: &[f64], r: &[usize], leb: &[f64]) -> ReturnStats {
    let rmax = r.iter().copied().max().unwrap_or(0);
    let tail: Vec<(usize, f64)> = (0..=rmax)
        .map(|j| (j, weights.iter().zip(r).filter(|(_, rk)| **rk > j).map(|(w, _)| *w).sum()))
        .collect();
    let mean = weights.iter().zip(r).map(|(w, rk)| w * *rk as f64).sum();
    let lt: f64 = leb.iter().sum();
    let leb_mean = if lt > 0.0 {
        leb.iter().zip(r).map(|(l, rk)| l * *rk as f64).sum::<f64>() / lt
    } else {
        f64::NAN
    };
    let tail_non_increasing = tail.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15);
    ReturnStats {
        mean,
        tail,
        leb_mean,
        tail_non_increasing,
    }
}

pub fn return_time_stats(nu: &Nu, state: &PartitionState) -> ReturnStats {
    let r: Vec<usize> = state.elements.iter().map(|e| e.return_time).collect();
    let leb: Vec<f64> = state.elements.iter().map(|e| e.leb).collect();
    return_time_stats_from(&nu.element_weights, &r, &leb)
}

pub fn write_tails_csv(path: &Path, stats: &ReturnStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["j", "nu_r_gt_j"])?;
    for (j, v) in &stats.tail {
        w.write_record([j.to_string(), format!("{v:.15e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    CosX,
    CosY,
    /// `sin 2 pi x sin 2 pi y`, the periodic stand-in for `x y`.
    SinXSinY,
    One,
}

pub const DEFAULT_OBSERVABLES: [Observable; 3] = [Observable::CosX, Observable::CosY, Observable::SinXSinY];

impl Observable {
    pub fn eval(self, p: Point) -> f64 {
        use std::f64::consts::TAU;
        match self {
            Observable::CosX => (TAU * p.x).cos(),
            Observable::CosY => (TAU * p.y).cos(),
            Observable::SinXSinY => (TAU * p.x).sin() * (TAU * p.y).sin(),
            Observable::One => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Observable::CosX => "cos_2pi_x",
            Observable::CosY => "cos_2pi_y",
            Observable::SinXSinY => "sin_2pi_x_sin_2pi_y",
            Observable::One => "one",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffRow {
    pub observable: Observable,
    pub tower: f64,
    pub birkhoff: f64,
    /// Standard error of the mean over starts.
    pub stderr: f64,
    pub discrepancy: f64,
    pub invariance_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffReport {
    pub rows: Vec<BirkhoffRow>,
    pub starts: usize,
    pub steps: usize,
    pub max_discrepancy: f64,
}

/// Per-start time averages of each observable from Lebesgue-random starts.
pub fn birkhoff_averages(system: &System, observables: &[Observable], starts: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut p = Point::new(rng.gen::<f64>(), rng.gen::<f64>());
            let mut sums = vec![0.0; observables.len()];
            for _ in 0..n {
                for (s, o) in sums.iter_mut().zip(observables) {
                    *s += o.eval(p);
                }
                p = system.apply(p);
            }
            sums.iter().map(|s| s / n as f64).collect()
        })
        .collect()
}

pub fn birkhoff_compare(system: &System, mu: &TowerMeasure, observables: &[Observable], starts: usize, n: usize, seed: u64) -> BirkhoffReport {
    let avgs = birkhoff_averages(system, observables, starts, n, seed);
    let rows: Vec<BirkhoffRow> = observables
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let vals: Vec<f64> = avgs.iter().map(|a| a[k]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
            } else {
                0.0
            };
            let tower = mu.integral(|p| o.eval(p));
            BirkhoffRow {
                observable: *o,
                tower,
                birkhoff: m,
                stderr: (var / vals.len() as f64).sqrt(),
                discrepancy: (tower - m).abs(),
                invariance_gap: mu.invariance_gap(system, |p| o.eval(p)),
            }
        })
        .collect();
    BirkhoffReport {
        max_discrepancy: rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max),
        rows,
        starts,
        steps: n,
    }
}

pub fn write_birkhoff_csv(path: &Path, rep: &BirkhoffReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["observable", "tower", "birkhoff", "stderr", "discrepancy", "invariance_gap"])?;
    for r in &rep.rows {
        w.write_record([
            r.observable.name().to_string(),
            format!("{:.12e}", r.tower),
            format!("{:.12e}", r.birkhoff),
            format!("{:.12e}", r.stderr),
            format!("{:.12e}", r.discrepancy),
            format!("{:.12e}", r.invariance_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsrCheckpoint {
    pub n: usize,
    pub h: usize,
    pub s: usize,
    pub r: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsrCounts {
    pub n: usize,
    pub h: usize,
    pub s: usize,
    pub r_cnt: usize,
    pub ratio: f64,
    /// Time at which the orbit entered the residual set or escaped the cylinder.
    pub lost_at: Option<usize>,
    pub checkpoints: Vec<HsrCheckpoint>,
}

impl HsrCounts {
    pub fn partial(&self) -> bool {
        self.lost_at.is_some()
    }
}

/// Counts hyperbolic times, satellite visits and returns along the orbit of `x` up to `n`.
pub fn hsr_counts(system: &System, state: &PartitionState, x: Point, n: usize, checkpoints: &[usize]) -> Result<HsrCounts> {
    let r = &state.reference;
    let project = |q: Point| -> Option<f64> {
        let (tau, s) = r.cylinder.coords(r.p.displacement(q));
        (s.abs() <= r.delta_s * (1.0 + PROJECTION_SLACK) && tau.abs() <= r.delta0 * (1.0 + PROJECTION_SLACK))
            .then(|| r.param_of_tau(tau.clamp(-r.delta0, r.delta0)))
    };
    let mut t = project(x).ok_or_else(|| GmyError::InvalidParameter("start does not project into the cylinder over Delta_0".into()))?;

    let log = contraction_log(system, x, n)?;
    let htimes = hyperbolic_time_set(&log.values, r.sigma)?;

    let mut by_gen: Vec<Vec<(f64, f64)>> = vec![Vec::new(); state.n_max + 1];
    for s in &state.satellites {
        by_gen[s.generation].push(s.predisk);
    }
    let in_satellite = |t: f64, j: usize| j < by_gen.len() && by_gen[j].iter().any(|(a, b)| t >= *a && t <= *b);

    let orbit = system.orbit(x, n);
    let mut s_events = Vec::new();
    let mut r_events = Vec::new();
    let mut lost_at = None;
    let mut t0 = 0usize;
    let elements = &state.elements;
    while t0 < n {
        match elements.iter().position(|e| t >= e.lo && t <= e.hi) {
            Some(k) => {
                let rk = elements[k].return_time;
                for j in 1..rk {
                    if t0 + j <= n && in_satellite(t, j) {
                        s_events.push(t0 + j);
                    }
                }
                if t0 + rk > n {
                    break;
                }
                t0 += rk;
                r_events.push(t0);
                match project(orbit[t0]) {
                    Some(u) => t = u,
                    None => {
                        lost_at = Some(t0);
                        break;
                    }
                }
            }
            None => {
                for j in 1..=state.n_max {
                    if t0 + j <= n && in_satellite(t, j) {
                        s_events.push(t0 + j);
                    }
                }
                lost_at = Some(t0);
                break;
            }
        }
    }
    let count = |v: &[usize], m: usize| v.iter().filter(|&&k| k <= m).count();
    let cps = checkpoints
        .iter()
        .filter(|&&c| c <= n)
        .map(|&c| HsrCheckpoint {
            n: c,
            h: count(&htimes, c),
            s: count(&s_events, c),
            r: count(&r_events, c),
        })
        .collect();
    let r_cnt = r_events.len();
    Ok(HsrCounts {
        n,
        h: htimes.len(),
        s: s_events.len(),
        r_cnt,
        ratio: if n > 0 { r_cnt as f64 / n as f64 } else { 0.0 },
        lost_at,
        checkpoints: cps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsrSummary {
    /// Smallest `R/n` over orbits at every checkpoint.
    pub kappa_prime: f64,
    /// Smallest `(R + S)/H` over checkpoints with `H > 0`.
    pub kappa: f64,
    pub partial_orbits: usize,
    pub inequality_holds: bool,
}

pub fn summarize_hsr(counts: &[HsrCounts]) -> HsrSummary {
    let mut kp = f64::INFINITY;
    let mut k = f64::INFINITY;
    for c in counts {
        for cp in &c.checkpoints {
            kp = kp.min(cp.r as f64 / cp.n as f64);
            if cp.h > 0 {
                k = k.min((cp.r + cp.s) as f64 / cp.h as f64);
            }
        }
    }
    let kp = if kp.is_finite() { kp } else { 0.0 };
    let k = if k.is_finite() { k } else { 0.0 };
    let holds = counts
        .iter()
        .all(|c| c.checkpoints.iter().all(|cp| (cp.r + cp.s) as f64 >= k * cp.h as f64 - 1e-12));
    HsrSummary {
        kappa_prime: kp,
        kappa: k,
        partial_orbits: counts.iter().filter(|c| c.partial()).count(),
        inequality_holds: holds,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolonomyResult {
    pub value: f64,
    pub image_param: f64,
    /// `|J_{m+1} / J_m - 1|` for `m = 0..n_trunc`.
    pub increments: Vec<f64>,
    pub last_increment: f64,
    pub rate: Option<f64>,
}

/// Parameter on `gamma_p` where the stable leaf through `x` meets it.
fn stable_intersection(system: &System, gamma_p: &CuDisk, x: Point, delta_s: f64) -> Result<f64> {
    let leaf = stable_leaf(system, x, delta_s)?;
    let rel = |t: f64| x.displacement(gamma_p.chart.orbit[gamma_p.steps].translate(gamma_p.chart.offset(system, t, gamma_p.steps)));
    let (t_lo, t_hi) = gamma_p.t_range();
    let k = gamma_p.params.len().max(64);
    let ts: Vec<f64> = (0..k).map(|i| t_lo + (t_hi - t_lo) * i as f64 / (k - 1) as f64).collect();
    let rs: Vec<Vec2> = ts.iter().map(|t| rel(*t)).collect();
    match &leaf.shape {
        LeafShape::Vertical { .. } | LeafShape::Line { .. } => {
            let dir = match &leaf.shape {
                LeafShape::Line { dir } => *dir,
                _ => Vec2::new(0.0, 1.0),
            };
            let side = |r: Vec2| r.x * dir.y - r.y * dir.x;
            for i in 0..k - 1 {
                let (fa, fb) = (side(rs[i]), side(rs[i + 1]));
                if fa == 0.0 || fa.signum() != fb.signum() {
                    let (mut a, mut b, mut fa) = (ts[i], ts[i + 1], fa);
                    for _ in 0..200 {
                        let m = 0.5 * (a + b);
                        let fm = side(rel(m));
                        if fm == 0.0 || (b - a).abs() < 1e-16 {
                            a = m;
                            b = m;
                            break;
                        }
                        if fm.signum() == fa.signum() {
                            a = m;
                            fa = fm;
                        } else {
                            b = m;
                        }
                    }
                    let t = 0.5 * (a + b);
                    if rel(t).norm() <= delta_s * (1.0 + 1e-9) {
                        return Ok(t);
                    }
                }
            }
            Err(GmyError::NoIntersection)
        }
        LeafShape::Polyline { points } => {
            for w in points.windows(2) {
                for i in 0..k - 1 {
                    if let Some((_, v)) = segment_intersection(w[0], w[1], rs[i], rs[i + 1]) {
                        return Ok(ts[i] + v * (ts[i + 1] - ts[i]));
                    }
                }
            }
            Err(GmyError::NoIntersection)
        }
    }
}

fn segment_intersection(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> Option<(f64, f64)> {
    let r = p1 - p0;
    let s = q1 - q0;
    let den = r.x * s.y - r.y * s.x;
    if den == 0.0 {
        return None;
    }
    let d = q0 - p0;
    let u = (d.x * s.y - d.y * s.x) / den;
    let v = (d.x * r.y - d.y * r.x) / den;
    ((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)).then_some((u, v))
}

/// Truncated holonomy Jacobian `prod_{i < n} J^u(f^i x) / J^u(f^i phi(x))`
/// between two cu-disks, sliding along the stable leaf of `x`.
pub fn holonomy_jacobian(system: &System, gamma: &CuDisk, gamma_p: &CuDisk, delta_s: f64, t: f64, n_trunc: usize) -> Result<HolonomyResult> {
    let x = gamma.chart.orbit[gamma.steps].translate(gamma.chart.offset(system, t, gamma.steps));
    let t_p = stable_intersection(system, gamma_p, x, delta_s)?;
    let path = |d: &CuDisk, t: f64| -> Vec<f64> {
        let mut c = d.chart.clone();
        c.extend(system, d.steps + n_trunc);
        let p = c.log_jac_path(system, t, d.steps + n_trunc);
        p[d.steps..].iter().map(|v| v - p[d.steps]).collect()
    };
    let a = path(gamma, t);
    let b = path(gamma_p, t_p);
    let logs: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u - v).collect();
    let increments: Vec<f64> = logs.windows(2).map(|w| (w[1] - w[0]).exp_m1().abs()).collect();
    let pts: Vec<(f64, f64)> = increments
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 1e-14)
        .map(|(m, d)| (m as f64, d.ln()))
        .collect();
    let rate = if pts.len() >= 3 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        Some((sxy / sxx).exp())
    } else {
        None
    };
    Ok(HolonomyResult {
        value: logs.last().copied().unwrap_or(0.0).exp(),
        image_param: t_p,
        last_increment: increments.last().copied().unwrap_or(0.0),
        increments,
        rate,
    })
}
