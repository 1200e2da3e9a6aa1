//! Centre-unstable curves, hyperbolic pre-disks, stable leaves and u-crossings.
//!
//! Curves are images of straight seed segments `t -> c + t u`. Points on an
//! image are stored as offsets from the orbit of one nearby seed point (a
//! [`LocalChart`]), so that relative positions stay accurate after many
//! expanding iterates even though absolute positions do not.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cones::{estimate_splitting, DEFAULT_SPLITTING_ITERS};
use crate::error::{GmyError, Result};
use crate::systems::{wrap_centered, Point, System, Vec2};

/// Straight seed segment `t -> center + t dir`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub center: Point,
    pub dir: Vec2,
}

impl Seed {
    pub fn new(center: Point, dir: Vec2) -> Self {
        Seed {
            center,
            dir: dir.normalize(),
        }
    }

    pub fn point(&self, t: f64) -> Point {
        self.center.translate(self.dir * t)
    }
}

/// Orbit of the seed point at `t0`, used as the reference for nearby parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalChart {
    pub seed: Seed,
    pub t0: f64,
    pub orbit: Vec<Point>,
}

/// One evaluated point of an image curve.
#[derive(Clone, Copy, Debug)]
pub struct TracePoint {
    pub offset: Vec2,
    pub point: Point,
    pub tangent: Vec2,
    pub log_jac: f64,
}

impl LocalChart {
    pub fn new(system: &System, seed: Seed, t0: f64, n: usize) -> Self {
        let orbit = system.orbit(seed.point(t0), n);
        LocalChart { seed, t0, orbit }
    }

    pub fn len(&self) -> usize {
        self.orbit.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.orbit.len() <= 1
    }

    pub fn extend(&mut self, system: &System, n: usize) {
        while self.orbit.len() <= n {
            let last = *self.orbit.last().unwrap();
            self.orbit.push(system.apply(last));
        }
    }

    /// `f^n(seed(t))` as offset from `f^n(seed(t0))`, with the tangent and the
    /// log of the tangential stretch accumulated over the `n` steps.
    pub fn trace(&self, system: &System, t: f64, n: usize) -> TracePoint {
        let mut d = self.seed.dir * (t - self.t0);
        let mut v = self.seed.dir;
        let mut log_jac = 0.0;
        for k in 0..n {
            let a = self.orbit[k];
            let z = a.translate(d);
            let w = system.derivative(z) * v;
            let s = w.norm();
            log_jac += s.ln();
            v = w / s;
            d = system.apply_offset(a.to_vec(), d);
        }
        TracePoint {
            offset: d,
            point: self.orbit[n].translate(d),
            tangent: v,
            log_jac,
        }
    }

    /// Cumulative log stretch after each of the first `n` steps (length `n + 1`).
    pub fn log_jac_path(&self, system: &System, t: f64, n: usize) -> Vec<f64> {
        let mut d = self.seed.dir * (t - self.t0);
        let mut v = self.seed.dir;
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..n {
            let a = self.orbit[k];
            let w = system.derivative(a.translate(d)) * v;
            let s = w.norm();
            acc += s.ln();
            out.push(acc);
            v = w / s;
            d = system.apply_offset(a.to_vec(), d);
        }
        out
    }

    pub fn offset(&self, system: &System, t: f64, n: usize) -> Vec2 {
        let mut d = self.seed.dir * (t - self.t0);
        for k in 0..n {
            d = system.apply_offset(self.orbit[k].to_vec(), d);
        }
        d
    }

    /// Arc length of `f^n(seed([t1, t2]))`.
    pub fn image_length(&self, system: &System, t1: f64, t2: f64, n: usize) -> f64 {
        gauss_legendre(|t| self.trace(system, t, n).log_jac.exp(), t1, t2, 2)
    }
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Composite five-point Gauss-Legendre rule.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut sum = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            sum += w * f(mid + 0.5 * h * x);
        }
    }
    sum * 0.5 * h
}

/// A centre-unstable curve, sampled finely enough that image gaps stay below `resolution`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuDisk {
    pub chart: LocalChart,
    pub steps: usize,
    pub params: Vec<f64>,
    pub offsets: Vec<Vec2>,
    pub arc_params: Vec<f64>,
    pub center_index: usize,
    pub max_gap: f64,
    pub resolution: f64,
}

pub const DEFAULT_SAMPLE_BUDGET: usize = 1 << 20;

impl CuDisk {
    /// The straight segment `center + t dir`, `t in [-half_len, half_len]`.
    pub fn segment(system: &System, center: Point, dir: Vec2, half_len: f64, resolution: f64) -> Result<Self> {
        let seed = Seed::new(center, dir);
        let chart = LocalChart::new(system, seed, 0.0, 0);
        Self::build(system, chart, 0, -half_len, half_len, resolution, DEFAULT_SAMPLE_BUDGET)
    }

    fn build(
        system: &System,
        chart: LocalChart,
        steps: usize,
        t_min: f64,
        t_max: f64,
        resolution: f64,
        budget: usize,
    ) -> Result<Self> {
        if !(resolution > 0.0) || !(t_max > t_min) {
            return Err(GmyError::InvalidParameter("disk needs t_max > t_min and resolution > 0".into()));
        }
        let init = 17;
        let mut params: Vec<f64> = (0..init)
            .map(|i| t_min + (t_max - t_min) * i as f64 / (init - 1) as f64)
            .collect();
        let mut offsets: Vec<Vec2> = params.iter().map(|t| chart.offset(system, *t, steps)).collect();
        loop {
            let mut new_p = Vec::with_capacity(params.len() * 2);
            let mut new_o = Vec::with_capacity(params.len() * 2);
            let mut refined = false;
            for i in 0..params.len() {
                new_p.push(params[i]);
                new_o.push(offsets[i]);
                if i + 1 < params.len() && (offsets[i + 1] - offsets[i]).norm() > resolution {
                    let mid = 0.5 * (params[i] + params[i + 1]);
                    new_p.push(mid);
                    new_o.push(chart.offset(system, mid, steps));
                    refined = true;
                }
            }
            params = new_p;
            offsets = new_o;
            if !refined {
                break;
            }
            if params.len() > budget {
                return Err(GmyError::BudgetExceeded { budget });
            }
        }
        let mut arc_params = Vec::with_capacity(params.len());
        let mut acc = 0.0;
        let mut max_gap: f64 = 0.0;
        for i in 0..params.len() {
            if i > 0 {
                let g = (offsets[i] - offsets[i - 1]).norm();
                max_gap = max_gap.max(g);
                acc += g;
            }
            arc_params.push(acc);
        }
        let center_index = params
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - chart.t0).abs().total_cmp(&(b.1 - chart.t0).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(CuDisk {
            chart,
            steps,
            params,
            offsets,
            arc_params,
            center_index,
            max_gap,
            resolution,
        })
    }

    pub fn anchor(&self) -> Point {
        self.chart.orbit[self.steps]
    }

    pub fn samples(&self) -> Vec<Point> {
        let a = self.anchor();
        self.offsets.iter().map(|d| a.translate(*d)).collect()
    }

    pub fn length(&self) -> f64 {
        *self.arc_params.last().unwrap_or(&0.0)
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.params[0], *self.params.last().unwrap())
    }

    /// Unit tangent of the image at the given seed parameter.
    pub fn tangent_at(&self, system: &System, t: f64) -> Vec2 {
        self.chart.trace(system, t, self.steps).tangent
    }

    /// Arc length along the image from its first sample to parameter `t`.
    pub fn arc_of_param(&self, system: &System, t: f64) -> f64 {
        self.chart.image_length(system, self.params[0], t, self.steps)
    }

    /// Seed parameter at arc position `s`, interpolated between samples.
    pub fn param_of_arc(&self, s: f64) -> f64 {
        let i = self.arc_params.partition_point(|a| *a < s);
        if i == 0 {
            return self.params[0];
        }
        if i >= self.params.len() {
            return *self.params.last().unwrap();
        }
        let (a0, a1) = (self.arc_params[i - 1], self.arc_params[i]);
        let w = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        self.params[i - 1] + w * (self.params[i] - self.params[i - 1])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["arc_param", "x", "y"])?;
        for (s, p) in self.arc_params.iter().zip(self.samples()) {
            w.write_record([format!("{s:.12e}"), format!("{:.12e}", p.x), format!("{:.12e}", p.y)])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn iterate_disk(system: &System, disk: &CuDisk, steps: usize) -> Result<CuDisk> {
    iterate_disk_with_budget(system, disk, steps, DEFAULT_SAMPLE_BUDGET)
}

pub fn iterate_disk_with_budget(system: &System, disk: &CuDisk, steps: usize, budget: usize) -> Result<CuDisk> {
    if steps == 0 {
        return Ok(disk.clone());
    }
    let mut chart = disk.chart.clone();
    let total = disk.steps + steps;
    chart.extend(system, total);
    let (a, b) = disk.t_range();
    CuDisk::build(system, chart, total, a, b, disk.resolution, budget)
}

/// Fraction of interior tangents lying in the cu-cone of width `a`.
pub fn cone_coherence(system: &System, disk: &CuDisk, a: f64) -> Result<f64> {
    let mut inside = 0usize;
    let n = disk.params.len();
    if n < 3 {
        return Ok(1.0);
    }
    let anchor = disk.anchor();
    for i in 1..n - 1 {
        let p = anchor.translate(disk.offsets[i]);
        let frame = estimate_splitting(system, p, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?;
        let t = disk.tangent_at(system, disk.params[i]);
        if crate::cones::in_cone(t, &frame, crate::cones::ConeParams { a }, crate::cones::ConeKind::Cu)? {
            inside += 1;
        }
    }
    Ok(inside as f64 / (n - 2) as f64)
}

/// Product of tangential stretch factors over `n` further steps from the point at arc position `arc_point`.
pub fn unstable_jacobian(system: &System, disk: &CuDisk, arc_point: f64, n: usize) -> Result<f64> {
    if arc_point < -1e-15 || arc_point > disk.length() + 1e-12 {
        return Err(GmyError::InvalidParameter(format!("arc position {arc_point} outside the disk")));
    }
    if n == 0 {
        return Ok(1.0);
    }
    let t = disk.param_of_arc(arc_point);
    let mut chart = disk.chart.clone();
    chart.extend(system, disk.steps + n);
    let full = chart.trace(system, t, disk.steps + n).log_jac;
    let base = chart.trace(system, t, disk.steps).log_jac;
    let j = (full - base).exp();
    if !(j > 0.0 && j.is_finite()) {
        return Err(GmyError::DegenerateTangent);
    }
    Ok(j)
}

/// `V_n(x)` and `V_n^+(x)` on a disk, as seed-parameter and arc intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreDisk {
    pub chart: LocalChart,
    pub parent_steps: usize,
    pub anchor: Point,
    pub anchor_param: f64,
    pub n: usize,
    pub delta1: f64,
    pub param_interval: (f64, f64),
    pub plus_interval: (f64, f64),
    pub arc_interval: (f64, f64),
    pub plus_arc_interval: (f64, f64),
}

impl PreDisk {
    pub fn arc_length(&self) -> f64 {
        self.arc_interval.1 - self.arc_interval.0
    }
}

/// Seed-parameter distance `s > 0` with `|f^m(seed([t, t + sign s]))| = r`.
pub fn solve_image_radius(
    system: &System,
    chart: &LocalChart,
    t: f64,
    sign: f64,
    m: usize,
    r: f64,
    max_s: f64,
) -> Result<f64> {
    let jac = |tau: f64| chart.trace(system, tau, m).log_jac.exp();
    let length = |s: f64| gauss_legendre(jac, t, t + sign * s, 1).abs();
    let j0 = jac(t);
    if !(j0 > 0.0 && j0.is_finite()) {
        return Err(GmyError::DegenerateDisk);
    }
    let mut s = r / j0;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    for _ in 0..100 {
        if s > max_s {
            if length(max_s) < r {
                return Err(GmyError::InsufficientDisk {
                    needed: s,
                    available: max_s,
                });
            }
            s = 0.5 * (lo + max_s.min(hi));
        }
        let l = length(s);
        if (l - r).abs() <= 1e-12 * r {
            return Ok(s);
        }
        if l < r {
            lo = lo.max(s);
        } else {
            hi = hi.min(s);
        }
        let js = jac(t + sign * s);
        if !(js > 0.0 && js.is_finite()) {
            return Err(GmyError::DegenerateDisk);
        }
        let mut next = s - (l - r) / js;
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * s };
        }
        if (next - s).abs() <= 1e-15 * s.max(1e-300) {
            return Ok(next);
        }
        s = next;
    }
    Ok(s)
}

/// Hyperbolic pre-disk of the disk point `disk.params[anchor_index]` at time `n`.
pub fn hyperbolic_predisk(system: &System, disk: &CuDisk, anchor_index: usize, n: usize, delta1: f64) -> Result<PreDisk> {
    let t = *disk
        .params
        .get(anchor_index)
        .ok_or_else(|| GmyError::InvalidParameter(format!("anchor index {anchor_index} out of range")))?;
    let mut chart = disk.chart.clone();
    chart.extend(system, disk.steps + n);
    predisk_on_chart(system, &chart, disk.steps, disk.t_range(), t, n, delta1, Some(disk))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn predisk_on_chart(
    system: &System,
    chart: &LocalChart,
    parent_steps: usize,
    t_range: (f64, f64),
    t: f64,
    n: usize,
    delta1: f64,
    parent: Option<&CuDisk>,
) -> Result<PreDisk> {
    let m = parent_steps + n;
    let left_max = t - t_range.0;
    let right_max = t_range.1 - t;
    let l1 = solve_image_radius(system, chart, t, -1.0, m, delta1, left_max)?;
    let r1 = solve_image_radius(system, chart, t, 1.0, m, delta1, right_max)?;
    let l2 = solve_image_radius(system, chart, t, -1.0, m, 2.0 * delta1, left_max)?;
    let r2 = solve_image_radius(system, chart, t, 1.0, m, 2.0 * delta1, right_max)?;
    let arc = |tau: f64| match parent {
        Some(d) if parent_steps > 0 => d.arc_of_param(system, tau),
        _ => tau - t_range.0,
    };
    Ok(PreDisk {
        chart: chart.clone(),
        parent_steps,
        anchor: chart.seed.point(t),
        anchor_param: t,
        n,
        delta1,
        param_interval: (t - l1, t + r1),
        plus_interval: (t - l2, t + r2),
        arc_interval: (arc(t - l1), arc(t + r1)),
        plus_arc_interval: (arc(t - l2), arc(t + r2)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub worst_ratio: f64,
    pub pairs: usize,
    pub passed: bool,
}

fn pair_params(interval: (f64, f64), k: usize) -> Vec<(f64, f64)> {
    let pts: Vec<f64> = (0..k)
        .map(|i| interval.0 + (interval.1 - interval.0) * (i as f64 + 0.5) / k as f64)
        .collect();
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            out.push((pts[i], pts[j]));
        }
    }
    out
}

/// Arc lengths of `f^{s+k}(seed([y, z]))` for every `k = 0..=n`, from one Gauss-Legendre pass.
fn image_lengths_all(system: &System, chart: &LocalChart, steps: usize, y: f64, z: f64, n: usize) -> Vec<f64> {
    let panels = 2;
    let h = (z - y) / panels as f64;
    let mut out = vec![0.0; n + 1];
    for p in 0..panels {
        let mid = y + (p as f64 + 0.5) * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            let path = chart.log_jac_path(system, mid + 0.5 * h * x, steps + n);
            for k in 0..=n {
                out[k] += w * 0.5 * h * path[steps + k].exp();
            }
        }
    }
    out.iter().map(|v| v.abs()).collect()
}

/// Checks `dist_{n-k}(y, z) <= sigma^{3k/4} dist_n(y, z)` on sampled pairs of `V_n^+`.
pub fn backward_contraction_report(system: &System, pd: &PreDisk, sigma: f64) -> ContractionReport {
    if pd.n == 0 {
        return ContractionReport {
            worst_ratio: 0.0,
            pairs: 0,
            passed: true,
        };
    }
    let pairs = pair_params(pd.plus_interval, 6);
    let mut worst: f64 = 0.0;
    for (y, z) in &pairs {
        let lens = image_lengths_all(system, &pd.chart, pd.parent_steps, *y, *z, pd.n);
        let dn = lens[pd.n];
        for k in 1..=pd.n {
            let ratio = lens[pd.n - k] / (sigma.powf(0.75 * k as f64) * dn);
            worst = worst.max(ratio);
        }
    }
    ContractionReport {
        worst_ratio: worst,
        pairs: pairs.len(),
        passed: worst <= 1.0 + 1e-9,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub c1: f64,
    pub pairs: usize,
}

/// Empirical distortion constant: max of `|log J_n(y) - log J_n(z)| / dist_n(y, z)`.
pub fn distortion_report(system: &System, pd: &PreDisk) -> DistortionReport {
    distortion_report_with(system, pd, 8)
}

pub fn distortion_report_with(system: &System, pd: &PreDisk, k: usize) -> DistortionReport {
    let pairs = pair_params(pd.plus_interval, k);
    let m = pd.parent_steps + pd.n;
    let mut c1: f64 = 0.0;
    for (y, z) in &pairs {
        let jy = pd.chart.trace(system, *y, m).log_jac - pd.chart.trace(system, *y, pd.parent_steps).log_jac;
        let jz = pd.chart.trace(system, *z, m).log_jac - pd.chart.trace(system, *z, pd.parent_steps).log_jac;
        let d = pd.chart.image_length(system, *y, *z, m);
        if d > 0.0 {
            c1 = c1.max((jy - jz).abs() / d);
        }
    }
    DistortionReport { c1, pairs: pairs.len() }
}

/// Local stable manifold `W^s_{delta_s}(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableLeaf {
    pub base: Point,
    pub radius: f64,
    pub shape: LeafShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeafShape {
    /// Vertical fiber segment `{x} x [y_lo, y_hi]`, clipped to the chart.
    Vertical { y_lo: f64, y_hi: f64 },
    /// Straight segment `base + s dir`, `|s| <= radius`.
    Line { dir: Vec2 },
    /// Displacements from `base` ordered from one end to the other.
    Polyline { points: Vec<Vec2> },
}

impl StableLeaf {
    /// Points along the leaf as displacements from `base`.
    pub fn displacements(&self, k: usize) -> Vec<Vec2> {
        match &self.shape {
            LeafShape::Vertical { y_lo, y_hi } => (0..k)
                .map(|i| Vec2::new(0.0, y_lo + (y_hi - y_lo) * i as f64 / (k - 1) as f64 - self.base.y))
                .collect(),
            LeafShape::Line { dir } => (0..k)
                .map(|i| dir * (-self.radius + 2.0 * self.radius * i as f64 / (k - 1) as f64))
                .collect(),
            LeafShape::Polyline { points } => points.clone(),
        }
    }
}

pub const DEFAULT_MAX_DELTA_S: f64 = 0.5;

fn es_field(system: &System, p: Point, reference: Vec2) -> Result<Vec2> {
    let f = estimate_splitting(system, p, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?;
    Ok(if f.e_s.dot(&reference) < 0.0 { -f.e_s } else { f.e_s })
}

fn integrate_es(system: &System, base: Point, dir: Vec2, length: f64, steps: usize) -> Result<Vec<Vec2>> {
    let h = length / steps as f64;
    let mut y = Vec2::zeros();
    let mut prev = dir;
    let mut out = vec![y];
    for _ in 0..steps {
        let k1 = es_field(system, base.translate(y), prev)?;
        let k2 = es_field(system, base.translate(y + k1 * (h / 2.0)), k1)?;
        let k3 = es_field(system, base.translate(y + k2 * (h / 2.0)), k2)?;
        let k4 = es_field(system, base.translate(y + k3 * h), k3)?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        prev = k4;
        out.push(y);
    }
    Ok(out)
}

pub fn stable_leaf(system: &System, x: Point, delta_s: f64) -> Result<StableLeaf> {
    if !(delta_s > 0.0 && delta_s <= DEFAULT_MAX_DELTA_S) {
        return Err(GmyError::InvalidParameter(format!(
            "stable radius must lie in (0, {DEFAULT_MAX_DELTA_S}], got {delta_s}"
        )));
    }
    use crate::systems::SystemKind;
    let shape = match system.kind {
        SystemKind::MpSkew { .. } => LeafShape::Vertical {
            y_lo: (x.y - delta_s).max(0.0),
            y_hi: (x.y + delta_s).min(1.0),
        },
        SystemKind::Cat => LeafShape::Line {
            dir: crate::systems::cat_stable_dir(),
        },
        SystemKind::PerturbedCat { .. } => {
            let d0 = es_field(system, x, Vec2::new(0.0, 1.0))?;
            let mut steps = 8;
            let mut prev: Option<Vec<Vec2>> = None;
            let mut change = f64::INFINITY;
            while steps <= 1024 {
                let up = integrate_es(system, x, d0, delta_s, steps)?;
                let down = integrate_es(system, x, -d0, delta_s, steps)?;
                let mut pts: Vec<Vec2> = down.iter().rev().copied().collect();
                pts.extend(up.iter().skip(1));
                if let Some(p) = &prev {
                    change = p[0].metric_distance(&pts[0]).max(p[p.len() - 1].metric_distance(&pts[pts.len() - 1]));
                    if change < 1e-8 {
                        prev = Some(pts);
                        break;
                    }
                }
                prev = Some(pts);
                steps *= 2;
            }
            if change >= 1e-8 {
                return Err(GmyError::NonConvergence(change));
            }
            LeafShape::Polyline { points: prev.unwrap() }
        }
    };
    Ok(StableLeaf {
        base: x,
        radius: delta_s,
        shape,
    })
}

/// Fits `d_k <= C beta^k d_0` for two points on the leaf `n` steps forward.
pub fn stable_contraction_fit(system: &System, leaf: &StableLeaf, n: usize) -> (f64, f64) {
    let disp = leaf.displacements(33);
    let a = leaf.base.translate(disp[8]);
    let b = leaf.base.translate(disp[24]);
    let mut orbit_a = vec![a];
    let mut orbit_b = vec![b];
    for _ in 0..n {
        orbit_a.push(system.apply(*orbit_a.last().unwrap()));
        orbit_b.push(system.apply(*orbit_b.last().unwrap()));
    }
    let d0 = a.torus_distance(b);
    let logs: Vec<f64> = (0..=n).map(|k| (orbit_a[k].torus_distance(orbit_b[k]) / d0).ln()).collect();
    let beta = if n > 0 { (logs[n] / n as f64).exp() } else { 0.0 };
    let c = logs
        .iter()
        .enumerate()
        .map(|(k, l)| (l - k as f64 * beta.ln()).exp())
        .fold(0.0, f64::max);
    (c, beta)
}

/// Union of stable leaves of radius `delta_s` through the straight base disk
/// `seed([t_lo, t_hi])`. Leaves are taken parallel to `e_s` (exact for the
/// linear and skew systems, a local linearization otherwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub seed: Seed,
    pub t_lo: f64,
    pub t_hi: f64,
    pub delta_s: f64,
    pub e_s: Vec2,
}

impl Cylinder {
    pub fn new(system: &System, seed: Seed, t_lo: f64, t_hi: f64, delta_s: f64) -> Result<Self> {
        let e_s = match system.exact_stable_direction(seed.center) {
            Some(d) => d,
            None => estimate_splitting(system, seed.center, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?.e_s,
        };
        Ok(Cylinder {
            seed,
            t_lo,
            t_hi,
            delta_s,
            e_s: e_s.normalize(),
        })
    }

    pub fn width(&self) -> f64 {
        self.t_hi - self.t_lo
    }

    /// `(tau, s)` with `rel = tau dir + s e_s`, where `rel` is a displacement from the seed center.
    pub fn coords(&self, rel: Vec2) -> (f64, f64) {
        let u = self.seed.dir;
        let e = self.e_s;
        let det = u.x * e.y - u.y * e.x;
        let tau = (rel.x * e.y - rel.y * e.x) / det;
        let s = (u.x * rel.y - u.y * rel.x) / det;
        (tau, s)
    }

    pub fn contains_coords(&self, c: (f64, f64)) -> bool {
        c.0 >= self.t_lo && c.0 <= self.t_hi && c.1.abs() <= self.delta_s
    }

    /// Half-extent of the cylinder's bounding box around the seed center.
    fn reach(&self) -> Vec2 {
        let u = self.seed.dir;
        let tmax = self.t_lo.abs().max(self.t_hi.abs());
        Vec2::new(
            tmax * u.x.abs() + self.delta_s * self.e_s.x.abs(),
            tmax * u.y.abs() + self.delta_s * self.e_s.y.abs(),
        )
    }
}

/// A component of a curve inside a cylinder whose projection covers the base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Stable coordinate where the component meets the leaf through the seed center.
    pub s_at_center: f64,
    /// Largest `|s|` over the sampled component.
    pub max_height: f64,
}

/// Finds crossing components of a curve given by `rel(t)`, a displacement
/// from the cylinder seed center that is continuous in `t` on the cover.
/// `samples` must be ordered by `t` with consecutive gaps well below the cylinder width.
pub fn find_crossings<F>(cyl: &Cylinder, samples: &[(f64, Vec2)], rel: F, coverage_tol: f64) -> Vec<CrossingInterval>
where
    F: Fn(f64) -> Vec2,
{
    if samples.len() < 2 {
        return Vec::new();
    }
    let reach = cyl.reach();
    let (mut lo, mut hi) = (samples[0].1, samples[0].1);
    for (_, r) in samples {
        lo = lo.inf(r);
        hi = hi.sup(r);
    }
    let shift_range = |l: f64, h: f64, reach: f64| -> (i64, i64) {
        (((-reach - h).ceil()) as i64, ((reach - l).floor()) as i64)
    };
    let (ix0, ix1) = shift_range(lo.x, hi.x, reach.x);
    let (iy0, iy1) = shift_range(lo.y, hi.y, reach.y);
    let mut out = Vec::new();
    for ix in ix0..=ix1 {
        for iy in iy0..=iy1 {
            let shift = Vec2::new(ix as f64, iy as f64);
            scan_shift(cyl, samples, &rel, shift, coverage_tol, &mut out);
        }
    }
    out.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    out
}

fn scan_shift<F>(cyl: &Cylinder, samples: &[(f64, Vec2)], rel: &F, shift: Vec2, coverage_tol: f64, out: &mut Vec<CrossingInterval>)
where
    F: Fn(f64) -> Vec2,
{
    let inside = |r: Vec2| cyl.contains_coords(cyl.coords(r + shift));
    let flags: Vec<bool> = samples.iter().map(|(_, r)| inside(*r)).collect();
    let mut i = 0;
    while i < flags.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < flags.len() && flags[i + 1] {
            i += 1;
        }
        let end = i;
        i += 1;
        let bisect = |t_in: f64, t_out: f64| -> f64 {
            let (mut a, mut b) = (t_in, t_out);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if inside(rel(m)) {
                    a = m;
                } else {
                    b = m;
                }
            }
            a
        };
        let t_start = if start > 0 { bisect(samples[start].0, samples[start - 1].0) } else { samples[start].0 };
        let t_end = if end + 1 < samples.len() { bisect(samples[end].0, samples[end + 1].0) } else { samples[end].0 };
        let tau_start = cyl.coords(rel(t_start) + shift).0;
        let tau_end = cyl.coords(rel(t_end) + shift).0;
        let (tmin, tmax) = (tau_start.min(tau_end), tau_start.max(tau_end));
        let need = (1.0 - coverage_tol) * cyl.width();
        if tmax - tmin < need || tmin > cyl.t_lo + coverage_tol * cyl.width() || tmax < cyl.t_hi - coverage_tol * cyl.width() {
            continue;
        }
        let mut max_height: f64 = 0.0;
        let mut s_at_center = f64::NAN;
        let mut prev: Option<(f64, f64)> = None;
        for (_, r) in samples.iter().take(end + 1).skip(start) {
            let c = cyl.coords(*r + shift);
            max_height = max_height.max(c.1.abs());
            if let Some((pt, ps)) = prev {
                if (pt <= 0.0 && c.0 >= 0.0) || (pt >= 0.0 && c.0 <= 0.0) {
                    let w = if c.0 != pt { -pt / (c.0 - pt) } else { 0.0 };
                    s_at_center = ps + w * (c.1 - ps);
                }
            }
            prev = Some(c);
        }
        for t in [t_start, t_end] {
            max_height = max_height.max(cyl.coords(rel(t) + shift).1.abs());
        }
        if s_at_center.is_nan() {
            let a = cyl.coords(rel(t_start) + shift);
            let b = cyl.coords(rel(t_end) + shift);
            let w = if b.0 != a.0 { -a.0 / (b.0 - a.0) } else { 0.0 };
            s_at_center = a.1 + w * (b.1 - a.1);
        }
        out.push(CrossingInterval {
            t_start,
            t_end,
            tau_start,
            tau_end,
            s_at_center,
            max_height,
        });
    }
}

/// Result of [`u_cross_project`]: the first crossing component in arc order.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    pub component: CuDisk,
    pub interval: CrossingInterval,
    pub count: usize,
}

impl Crossing {
    /// Projection along stable leaves of the component point at seed parameter `t`,
    /// as a base-disk parameter.
    pub fn project(&self, cyl: &Cylinder, system: &System, t: f64) -> f64 {
        let d = &self.component;
        let off = d.chart.offset(system, t, d.steps);
        let base = wrap_displacement(d.anchor(), cyl.seed.center);
        cyl.coords(base + off).0
    }
}

fn wrap_displacement(p: Point, center: Point) -> Vec2 {
    Vec2::new(wrap_centered(p.x - center.x), wrap_centered(p.y - center.y))
}

pub const COVERAGE_TOL: f64 = 1e-3;

pub fn u_cross_project(system: &System, disk: &CuDisk, cyl: &Cylinder) -> Option<Crossing> {
    let base = wrap_displacement(disk.anchor(), cyl.seed.center);
    let samples: Vec<(f64, Vec2)> = disk
        .params
        .iter()
        .zip(disk.offsets.iter())
        .map(|(t, d)| (*t, base + d))
        .collect();
    let rel = |t: f64| base + disk.chart.offset(system, t, disk.steps);
    let found = find_crossings(cyl, &samples, rel, COVERAGE_TOL);
    let first = *found.first()?;
    let component = CuDisk::build(
        system,
        disk.chart.clone(),
        disk.steps,
        first.t_start,
        first.t_end,
        disk.resolution,
        DEFAULT_SAMPLE_BUDGET,
    )
    .ok()?;
    Some(Crossing {
        component,
        interval: first,
        count: found.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{cat_lambda_minus, cat_lambda_plus, cat_stable_dir, cat_unstable_dir};

    #[test]
    fn cat_segment_stretches_by_lambda_plus() {
        let s = System::cat();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), cat_unstable_dir(), 0.01, 1e-3).unwrap();
        assert!((d.length() - 0.02).abs() < 1e-12);
        let img = iterate_disk(&s, &d, 1).unwrap();
        assert!((img.length() - 0.02 * cat_lambda_plus()).abs() < 1e-12);
        assert!(img.max_gap <= 1e-3);
        let same = iterate_disk(&s, &d, 0).unwrap();
        assert_eq!(same, d);
    }

    #[test]
    fn mp_skew_horizontal_image_spread() {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        let y = 0.3;
        let d = CuDisk::segment(&s, Point::new(0.6, y), Vec2::new(1.0, 0.0), 0.05, 1e-4).unwrap();
        let img = iterate_disk(&s, &d, 1).unwrap();
        let ys: Vec<f64> = img.samples().iter().map(|p| p.y).collect();
        let spread = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ys.iter().copied().fold(f64::INFINITY, f64::min);
        let cs: Vec<f64> = (0..1000)
            .map(|i| {
                let x = 0.55 + 0.1 * i as f64 / 999.0;
                0.75 * (1.0 + (2.0 * std::f64::consts::PI * x).cos()) / 4.0
            })
            .collect();
        let cvar = cs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - cs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread <= cvar + 1e-9, "{spread} vs {cvar}");
    }

    #[test]
    fn cat_predisk_radii() {
        let s = System::cat();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), cat_unstable_dir(), 0.01, 1e-3).unwrap();
        let pd = hyperbolic_predisk(&s, &d, d.center_index, 3, 0.05).unwrap();
        let l3 = cat_lambda_minus().powi(3);
        let t = pd.anchor_param;
        assert!((t - pd.param_interval.0 - 0.05 * l3).abs() < 1e-12);
        assert!((pd.param_interval.1 - t - 0.05 * l3).abs() < 1e-12);
        assert!((pd.plus_interval.1 - t - 0.1 * l3).abs() < 1e-12);
        assert!((pd.arc_length() - 0.1 * l3).abs() < 1e-12);
    }

    #[test]
    fn predisk_needs_room() {
        let s = System::cat();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), cat_unstable_dir(), 0.001, 1e-4).unwrap();
        let err = hyperbolic_predisk(&s, &d, d.center_index, 1, 0.05).unwrap_err();
        assert!(matches!(err, GmyError::InsufficientDisk { .. }));
    }

    #[test]
    fn cat_contraction_and_distortion() {
        let s = System::cat();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), cat_unstable_dir(), 0.01, 1e-3).unwrap();
        let pd = hyperbolic_predisk(&s, &d, d.center_index, 4, 0.05).unwrap();
        let rep = backward_contraction_report(&s, &pd, 0.4);
        let expected = cat_lambda_minus() / 0.4f64.powf(0.75);
        assert!((rep.worst_ratio - expected).abs() < 1e-9);
        assert!(rep.passed);
        assert!(distortion_report(&s, &pd).c1 < 1e-9);
        let zero = hyperbolic_predisk(&s, &d, d.center_index, 0, 0.001).unwrap();
        assert!(backward_contraction_report(&s, &zero, 0.4).passed);
    }

    #[test]
    fn unstable_jacobian_examples() {
        let s = System::cat();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), cat_unstable_dir(), 0.01, 1e-3).unwrap();
        assert_eq!(unstable_jacobian(&s, &d, 0.004, 0).unwrap(), 1.0);
        let j = unstable_jacobian(&s, &d, 0.004, 5).unwrap();
        assert!((j - cat_lambda_plus().powi(5)).abs() < 1e-9);
    }

    #[test]
    fn mp_skew_right_branch_jacobian() {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        // 0.8 -> 0.6 -> 0.2: two right-branch steps, then one left
        let d = CuDisk::segment(&s, Point::new(0.8, 0.3), Vec2::new(1.0, 0.0), 0.01, 1e-3).unwrap();
        let t = d.param_of_arc(0.01);
        let mut v = Vec2::new(1.0, 0.0);
        let mut p = d.chart.seed.point(t);
        let mut prod = 1.0;
        for _ in 0..3 {
            let w = s.derivative(p) * v;
            prod *= w.norm();
            v = w.normalize();
            p = s.apply(p);
        }
        let j = unstable_jacobian(&s, &d, 0.01, 3).unwrap();
        assert!((j - prod).abs() < 1e-10 * prod);
    }

    #[test]
    fn stable_leaf_examples() {
        let mp = System::mp_skew(0.5, 0.25).unwrap();
        let l = stable_leaf(&mp, Point::new(0.3, 0.4), 0.1).unwrap();
        match l.shape {
            LeafShape::Vertical { y_lo, y_hi } => {
                assert!((y_lo - 0.3).abs() < 1e-15 && (y_hi - 0.5).abs() < 1e-15);
            }
            _ => panic!("expected a vertical leaf"),
        }
        let cat = System::cat();
        let l = stable_leaf(&cat, Point::new(0.0, 0.0), 0.1).unwrap();
        assert_eq!(l.shape, LeafShape::Line { dir: cat_stable_dir() });
        let (_, beta) = stable_contraction_fit(&cat, &l, 10);
        assert!((beta - cat_lambda_minus()).abs() < 1e-6);
    }

    #[test]
    fn perturbed_stable_leaf_contracts() {
        let s = System::perturbed_cat(0.1).unwrap();
        let l = stable_leaf(&s, Point::new(0.3, 0.6), 0.05).unwrap();
        let (c, beta) = stable_contraction_fit(&s, &l, 12);
        assert!(beta < 0.6, "{beta}");
        assert!(c < 10.0);
    }

    #[test]
    fn disk_crosses_its_own_cylinder() {
        let s = System::cat();
        let seed = Seed::new(Point::new(0.4, 0.4), cat_unstable_dir());
        let d = CuDisk::segment(&s, seed.center, seed.dir, 0.01, 1e-4).unwrap();
        let cyl = Cylinder::new(&s, seed, -0.01, 0.01, 0.01).unwrap();
        let c = u_cross_project(&s, &d, &cyl).unwrap();
        assert!((c.interval.t_start + 0.01).abs() < 1e-12);
        assert!((c.interval.t_end - 0.01).abs() < 1e-12);
        assert!((c.project(&cyl, &s, 0.003) - 0.003).abs() < 1e-12);
        let far = CuDisk::segment(&s, Point::new(0.9, 0.1), cat_unstable_dir(), 0.01, 1e-4).unwrap();
        assert!(u_cross_project(&s, &far, &cyl).is_none());
    }

    #[test]
    fn long_mp_skew_curve_crosses_short_cylinder() {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        let seed = Seed::new(Point::new(0.7, 0.4), Vec2::new(1.0, 0.0));
        let cyl = Cylinder::new(&s, seed, -0.005, 0.005, 0.5).unwrap();
        let d = CuDisk::segment(&s, Point::new(0.3, 0.2), Vec2::new(1.0, 0.0), 0.05, 1e-3).unwrap();
        let img = iterate_disk(&s, &d, 5).unwrap();
        assert!(img.length() > 1.0);
        assert!(u_cross_project(&s, &img, &cyl).is_some());
    }
}
