//! Reference leaf, inductive partition of `Delta_0` and its diagnostics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cones::{estimate_splitting, DEFAULT_SPLITTING_ITERS};
use crate::error::{GmyError, Result};
use crate::hyptimes::hyperbolic_time_set;
use crate::leaf::{backward_contraction_report, distortion_report_with, find_crossings, predisk_on_chart, CrossingInterval, Cylinder, LocalChart, PreDisk, Seed, COVERAGE_TOL};
use crate::systems::{wrap_centered, Point, System, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub sigma: f64,
    pub delta1: f64,
    pub delta_s: f64,
    pub n0_cap: usize,
    pub delta0: Option<f64>,
    /// Number of candidate points scanned along the leaf.
    pub candidates: usize,
    /// Grid side used for the `K0` sweep.
    pub k0_grid: usize,
}

impl ReferenceParams {
    pub fn new(sigma: f64, delta1: f64) -> Self {
        ReferenceParams {
            sigma,
            delta1,
            delta_s: delta1 / 4.0,
            n0_cap: 4,
            delta0: None,
            candidates: 64,
            k0_grid: 100,
        }
    }
}

/// Upper bound on `delta_0` from `2 delta_0 K0^N0 sigma^-N0 < delta_1 K0^-N0`.
pub fn delta0_bound(delta1: f64, sigma: f64, k0: f64, n0: usize) -> f64 {
    delta1 * sigma.powi(n0 as i32) / (2.0 * k0.powi(2 * n0 as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStructure {
    /// The leaf `Delta`: `seed(t)` for `|t| <= leaf_half`.
    pub leaf: Seed,
    pub leaf_half: f64,
    pub p: Point,
    pub p_param: f64,
    pub n0_return: usize,
    pub delta0: f64,
    pub delta0_bound: f64,
    pub delta_s: f64,
    pub k0: f64,
    pub sigma: f64,
    pub delta1: f64,
    pub cylinder: Cylinder,
}

impl ReferenceStructure {
    pub fn delta0_range(&self) -> (f64, f64) {
        (self.p_param - self.delta0, self.p_param + self.delta0)
    }

    pub fn leb_delta0(&self) -> f64 {
        2.0 * self.delta0
    }

    /// Leaf parameter of a cylinder base coordinate.
    pub fn param_of_tau(&self, tau: f64) -> f64 {
        self.p_param + tau
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 < self.delta0_bound) {
            return Err(GmyError::Config(format!(
                "delta0 = {:.6e} violates the bound delta0 < delta1 sigma^N0 / (2 K0^(2 N0)) = {:.6e} (N0 = {}, K0 = {:.6})",
                self.delta0, self.delta0_bound, self.n0_return, self.k0
            )));
        }
        if self.p_param.abs() + self.delta0 >= self.leaf_half {
            return Err(GmyError::Config("Delta_0 is not inside Delta".into()));
        }
        Ok(())
    }
}

/// Rel position of leaf parameters under `f^steps` w.r.t. `p`, continuous along the chart.
struct ImageCurve<'a> {
    system: &'a System,
    chart: &'a LocalChart,
    steps: usize,
    base: Vec2,
}

impl<'a> ImageCurve<'a> {
    fn new(system: &'a System, chart: &'a LocalChart, steps: usize, p: Point) -> Self {
        let a = chart.orbit[steps];
        let base = Vec2::new(wrap_centered(a.x - p.x), wrap_centered(a.y - p.y));
        ImageCurve {
            system,
            chart,
            steps,
            base,
        }
    }

    fn rel(&self, t: f64) -> Vec2 {
        self.base + self.chart.offset(self.system, t, self.steps)
    }
}

/// Samples of an image curve: gaps at most `coarse` everywhere and at most
/// `fine` near the cylinder.
fn focused_samples(curve: &ImageCurve, cyl: &Cylinder, a: f64, b: f64, coarse: f64, fine: f64, budget: usize) -> Result<Vec<(f64, Vec2)>> {
    let near = |r: Vec2, gap: f64| {
        let w = Vec2::new(r.x - r.x.round(), r.y - r.y.round());
        let (tau, s) = cyl.coords(w);
        let m = 2.0 * gap;
        tau >= cyl.t_lo - m && tau <= cyl.t_hi + m && s.abs() <= cyl.delta_s + m
    };
    let init = 9;
    let mut pts: Vec<(f64, Vec2)> = (0..init)
        .map(|i| {
            let t = a + (b - a) * i as f64 / (init - 1) as f64;
            (t, curve.rel(t))
        })
        .collect();
    loop {
        let mut out = Vec::with_capacity(pts.len() * 2);
        let mut refined = false;
        for i in 0..pts.len() {
            out.push(pts[i]);
            if i + 1 < pts.len() {
                let gap = (pts[i + 1].1 - pts[i].1).norm();
                if gap > coarse || (gap > fine && (near(pts[i].1, gap) || near(pts[i + 1].1, gap))) {
                    let mid = 0.5 * (pts[i].0 + pts[i + 1].0);
                    out.push((mid, curve.rel(mid)));
                    refined = true;
                }
            }
        }
        pts = out;
        if !refined {
            return Ok(pts);
        }
        if pts.len() > budget {
            return Err(GmyError::BudgetExceeded { budget });
        }
    }
}

/// First crossing of `f^steps(seed([a, b]))` through `C0` that meets `W^s_{delta_s/2}(p)`.
fn first_crossing(
    system: &System,
    chart: &LocalChart,
    steps: usize,
    reference: &ReferenceStructure,
    a: f64,
    b: f64,
) -> Result<Option<CrossingInterval>> {
    let curve = ImageCurve::new(system, chart, steps, reference.p);
    let coarse = (reference.delta1 / 4.0).min(0.05);
    let fine = reference.delta0 / 8.0;
    let samples = focused_samples(&curve, &reference.cylinder, a, b, coarse, fine, 1 << 22)?;
    let found = find_crossings(&reference.cylinder, &samples, |t| curve.rel(t), COVERAGE_TOL);
    Ok(found.into_iter().find(|c| c.s_at_center.abs() <= reference.delta_s / 2.0))
}

fn e_cu_at(system: &System, p: Point) -> Result<Vec2> {
    Ok(estimate_splitting(system, p, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?.e_cu)
}

fn check_delta0(params: &ReferenceParams, k0: f64) -> Result<()> {
    if let Some(d0) = params.delta0 {
        let bound = delta0_bound(params.delta1, params.sigma, k0, 1);
        if !(d0 > 0.0 && d0 < bound) {
            return Err(GmyError::Config(format!(
                "delta0 = {d0:.6e} violates the bound delta0 < delta1 sigma^N0 / (2 K0^(2 N0)) = {bound:.6e} at N0 = 1 (K0 = {k0:.6})"
            )));
        }
    }
    Ok(())
}

/// Candidate points along one leaf for a fixed `N0`, centre first.
fn try_leaf(system: &System, leaf: Seed, leaf_half: f64, params: &ReferenceParams, n0: usize, k0: f64) -> Result<Option<ReferenceStructure>> {
    let bound = delta0_bound(params.delta1, params.sigma, k0, n0);
    let delta0 = params.delta0.unwrap_or(bound / 2.0);
    if delta0 >= bound {
        return Ok(None);
    }
    let k = params.candidates.max(1);
    let usable = leaf_half - 2.0 * delta0;
    for i in 0..k {
        let j = (i + 1) / 2;
        let side = if i % 2 == 1 { -1.0 } else { 1.0 };
        let tp = side * usable * j as f64 / (k / 2).max(1) as f64;
        let p = leaf.point(tp);
        let cylinder = Cylinder::new(system, Seed::new(p, leaf.dir), -delta0, delta0, params.delta_s)?;
        let reference = ReferenceStructure {
            leaf,
            leaf_half,
            p,
            p_param: tp,
            n0_return: n0,
            delta0,
            delta0_bound: bound,
            delta_s: params.delta_s,
            k0,
            sigma: params.sigma,
            delta1: params.delta1,
            cylinder,
        };
        let chart = LocalChart::new(system, leaf, tp, n0);
        for m in 1..=n0 {
            if first_crossing(system, &chart, m, &reference, -leaf_half, leaf_half)?.is_some() {
                reference.validate()?;
                return Ok(Some(reference));
            }
        }
    }
    Ok(None)
}

/// Scans candidate points along the leaf for one whose surrounding leaf
/// returns across its own trial cylinder within `N0` steps.
pub fn choose_reference(system: &System, leaf: Seed, leaf_half: f64, params: &ReferenceParams) -> Result<ReferenceStructure> {
    let k0 = system.k0(params.k0_grid);
    check_delta0(params, k0)?;
    for n0 in 1..=params.n0_cap {
        if let Some(r) = try_leaf(system, leaf, leaf_half, params, n0, k0)? {
            return Ok(r);
        }
    }
    Err(GmyError::ReferenceSearchFailed(format!(
        "no recurrent candidate among {} points for N0 <= {}",
        params.candidates, params.n0_cap
    )))
}

/// Tries leaves along `e_cu` centred at the lattice points `(j/g, i/g)`, in row
/// order, for each `N0` in turn.
pub fn search_reference(system: &System, params: &ReferenceParams, g: usize) -> Result<ReferenceStructure> {
    let k0 = system.k0(params.k0_grid);
    check_delta0(params, k0)?;
    let half = params.delta1 / 4.0;
    let mut leaves = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let c = Point::new(j as f64 / g as f64, i as f64 / g as f64);
            leaves.push(Seed::new(c, e_cu_at(system, c)?));
        }
    }
    for n0 in 1..=params.n0_cap {
        for leaf in &leaves {
            if let Some(r) = try_leaf(system, *leaf, half, params, n0, k0)? {
                return Ok(r);
            }
        }
    }
    Err(GmyError::ReferenceSearchFailed(format!(
        "no recurrent candidate on {} leaves for N0 <= {}",
        leaves.len(),
        params.n0_cap
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionElement {
    pub lo: f64,
    pub hi: f64,
    pub generation: usize,
    pub m: usize,
    pub return_time: usize,
    pub anchor_param: f64,
    pub anchor: Point,
    pub leb: f64,
    pub crossing: CrossingInterval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Owner {
    Element(usize),
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Satellite {
    pub generation: usize,
    pub owner: Owner,
    pub anchor_param: f64,
    pub predisk: (f64, f64),
    pub candidate: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub n: usize,
    pub flagged: usize,
    pub predisks: usize,
    pub accepted: usize,
    pub satellites: usize,
    pub narrow: usize,
    pub no_crossing: usize,
    pub insufficient: usize,
    /// `Leb(S_n)` restricted to `Delta_0`.
    pub leb_s: f64,
    /// Measure of pre-disks whose anchors produced no usable candidate.
    pub leb_unresolved: f64,
    pub residual: f64,
    pub saturation_misses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionState {
    pub reference: ReferenceStructure,
    pub elements: Vec<PartitionElement>,
    pub satellites: Vec<Satellite>,
    pub generations: Vec<GenerationLog>,
    pub residuals: Vec<f64>,
    pub n0: usize,
    pub n_max: usize,
    pub grid: usize,
    pub min_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub n0: usize,
    pub n_max: usize,
    pub grid: usize,
    pub min_cells: usize,
    pub max_predisks: usize,
}

impl BuildParams {
    pub fn new(n0: usize, n_max: usize) -> Self {
        BuildParams {
            n0,
            n_max,
            grid: 1 << 12,
            min_cells: 4,
            max_predisks: 1 << 20,
        }
    }
}

/// Sorted disjoint interval union.
fn union_length(mut iv: Vec<(f64, f64)>, clip: (f64, f64)) -> f64 {
    iv.retain(|(a, b)| b > a);
    for x in iv.iter_mut() {
        x.0 = x.0.max(clip.0);
        x.1 = x.1.min(clip.1);
    }
    iv.retain(|(a, b)| b > a);
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

struct Candidate {
    anchor_index: usize,
    anchor_param: f64,
    predisk: (f64, f64),
    result: CandidateResult,
}

enum CandidateResult {
    Found { m: usize, lo: f64, hi: f64, crossing: CrossingInterval },
    NoCrossing,
    /// Any return inside the pre-disk would be below the grid resolution.
    Unresolvable,
}

/// Generous bound on the ratio of an element width to its pre-disk width.
const WIDTH_RATIO_SLACK: f64 = 4.0;

fn search_candidate(system: &System, reference: &ReferenceStructure, pd: &PreDisk, n: usize) -> Result<CandidateResult> {
    let mut chart = pd.chart.clone();
    chart.extend(system, n + reference.n0_return);
    for m in 0..=reference.n0_return {
        if let Some(c) = first_crossing(system, &chart, n + m, reference, pd.param_interval.0, pd.param_interval.1)? {
            let (lo, hi) = if c.t_start <= c.t_end { (c.t_start, c.t_end) } else { (c.t_end, c.t_start) };
            return Ok(CandidateResult::Found { m, lo, hi, crossing: c });
        }
    }
    Ok(CandidateResult::NoCrossing)
}

/// Hyperbolic times and cumulative log-Jacobians of every grid anchor up to
/// `n_max`, along the leaf tangent.
fn grid_hyperbolic_times(system: &System, reference: &ReferenceStructure, grid: &[f64], n_max: usize) -> Result<Vec<(Vec<bool>, Vec<f64>)>> {
    grid.par_iter()
        .map(|t| {
            let chart = LocalChart::new(system, reference.leaf, *t, n_max);
            let path = chart.log_jac_path(system, *t, n_max);
            let values: Vec<f64> = path.windows(2).map(|w| -(w[1] - w[0])).collect();
            let times = hyperbolic_time_set(&values, reference.sigma)?;
            let mut flags = vec![false; n_max + 1];
            for k in times {
                flags[k] = true;
            }
            Ok((flags, path))
        })
        .collect()
}

pub fn build_partition(system: &System, reference: &ReferenceStructure, params: &BuildParams) -> Result<PartitionState> {
    reference.validate()?;
    if params.n0 == 0 || params.n_max < params.n0 {
        return Err(GmyError::Config(format!(
            "need 1 <= n0 <= n_max, got n0 = {}, n_max = {}",
            params.n0, params.n_max
        )));
    }
    let (d_lo, d_hi) = reference.delta0_range();
    let cell = (d_hi - d_lo) / params.grid as f64;
    let grid: Vec<f64> = (0..params.grid).map(|i| d_lo + (i as f64 + 0.5) * cell).collect();
    let htimes = grid_hyperbolic_times(system, reference, &grid, params.n_max)?;
    let leaf_range = (-reference.leaf_half, reference.leaf_half);

    let mut elements: Vec<PartitionElement> = Vec::new();
    let mut satellites = Vec::new();
    let mut generations = Vec::new();
    let mut residuals = Vec::new();
    let mut in_element = vec![false; params.grid];
    let total = reference.leb_delta0();

    for n in params.n0..=params.n_max {
        let flagged: Vec<usize> = (0..params.grid).filter(|&i| htimes[i].0[n] && !in_element[i]).collect();
        // cover the flagged anchors by pre-disks, greedily in arc order
        let mut cover: Vec<(usize, Option<PreDisk>, (f64, f64))> = Vec::new();
        let mut insufficient = 0usize;
        let mut excused: Vec<usize> = Vec::new();
        let mut covered_to = f64::NEG_INFINITY;
        for &i in &flagged {
            let t = grid[i];
            if t <= covered_to {
                continue;
            }
            // linearised radius; anchors whose returns cannot reach the grid skip the solve
            let r_est = reference.delta1 * (-htimes[i].1[n]).exp();
            if WIDTH_RATIO_SLACK * 2.0 * r_est * reference.delta0 / reference.delta1 < params.min_cells as f64 * cell {
                covered_to = t + r_est;
                cover.push((i, None, (t - r_est, t + r_est)));
                continue;
            }
            let chart = LocalChart::new(system, reference.leaf, t, n + reference.n0_return);
            match predisk_on_chart(system, &chart, 0, leaf_range, t, n, reference.delta1, None) {
                Ok(pd) => {
                    covered_to = pd.param_interval.1;
                    let iv = pd.param_interval;
                    cover.push((i, Some(pd), iv));
                }
                Err(GmyError::InsufficientDisk { .. }) | Err(GmyError::DegenerateDisk) => {
                    insufficient += 1;
                    excused.push(i);
                }
                Err(e) => return Err(e),
            }
            if cover.len() > params.max_predisks {
                return Err(GmyError::BudgetExceeded {
                    budget: params.max_predisks,
                });
            }
        }
        let candidates: Vec<Candidate> = cover
            .par_iter()
            .map(|(i, pd, iv)| {
                let width = iv.1 - iv.0;
                let widest = WIDTH_RATIO_SLACK * width * reference.delta0 / reference.delta1;
                let result = match pd {
                    Some(pd) if widest >= params.min_cells as f64 * cell => search_candidate(system, reference, pd, n)?,
                    _ => CandidateResult::Unresolvable,
                };
                Ok(Candidate {
                    anchor_index: *i,
                    anchor_param: grid[*i],
                    predisk: *iv,
                    result,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut found: Vec<&Candidate> = candidates.iter().filter(|c| matches!(c.result, CandidateResult::Found { .. })).collect();
        found.sort_by(|a, b| {
            let ka = match a.result {
                CandidateResult::Found { lo, .. } => lo,
                _ => 0.0,
            };
            let kb = match b.result {
                CandidateResult::Found { lo, .. } => lo,
                _ => 0.0,
            };
            ka.total_cmp(&kb).then(a.anchor_index.cmp(&b.anchor_index))
        });
        let mut accepted = 0usize;
        let mut sats_here = 0usize;
        let mut narrow = 0usize;
        let mut s_intervals: Vec<(f64, f64)> = Vec::new();
        let mut unresolved: Vec<(f64, f64)> = Vec::new();
        for c in &found {
            let CandidateResult::Found { m, lo, hi, crossing } = c.result else { continue };
            let inside = lo >= d_lo && hi <= d_hi;
            let overlap = elements.iter().position(|e| overlaps((e.lo, e.hi), (lo, hi)));
            if inside && overlap.is_none() {
                if hi - lo < params.min_cells as f64 * cell {
                    narrow += 1;
                    unresolved.push(c.predisk);
                    continue;
                }
                elements.push(PartitionElement {
                    lo,
                    hi,
                    generation: n,
                    m,
                    return_time: n + m,
                    anchor_param: c.anchor_param,
                    anchor: reference.leaf.point(c.anchor_param),
                    leb: hi - lo,
                    crossing,
                });
                accepted += 1;
                s_intervals.push(c.predisk);
            } else {
                let owner = match overlap {
                    Some(k) => Owner::Element(k),
                    None => Owner::Boundary,
                };
                satellites.push(Satellite {
                    generation: n,
                    owner,
                    anchor_param: c.anchor_param,
                    predisk: c.predisk,
                    candidate: (lo, hi),
                });
                sats_here += 1;
                s_intervals.push(c.predisk);
            }
        }
        let mut no_crossing = 0usize;
        for c in &candidates {
            match c.result {
                CandidateResult::NoCrossing => {
                    no_crossing += 1;
                    unresolved.push(c.predisk);
                }
                CandidateResult::Unresolvable => {
                    narrow += 1;
                    unresolved.push(c.predisk);
                }
                CandidateResult::Found { .. } => {}
            }
        }
        for (i, flag) in in_element.iter_mut().enumerate() {
            if !*flag {
                *flag = elements.iter().any(|e| grid[i] >= e.lo && grid[i] <= e.hi);
            }
        }
        let leb_elements: f64 = elements.iter().map(|e| e.leb).sum();
        let residual = (total - leb_elements).max(0.0);
        // every flagged anchor must lie in S_n, an element, or a logged unresolved pre-disk
        let mut all_s = s_intervals.clone();
        all_s.extend(unresolved.iter().copied());
        let saturation_misses = flagged
            .iter()
            .filter(|&&i| {
                let t = grid[i];
                !(in_element[i] || excused.contains(&i) || all_s.iter().any(|(a, b)| t >= *a && t <= *b))
            })
            .count();
        generations.push(GenerationLog {
            n,
            flagged: flagged.len(),
            predisks: cover.len(),
            accepted,
            satellites: sats_here,
            narrow,
            no_crossing,
            insufficient,
            leb_s: union_length(s_intervals, (d_lo, d_hi)),
            leb_unresolved: union_length(unresolved, (d_lo, d_hi)),
            residual,
            saturation_misses,
        });
        residuals.push(residual);
    }
    Ok(PartitionState {
        reference: reference.clone(),
        elements,
        satellites,
        generations,
        residuals,
        n0: params.n0,
        n_max: params.n_max,
        grid: params.grid,
        min_cells: params.min_cells,
    })
}

impl PartitionState {
    pub fn residual_fraction(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(self.reference.leb_delta0()) / self.reference.leb_delta0()
    }

    pub fn pairwise_disjoint(&self) -> bool {
        let mut iv: Vec<(f64, f64)> = self.elements.iter().map(|e| (e.lo, e.hi)).collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        iv.windows(2).all(|w| w[0].1 <= w[1].0)
    }

    /// Element containing the leaf parameter `t`, by binary search over sorted elements.
    pub fn element_at(&self, t: f64) -> Option<usize> {
        self.elements.iter().position(|e| t >= e.lo && t < e.hi)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn write_elements_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "lo", "hi", "generation", "m", "return_time", "leb"])?;
        for (i, e) in self.elements.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{:.15e}", e.lo),
                format!("{:.15e}", e.hi),
                e.generation.to_string(),
                e.m.to_string(),
                e.return_time.to_string(),
                format!("{:.15e}", e.leb),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Chart following the anchor of an element for `R` steps.
pub fn element_chart(system: &System, reference: &ReferenceStructure, e: &PartitionElement) -> LocalChart {
    LocalChart::new(system, reference.leaf, e.anchor_param, e.return_time)
}

/// The hyperbolic pre-disk `V_n` of the element's anchor, at its generation.
pub fn element_predisk(system: &System, reference: &ReferenceStructure, e: &PartitionElement) -> Result<PreDisk> {
    let chart = LocalChart::new(system, reference.leaf, e.anchor_param, e.return_time);
    let range = (-reference.leaf_half, reference.leaf_half);
    predisk_on_chart(system, &chart, 0, range, e.anchor_param, e.generation, reference.delta1, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementPredisk {
    pub index: usize,
    pub contraction_ratio: f64,
    pub contraction_pass: bool,
    pub c1: f64,
    pub c1_doubled: f64,
    pub distortion_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrediskReport {
    pub elements: Vec<ElementPredisk>,
    pub failures: usize,
    pub contraction_all_pass: bool,
    pub distortion_all_pass: bool,
}

/// Backward contraction and distortion of the anchor pre-disk of every element.
/// Distortion passes when `C1` is finite and moves by at most 10% under doubled sampling.
pub fn predisk_reports(system: &System, state: &PartitionState) -> PrediskReport {
    let rows: Vec<Option<ElementPredisk>> = state
        .elements
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let pd = element_predisk(system, &state.reference, e).ok()?;
            let c = backward_contraction_report(system, &pd, state.reference.sigma);
            let d1 = distortion_report_with(system, &pd, 8).c1;
            let d2 = distortion_report_with(system, &pd, 16).c1;
            let stable = (d2 - d1).abs() <= 0.1 * d1.max(d2) || d1.max(d2) < 1e-9;
            Some(ElementPredisk {
                index: i,
                contraction_ratio: c.worst_ratio,
                contraction_pass: c.passed,
                c1: d1,
                c1_doubled: d2,
                distortion_pass: d1.is_finite() && d2.is_finite() && stable,
            })
        })
        .collect();
    let failures = rows.iter().filter(|r| r.is_none()).count();
    let elements: Vec<ElementPredisk> = rows.into_iter().flatten().collect();
    PrediskReport {
        contraction_all_pass: failures == 0 && elements.iter().all(|r| r.contraction_pass),
        distortion_all_pass: failures == 0 && elements.iter().all(|r| r.distortion_pass),
        elements,
        failures,
    }
}

/// `(tau, s)` cylinder coordinates of `f^R` of the leaf point at `t`, via the element chart.
pub fn return_coords(system: &System, reference: &ReferenceStructure, chart: &LocalChart, steps: usize, t: f64) -> (f64, f64) {
    let curve = ImageCurve::new(system, chart, steps, reference.p);
    let r = curve.rel(t);
    let w = Vec2::new(r.x - r.x.round(), r.y - r.y.round());
    reference.cylinder.coords(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovCheck {
    pub index: usize,
    pub coverage_defect: f64,
    pub height: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub checks: Vec<MarkovCheck>,
    pub worst_coverage_defect: f64,
    pub worst_height_ratio: f64,
    pub all_pass: bool,
}

fn stable_height(system: &System, chart: &LocalChart, steps: usize, delta_s: f64) -> f64 {
    let mut h = delta_s;
    for k in 0..steps {
        let p = chart.orbit[k];
        let e_s = match system.exact_stable_direction(p) {
            Some(d) => d,
            None => match estimate_splitting(system, p, DEFAULT_SPLITTING_ITERS, f64::INFINITY) {
                Ok(f) => f.e_s,
                Err(_) => return f64::INFINITY,
            },
        };
        h *= (system.derivative(p) * e_s).norm();
    }
    h
}

/// Checks that `f^R(C(omega))` u-crosses `C0` with stable height at most `delta_s/4`.
pub fn verify_element(system: &System, reference: &ReferenceStructure, index: usize, e: &PartitionElement) -> MarkovCheck {
    let chart = element_chart(system, reference, e);
    let k = 65;
    let mut tau_min = f64::INFINITY;
    let mut tau_max = f64::NEG_INFINITY;
    let mut inside = true;
    for i in 0..k {
        let t = e.lo + (e.hi - e.lo) * i as f64 / (k - 1) as f64;
        let (tau, s) = return_coords(system, reference, &chart, e.return_time, t);
        tau_min = tau_min.min(tau);
        tau_max = tau_max.max(tau);
        if s.abs() > reference.delta_s || tau < -reference.delta0 * (1.0 + 1e-9) || tau > reference.delta0 * (1.0 + 1e-9) {
            inside = false;
        }
    }
    let w = reference.leb_delta0();
    let defect = ((tau_min + reference.delta0).max(0.0) + (reference.delta0 - tau_max).max(0.0)) / w;
    let height = stable_height(system, &chart, e.return_time, reference.delta_s);
    MarkovCheck {
        index,
        coverage_defect: defect,
        height,
        passed: inside && defect < COVERAGE_TOL && height <= reference.delta_s / 4.0,
    }
}

pub fn verify_markov(system: &System, state: &PartitionState) -> MarkovReport {
    let checks: Vec<MarkovCheck> = state
        .elements
        .par_iter()
        .enumerate()
        .map(|(i, e)| verify_element(system, &state.reference, i, e))
        .collect();
    let worst_coverage_defect = checks.iter().map(|c| c.coverage_defect).fold(0.0, f64::max);
    let worst_height_ratio = checks.iter().map(|c| c.height / (state.reference.delta_s / 4.0)).fold(0.0, f64::max);
    MarkovReport {
        all_pass: checks.iter().all(|c| c.passed),
        checks,
        worst_coverage_defect,
        worst_height_ratio,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummabilityReport {
    pub generations: Vec<usize>,
    pub leb_s: Vec<f64>,
    pub partial_sums: Vec<f64>,
    pub residuals: Vec<f64>,
    /// First generation from which every increment stays below `1e-6 Leb(Delta_0)`.
    pub small_increment_at: Option<usize>,
    /// Least-squares rate of `Leb(S_n^omega)/Leb(omega)` against `n - k`.
    pub envelope_rate: Option<f64>,
    pub envelope_constant: Option<f64>,
    pub envelope_points: usize,
}

pub fn satellite_summability(state: &PartitionState) -> SummabilityReport {
    let generations: Vec<usize> = state.generations.iter().map(|g| g.n).collect();
    let leb_s: Vec<f64> = state.generations.iter().map(|g| g.leb_s).collect();
    let mut acc = 0.0;
    let partial_sums: Vec<f64> = leb_s
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let threshold = 1e-6 * state.reference.leb_delta0();
    let small_increment_at = match leb_s.iter().rposition(|v| *v >= threshold) {
        Some(k) => generations.get(k + 1).copied(),
        None => generations.first().copied(),
    };

    let (d_lo, d_hi) = state.reference.delta0_range();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (k, e) in state.elements.iter().enumerate() {
        let mut by_gen: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
        for s in &state.satellites {
            if s.owner == Owner::Element(k) {
                by_gen.entry(s.generation).or_default().push(s.predisk);
            }
        }
        for (n, iv) in by_gen {
            if n <= e.generation {
                continue;
            }
            let leb = union_length(iv, (d_lo, d_hi));
            if leb > 0.0 {
                pts.push(((n - e.generation) as f64, (leb / e.leb).ln()));
            }
        }
    }
    let (envelope_rate, envelope_constant) = fit_envelope(&pts);
    SummabilityReport {
        generations,
        leb_s,
        partial_sums,
        residuals: state.residuals.clone(),
        small_increment_at,
        envelope_rate,
        envelope_constant,
        envelope_points: pts.len(),
    }
}

fn fit_envelope(pts: &[(f64, f64)]) -> (Option<f64>, Option<f64>) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (None, None);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (None, None);
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let rate = slope.exp();
    let c = pts.iter().map(|p| p.1 - slope * p.0).fold(f64::NEG_INFINITY, f64::max).exp();
    (Some(rate), Some(c))
}
