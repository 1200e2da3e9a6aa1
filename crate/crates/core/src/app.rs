//! Pipelines behind the command-line verbs and the run report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::census::{census, find_expanding_power, random_starts, ExpandingPower};
use crate::cones::{certify, estimate_splitting, DominationCertificate, DEFAULT_SPLITTING_ITERS};
use crate::config::Resolved;
use crate::error::{GmyError, Result};
use crate::hyptimes::{orbit_row, write_hyptimes_csv};
use crate::leaf::{CuDisk, COVERAGE_TOL};
use crate::partition::{
    build_partition, predisk_reports, satellite_summability, search_reference, verify_markov, BuildParams, GenerationLog,
    PartitionState, ReferenceParams, ReferenceStructure,
};
use crate::rng;
use crate::systems::{Point, System};
use crate::tower::{
    birkhoff_compare, holonomy_jacobian, hsr_counts, invariant_density, lift_measure, return_time_stats, stationarity_gap,
    summarize_hsr, write_birkhoff_csv, write_tails_csv, BirkhoffReport, HolonomyResult, HsrSummary, InducedMap, ReturnStats, TowerMeasure,
    DEFAULT_OBSERVABLES,
};

const TASK_HYPTIMES: u64 = 1 << 32;
const TASK_BIRKHOFF: u64 = 2 << 32;
const TASK_CENSUS: u64 = 3 << 32;
const TASK_HSR: u64 = 4 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Systems,
    Certify,
    Hyptimes,
    Partition,
    Tower,
    Census,
    Verify,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub pass: bool,
    pub note: String,
}

impl Check {
    fn new(name: &str, value: f64, tolerance: f64, samples: usize, pass: bool, note: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            value,
            tolerance,
            samples,
            pass,
            note: note.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub name: String,
    pub params: std::collections::BTreeMap<String, f64>,
    pub dimension: usize,
    pub invertible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyptimesSummary {
    pub starts: usize,
    pub horizon: usize,
    pub min_frequency: f64,
    pub mean_lyapunov: f64,
    pub classes: std::collections::BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub reference: ReferenceStructure,
    pub elements: usize,
    pub residual_fraction: f64,
    pub generations: Vec<GenerationLog>,
    pub worst_coverage_defect: f64,
    pub worst_height_ratio: f64,
    pub small_increment_at: Option<usize>,
    pub envelope_rate: Option<f64>,
    pub envelope_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerSummary {
    pub nu_iterations: usize,
    pub nu_gap: f64,
    pub nu_converged: bool,
    pub escape: f64,
    pub stationarity_gap: f64,
    pub mass: f64,
    pub tail_mass: f64,
    pub return_times: ReturnStats,
    pub birkhoff: BirkhoffReport,
    pub hsr: HsrSummary,
    pub holonomy_value: f64,
    pub holonomy_rate: Option<f64>,
    pub holonomy_last_increment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusSummary {
    pub clusters: usize,
    pub starts: usize,
    pub horizon: usize,
    pub g: usize,
    pub cluster_sizes: Vec<usize>,
    pub expanding_power: ExpandingPower,
    pub expanding_samples: String,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub verb: Verb,
    pub config: Resolved,
    pub systems: Option<Vec<SystemInfo>>,
    pub certificate: Option<DominationCertificate>,
    pub hyptimes: Option<HyptimesSummary>,
    pub partition: Option<PartitionSummary>,
    pub tower: Option<TowerSummary>,
    pub census: Option<CensusSummary>,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

pub struct Outcome {
    pub report: RunReport,
    pub timings: Vec<(String, f64)>,
}

struct Timer {
    laps: Vec<(String, f64)>,
}

impl Timer {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.laps.push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

impl GmyError {
    /// Process exit status for an error that aborts a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            GmyError::Config(_) | GmyError::InvalidParameter(_) => 2,
            GmyError::UnknownSystem(_) => 3,
            GmyError::BudgetExceeded { .. } => 4,
            GmyError::ReferenceSearchFailed(_) => 5,
            _ => 1,
        }
    }
}

pub fn run(verb: Verb, system: &System, cfg: &Resolved) -> Result<Outcome> {
    fs::create_dir_all(&cfg.output)?;
    let out = cfg.output.as_path();
    let mut timer = Timer { laps: Vec::new() };
    let mut report = RunReport {
        verb,
        config: cfg.clone(),
        systems: None,
        certificate: None,
        hyptimes: None,
        partition: None,
        tower: None,
        census: None,
        checks: Vec::new(),
        all_pass: true,
    };
    let all = verb == Verb::Report;
    if verb == Verb::Systems {
        report.systems = Some(list_systems());
    }
    if all || matches!(verb, Verb::Certify | Verb::Verify) {
        let cert = timer.time("certify", || run_certify(system, cfg, &mut report.checks));
        report.certificate = Some(cert);
    }
    if all || verb == Verb::Hyptimes {
        let h = timer.time("hyptimes", || run_hyptimes(system, cfg, out, &mut report.checks))?;
        report.hyptimes = Some(h);
    }
    let mut mu = None;
    if all || matches!(verb, Verb::Partition | Verb::Tower | Verb::Verify) {
        let (state, summary) = timer.time("partition", || run_partition(system, cfg, out, &mut report.checks))?;
        report.partition = Some(summary);
        if all || matches!(verb, Verb::Tower | Verb::Verify) {
            let full = verb != Verb::Verify;
            let t = timer.time("tower", || run_tower(system, cfg, &state, out, full, &mut report.checks))?;
            if let Some((summary, m)) = t {
                report.tower = Some(summary);
                mu = Some(m);
            }
        }
    }
    if all || verb == Verb::Census {
        let c = timer.time("census", || run_census(system, cfg, mu.as_ref(), out, &mut report.checks))?;
        report.census = Some(c);
    }
    report.all_pass = report.checks.iter().all(|c| c.pass);
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timings.json"), &timer.laps)?;
    Ok(Outcome {
        report,
        timings: timer.laps,
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn list_systems() -> Vec<SystemInfo> {
    let empty = Default::default();
    ["cat", "mp_skew", "perturbed_cat"]
        .iter()
        .map(|n| {
            let s = System::from_name(n, &empty).expect("built-in system");
            SystemInfo {
                name: n.to_string(),
                params: s.params(),
                dimension: s.dimension(),
                invertible: s.is_invertible(),
            }
        })
        .collect()
}

fn run_certify(system: &System, cfg: &Resolved, checks: &mut Vec<Check>) -> DominationCertificate {
    let cert = certify(system, cfg.certify_samples, cfg.seed, DEFAULT_SPLITTING_ITERS, 1e-8);
    checks.push(Check::new(
        "domination",
        cert.lambda_hat,
        1.0,
        cert.samples,
        cert.passes(),
        "sup |Df|E^s| |Df^-1|E^cu| must be below 1",
    ));
    cert
}

fn run_hyptimes(system: &System, cfg: &Resolved, out: &Path, checks: &mut Vec<Check>) -> Result<HyptimesSummary> {
    let starts = random_starts(cfg.hyptimes_starts, cfg.seed.wrapping_add(TASK_HYPTIMES));
    let rows = starts
        .iter()
        .map(|x| orbit_row(system, *x, cfg.hyptimes_horizon, cfg.sigma, cfg.epsilon))
        .collect::<Result<Vec<_>>>()?;
    write_hyptimes_csv(&out.join("hyptimes.csv"), &rows)?;
    let mut classes = std::collections::BTreeMap::new();
    for r in &rows {
        *classes.entry(r.classification.clone()).or_insert(0) += 1;
    }
    let bounded: Vec<_> = rows.iter().filter(|r| r.theta_bound.is_finite() && r.theta_bound > 0.0).collect();
    let worst = bounded.iter().map(|r| r.frequency - r.theta_bound).fold(f64::INFINITY, f64::min);
    checks.push(Check::new(
        "pliss_bound",
        if worst.is_finite() { worst } else { 0.0 },
        0.0,
        bounded.len(),
        bounded.iter().all(|r| r.frequency >= r.theta_bound - 1e-12),
        "frequency of hyperbolic times minus the Pliss lower bound, worst orbit",
    ));
    Ok(HyptimesSummary {
        starts: rows.len(),
        horizon: cfg.hyptimes_horizon,
        min_frequency: rows.iter().map(|r| r.frequency).fold(f64::INFINITY, f64::min),
        mean_lyapunov: rows.iter().map(|r| r.lyapunov).sum::<f64>() / rows.len().max(1) as f64,
        classes,
    })
}

pub fn reference_params(cfg: &Resolved) -> ReferenceParams {
    let mut p = ReferenceParams::new(cfg.sigma, cfg.delta1);
    p.delta_s = cfg.delta_s;
    p.n0_cap = cfg.n0_cap;
    p.delta0 = cfg.delta0;
    p.k0_grid = cfg.k0_grid;
    p
}

pub fn build_params(cfg: &Resolved) -> BuildParams {
    let mut b = BuildParams::new(cfg.n0, cfg.n_max);
    b.grid = cfg.partition_grid;
    b
}

fn run_partition(system: &System, cfg: &Resolved, out: &Path, checks: &mut Vec<Check>) -> Result<(PartitionState, PartitionSummary)> {
    let reference = search_reference(system, &reference_params(cfg), cfg.search_grid)?;
    let state = build_partition(system, &reference, &build_params(cfg))?;
    state.write_elements_csv(&out.join("elements.csv"))?;
    state.write_json(&out.join("partition.json"))?;
    let markov = verify_markov(system, &state);
    let summ = satellite_summability(&state);
    let pre = predisk_reports(system, &state);
    let k = state.elements.len();
    let resid = state.residual_fraction();
    checks.push(Check::new("partition_residual", resid, 1e-2, cfg.partition_grid, resid < 1e-2, "residual fraction of Leb(Delta_0)"));
    checks.push(Check::new("elements_disjoint", k as f64, 0.0, k, state.pairwise_disjoint(), "pairwise disjoint elements"));
    checks.push(Check::new(
        "markov",
        markov.worst_coverage_defect,
        COVERAGE_TOL,
        k,
        markov.all_pass,
        "u-crossing coverage defect and stable height of every return",
    ));
    let worst_contraction = pre.elements.iter().map(|e| e.contraction_ratio).fold(0.0, f64::max);
    checks.push(Check::new(
        "backward_contraction",
        worst_contraction,
        1.0,
        k,
        pre.contraction_all_pass,
        "worst dist ratio over sigma^(3k/4), anchor pre-disks",
    ));
    let worst_c1 = pre.elements.iter().map(|e| e.c1).fold(0.0, f64::max);
    checks.push(Check::new(
        "distortion",
        worst_c1,
        0.1,
        k,
        pre.distortion_all_pass,
        "empirical C1, stable within 10% under doubled sampling",
    ));
    let misses: usize = state.generations.iter().map(|g| g.saturation_misses).sum();
    checks.push(Check::new("saturation", misses as f64, 0.0, cfg.partition_grid, misses == 0, "flagged anchors outside elements and pre-disks"));
    let small_ok = summ.small_increment_at.is_some_and(|n| n < cfg.n_max);
    checks.push(Check::new(
        "satellite_increments",
        summ.small_increment_at.map(|n| n as f64).unwrap_or(f64::NAN),
        1e-6,
        summ.generations.len(),
        small_ok,
        "generation from which Leb(S_n) stays below 1e-6 Leb(Delta_0)",
    ));
    checks.push(Check::new(
        "satellite_envelope",
        summ.envelope_rate.unwrap_or(f64::NAN),
        1.0,
        summ.envelope_points,
        summ.envelope_rate.is_some_and(|r| r < 1.0),
        "fitted geometric rate of Leb(S_n^omega)/Leb(omega)",
    ));
    let summary = PartitionSummary {
        reference: reference.clone(),
        elements: k,
        residual_fraction: resid,
        generations: state.generations.clone(),
        worst_coverage_defect: markov.worst_coverage_defect,
        worst_height_ratio: markov.worst_height_ratio,
        small_increment_at: summ.small_increment_at,
        envelope_rate: summ.envelope_rate,
        envelope_points: summ.envelope_points,
    };
    Ok((state, summary))
}

fn checkpoints(n: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut c = 1000;
    while c < n {
        v.push(c);
        c *= 10;
    }
    v.push(n);
    v
}

fn run_tower(
    system: &System,
    cfg: &Resolved,
    state: &PartitionState,
    out: &Path,
    full: bool,
    checks: &mut Vec<Check>,
) -> Result<Option<(TowerSummary, TowerMeasure)>> {
    if state.elements.is_empty() {
        checks.push(Check::new("tower", 0.0, 0.0, 0, false, "partition has no elements"));
        return Ok(None);
    }
    let im = InducedMap::new(system, state);
    let nu = invariant_density(&im, cfg.density_grid, cfg.cesaro_iterations, cfg.cesaro_tol)?;
    let gap = stationarity_gap(&im, &nu)?;
    let mu = lift_measure(&im, &nu);
    let stats = return_time_stats(&nu, state);
    write_tails_csv(&out.join("tails.csv"), &stats)?;
    mu.write_histogram_csv(&out.join("density.csv"), cfg.histogram_grid)?;

    checks.push(Check::new("mass_identity", mu.mass_gap(), 1e-10, mu.points.len(), mu.mass_gap() <= 1e-10, "mass of mu_hat minus sum_j nu(R > j)"));
    checks.push(Check::new(
        "nu_stationarity",
        gap,
        2.0 * cfg.cesaro_tol,
        nu.pieces.len(),
        gap < 2.0 * cfg.cesaro_tol,
        format!("total variation after one more push; {} Cesaro iterations", nu.iterations),
    ));
    let inv = DEFAULT_OBSERVABLES.iter().map(|o| mu.invariance_gap(system, |p| o.eval(p))).fold(0.0, f64::max);
    checks.push(Check::new("mu_invariance", inv, 2e-2, mu.points.len(), inv <= 2e-2, "max over default observables"));
    checks.push(Check::new(
        "return_time_integrable",
        stats.mean,
        0.0,
        state.elements.len(),
        stats.mean.is_finite() && stats.tail_non_increasing,
        "int R d nu finite with non-increasing tail",
    ));

    let (birk_starts, birk_steps) = if full { (cfg.birkhoff_starts, cfg.birkhoff_steps) } else { (0, 0) };
    let birkhoff = if full {
        let b = birkhoff_compare(system, &mu, &DEFAULT_OBSERVABLES, birk_starts, birk_steps, cfg.seed.wrapping_add(TASK_BIRKHOFF));
        write_birkhoff_csv(&out.join("birkhoff.csv"), &b)?;
        checks.push(Check::new(
            "birkhoff",
            b.max_discrepancy,
            5e-2,
            birk_starts,
            b.max_discrepancy <= 5e-2,
            format!("max |int phi d mu - Birkhoff average|, {birk_steps} steps per start"),
        ));
        b
    } else {
        BirkhoffReport {
            rows: Vec::new(),
            starts: 0,
            steps: 0,
            max_discrepancy: 0.0,
        }
    };

    let hsr = if full {
        let r = &state.reference;
        let (lo, hi) = r.delta0_range();
        let counts = (0..cfg.hsr_orbits)
            .map(|i| {
                let mut g = rng::stream(cfg.seed.wrapping_add(TASK_HSR), i as u64);
                let t = lo + (hi - lo) * g.gen::<f64>();
                hsr_counts(system, state, r.leaf.point(t), cfg.hsr_steps, &checkpoints(cfg.hsr_steps))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = summarize_hsr(&counts);
        checks.push(Check::new(
            "hsr_counting",
            s.kappa_prime,
            0.0,
            counts.len(),
            s.kappa_prime > 0.0 && s.kappa > 0.0 && s.inequality_holds && s.partial_orbits == 0,
            format!(
                "min R/n over orbits and checkpoints; kappa = {:.4e}; {} orbits left the tracked region",
                s.kappa, s.partial_orbits
            ),
        ));
        s
    } else {
        HsrSummary {
            kappa_prime: f64::NAN,
            kappa: f64::NAN,
            partial_orbits: 0,
            inequality_holds: true,
        }
    };

    let hol = reference_holonomy(system, &state.reference)?;
    let hol_ok = hol.value.is_finite() && (hol.rate.is_some_and(|b| b < 1.0) || hol.last_increment < 1e-12);
    checks.push(Check::new(
        "holonomy",
        hol.rate.unwrap_or(0.0),
        1.0,
        hol.increments.len(),
        hol_ok,
        format!("fitted increment rate; J = {:.12}", hol.value),
    ));

    let summary = TowerSummary {
        nu_iterations: nu.iterations,
        nu_gap: nu.gap,
        nu_converged: nu.converged,
        escape: nu.escape,
        stationarity_gap: gap,
        mass: mu.mass,
        tail_mass: mu.tail_mass,
        return_times: stats,
        birkhoff,
        hsr,
        holonomy_value: hol.value,
        holonomy_rate: hol.rate,
        holonomy_last_increment: hol.last_increment,
    };
    Ok(Some((summary, mu)))
}

/// At most `k` cloud points, evenly strided, with renormalised weights.
fn subsample(mu: &TowerMeasure, k: usize) -> Vec<(Point, f64)> {
    let n = mu.points.len();
    let stride = n.div_ceil(k.max(1)).max(1);
    let picked: Vec<(Point, f64)> = (0..n).step_by(stride).map(|i| (mu.points[i], mu.weights[i])).collect();
    let total: f64 = picked.iter().map(|p| p.1).sum();
    picked.into_iter().map(|(p, w)| (p, w / total)).collect()
}

fn run_census(system: &System, cfg: &Resolved, mu: Option<&TowerMeasure>, out: &Path, checks: &mut Vec<Check>) -> Result<CensusSummary> {
    let starts = random_starts(cfg.census_starts, cfg.seed.wrapping_add(TASK_CENSUS));
    let rep = census(system, &starts, cfg.census_burn_in, cfg.census_horizon, cfg.census_grid, cfg.tv_threshold)?;
    rep.write_assignment_csv(&out.join("census.csv"))?;
    rep.write_distance_csv(&out.join("census_distances.csv"))?;
    let (samples, source) = match mu {
        Some(m) => (subsample(m, 2000), "tower measure"),
        None => {
            let w = 1.0 / starts.len() as f64;
            (starts.iter().map(|p| (*p, w)).collect(), "uniform random points")
        }
    };
    let ep = find_expanding_power(system, &samples, cfg.expanding_n_max)?;
    checks.push(Check::new(
        "expanding_power",
        ep.value.unwrap_or(f64::NAN),
        0.0,
        samples.len(),
        ep.n.is_some(),
        format!("smallest N with negative average of log |(Df^N|E^cu)^-1|: {:?}", ep.n),
    ));
    let mut note = "histogram support cells are a heuristic stand-in for the attractors".to_string();
    if let Some(n) = ep.n {
        if n > 1 {
            note.push_str(&format!("; at most {n} ergodic components"));
        }
    }
    Ok(CensusSummary {
        clusters: rep.clusters,
        starts: starts.len(),
        horizon: cfg.census_horizon,
        g: cfg.census_grid,
        cluster_sizes: rep.clustering.records.iter().map(|r| r.members.len()).collect(),
        expanding_power: ep,
        expanding_samples: source.to_string(),
        note,
    })
}

/// Stable holonomy Jacobian from the reference leaf to the parallel leaf through
/// `p + (delta_s/2) e_s`, evaluated at the point `delta0/2` along the leaf from `p`.
pub fn reference_holonomy(system: &System, r: &ReferenceStructure) -> Result<HolonomyResult> {
    let res = (r.leaf_half / 64.0).max(1e-6);
    let gamma = CuDisk::segment(system, r.leaf.center, r.leaf.dir, r.leaf_half, res)?;
    let shifted = r.p.translate(r.cylinder.e_s * (0.5 * r.delta_s));
    let e_cu = estimate_splitting(system, shifted, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?.e_cu;
    let gamma_p = CuDisk::segment(system, shifted, e_cu, r.leaf_half, res)?;
    holonomy_jacobian(system, &gamma, &gamma_p, r.delta_s, r.p_param + 0.5 * r.delta0, 40)
}
