//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use gmy::app::{build_params, reference_holonomy, reference_params, run, Verb};
use gmy::census::{census, cluster_attractors, find_expanding_power, random_starts, OmegaSignature, DEFAULT_TV_THRESHOLD};
use gmy::cones::{certify, DEFAULT_SPLITTING_ITERS};
use gmy::config::{Resolved, RunConfig};
use gmy::hyptimes::{contraction_log, hyperbolic_time_set, hyperbolic_time_set_direct, hyperbolic_times, lyapunov_cu, pliss_theta};
use gmy::partition::{build_partition, predisk_reports, satellite_summability, search_reference, verify_markov, PartitionState};
use gmy::rng::stream;
use gmy::tower::{
    birkhoff_compare, hsr_counts, invariant_density, lift_measure, return_time_stats, stationarity_gap, summarize_hsr,
    InducedMap, DEFAULT_OBSERVABLES,
};
use gmy::{Point, System};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn resolved(system: &str, tweak: impl FnOnce(&mut RunConfig)) -> (System, Resolved) {
    let mut c = RunConfig::default();
    c.system.name = Some(system.to_string());
    tweak(&mut c);
    c.resolve().expect("config resolves")
}

fn cat_build() -> (System, Resolved, PartitionState) {
    let (s, cfg) = resolved("cat", |c| {
        c.constants.sigma = Some(0.4);
        c.constants.delta1 = Some(0.05);
        c.constants.n_max = Some(40);
        c.grids.partition = Some(1 << 12);
    });
    let r = search_reference(&s, &reference_params(&cfg), cfg.search_grid).expect("reference");
    let st = build_partition(&s, &r, &build_params(&cfg)).expect("build");
    (s, cfg, st)
}

fn mp_build() -> (System, Resolved, PartitionState) {
    let (s, cfg) = resolved("mp_skew", |c| {
        c.system.params.insert("alpha".into(), 0.5);
        c.system.params.insert("lambda_s".into(), 0.25);
    });
    let r = search_reference(&s, &reference_params(&cfg), cfg.search_grid).expect("reference");
    let st = build_partition(&s, &r, &build_params(&cfg)).expect("build");
    (s, cfg, st)
}

fn c1_oracle() -> Outcome {
    let mut mismatches = 0;
    for i in 0..10_000u64 {
        let mut g = stream(1, i);
        let len = g.gen_range(1..=1000);
        let sigma = g.gen_range(0.05..0.95);
        let shift = g.gen_range(-1.5..0.5);
        let values: Vec<f64> = (0..len).map(|_| shift + g.gen_range(-2.0..2.0)).collect();
        if hyperbolic_time_set(&values, sigma).unwrap() != hyperbolic_time_set_direct(&values, sigma).unwrap() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 10000 sequences"))
}

fn c2_cat() -> Outcome {
    let s = System::cat();
    let x = Point::new(0.1234, 0.5678);
    let lyap = lyapunov_cu(&s, x, 1000).unwrap();
    let lyap_exact = ((3.0 + 5f64.sqrt()) / 2.0).ln();
    let cert = certify(&s, 1000, 0, DEFAULT_SPLITTING_ITERS, 1e-8);
    let dom_exact = (7.0 - 3.0 * 5f64.sqrt()) / 2.0;
    let log = contraction_log(&s, x, 1000).unwrap();
    let times = hyperbolic_times(&log, 0.4).unwrap().times.len();
    let (_, cfg) = resolved("cat", |_| {});
    let r = search_reference(&s, &reference_params(&cfg), cfg.search_grid).unwrap();
    let j = reference_holonomy(&s, &r).unwrap().value;
    let pass = (lyap - lyap_exact).abs() <= 1e-6
        && (cert.lambda_hat - dom_exact).abs() <= 1e-9
        && times == 1000
        && (j - 1.0).abs() <= 1e-9;
    outcome(
        pass,
        format!(
            "lyapunov err {:.2e}, domination err {:.2e}, {times}/1000 hyperbolic times, |J-1| = {:.2e}",
            (lyap - lyap_exact).abs(),
            (cert.lambda_hat - dom_exact).abs(),
            (j - 1.0).abs()
        ),
    )
}

fn c3_pliss() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for i in 0..1000u64 {
        let mut g = stream(3, i);
        let len = g.gen_range(50..=1000);
        let sigma: f64 = g.gen_range(0.2..0.9);
        // mean fixed at `target` below log(sigma)
        let lo = sigma.ln() - g.gen_range(0.5..3.0);
        let target = g.gen_range(lo + 0.05..sigma.ln() - 0.01);
        let mut values: Vec<f64> = (0..len).map(|_| g.gen_range(lo..lo + 2.0 * (target - lo))).collect();
        let mean = values.iter().sum::<f64>() / len as f64;
        for v in values.iter_mut() {
            *v += target - mean;
        }
        let theta = pliss_theta(&values, sigma);
        let freq = hyperbolic_time_set(&values, sigma).unwrap().len() as f64 / len as f64;
        if theta <= 0.0 || freq < theta {
            failures += 1;
        }
        worst = worst.min(freq - theta);
    }
    outcome(failures == 0, format!("{failures} failures; worst frequency - bound = {worst:.4}"))
}

fn c4_c5_cat_partition() -> (Outcome, Outcome) {
    let (s, _, st) = cat_build();
    let resid = st.residual_fraction();
    let markov = verify_markov(&s, &st);
    let pre = predisk_reports(&s, &st);
    let four = resid < 1e-2
        && st.pairwise_disjoint()
        && markov.all_pass
        && markov.worst_coverage_defect < 1e-3
        && pre.contraction_all_pass
        && pre.distortion_all_pass;
    let c4 = outcome(
        four,
        format!(
            "{} elements, residual {:.4}, disjoint {}, coverage defect {:.2e}, markov {}, P3 {}, P4 {}",
            st.elements.len(),
            resid,
            st.pairwise_disjoint(),
            markov.worst_coverage_defect,
            markov.all_pass,
            pre.contraction_all_pass,
            pre.distortion_all_pass
        ),
    );
    let summ = satellite_summability(&st);
    let small = summ.small_increment_at.is_some_and(|n| n < st.n_max);
    let rate_ok = summ.envelope_rate.is_some_and(|r| r < 1.0);
    let c5 = outcome(
        small && rate_ok,
        format!(
            "increments small from n = {:?}, envelope rate {:?} over {} points",
            summ.small_increment_at, summ.envelope_rate, summ.envelope_points
        ),
    );
    (c4, c5)
}

fn tower_consistency(s: &System, cfg: &Resolved, st: &PartitionState) -> (bool, String) {
    let im = InducedMap::new(s, st);
    let nu = invariant_density(&im, cfg.density_grid, cfg.cesaro_iterations, cfg.cesaro_tol).unwrap();
    let gap = stationarity_gap(&im, &nu).unwrap();
    let mu = lift_measure(&im, &nu);
    let inv = DEFAULT_OBSERVABLES
        .iter()
        .map(|o| mu.invariance_gap(s, |p| o.eval(p)))
        .fold(0.0, f64::max);
    let pass = mu.mass_gap() <= 1e-10 && gap < 2.0 * cfg.cesaro_tol && inv <= 2e-2;
    (
        pass,
        format!("mass gap {:.1e}, stationarity {:.1e} (< {:.1e}), invariance {:.1e}", mu.mass_gap(), gap, 2.0 * cfg.cesaro_tol, inv),
    )
}

fn c6_tower() -> Outcome {
    let (s, cfg, st) = cat_build();
    let (cat_ok, cat_msg) = tower_consistency(&s, &cfg, &st);
    let (s, cfg, st) = mp_build();
    let (mp_ok, mp_msg) = tower_consistency(&s, &cfg, &st);
    outcome(cat_ok && mp_ok, format!("cat: {cat_msg}; mp_skew: {mp_msg}"))
}

fn c7_srb() -> Outcome {
    let (s, cfg, st) = mp_build();
    let im = InducedMap::new(&s, &st);
    let nu = invariant_density(&im, cfg.density_grid, cfg.cesaro_iterations, cfg.cesaro_tol).unwrap();
    let mu = lift_measure(&im, &nu);
    let b = birkhoff_compare(&s, &mu, &DEFAULT_OBSERVABLES, 100, 1_000_000, 7);
    let stats = return_time_stats(&nu, &st);
    let rows: Vec<String> = b
        .rows
        .iter()
        .map(|r| format!("{} tower {:.4} birkhoff {:.4}", r.observable.name(), r.tower, r.birkhoff))
        .collect();
    let pass = b.max_discrepancy <= 5e-2 && stats.mean.is_finite() && stats.tail_non_increasing;
    outcome(
        pass,
        format!(
            "max discrepancy {:.4} (tol 5e-2); int R dnu = {:.3}, tail non-increasing {}; {}",
            b.max_discrepancy,
            stats.mean,
            stats.tail_non_increasing,
            rows.join(", ")
        ),
    )
}

fn c8_counting() -> Outcome {
    let (s, _, st) = mp_build();
    let r = &st.reference;
    let (lo, hi) = r.delta0_range();
    let n = 100_000;
    let counts: Vec<_> = (0..10u64)
        .map(|i| {
            let mut g = stream(8, i);
            let t = lo + (hi - lo) * g.gen::<f64>();
            hsr_counts(&s, &st, r.leaf.point(t), n, &[1000, 10_000, n]).unwrap()
        })
        .collect();
    let sm = summarize_hsr(&counts);
    let pass = sm.kappa_prime > 0.0 && sm.kappa > 0.0 && sm.inequality_holds && sm.partial_orbits == 0;
    outcome(
        pass,
        format!(
            "kappa' = {:.4e}, kappa = {:.4e}, inequality {}, {} of 10 orbits entered the residual set",
            sm.kappa_prime, sm.kappa, sm.inequality_holds, sm.partial_orbits
        ),
    )
}

fn block(g: usize, lower: bool) -> OmegaSignature {
    let mut occ = vec![0.0; g * g];
    let rows = if lower { 0..g / 2 } else { g / 2..g };
    for i in rows {
        for j in 0..g {
            occ[i * g + j] = 1.0 / (g * g / 2) as f64;
        }
    }
    OmegaSignature {
        start: Point::new(0.0, 0.0),
        g,
        occupancy: occ,
    }
}

fn c9_census() -> Outcome {
    let s = System::cat();
    let mut counts = Vec::new();
    for g in [32, 64] {
        for n in [50, 100] {
            let rep = census(&s, &random_starts(n, 9), 1000, 100_000, g, DEFAULT_TV_THRESHOLD).unwrap();
            counts.push(rep.clusters);
        }
    }
    let fixture: Vec<OmegaSignature> = (0..10).map(|i| block(32, i % 2 == 0)).collect();
    let two = cluster_attractors(&fixture, DEFAULT_TV_THRESHOLD).unwrap().records.len();
    let samples: Vec<(Point, f64)> = random_starts(100, 9).into_iter().map(|p| (p, 0.01)).collect();
    let ep = find_expanding_power(&s, &samples, 10).unwrap();
    let value = ep.value.unwrap_or(f64::NAN);
    let pass = counts.iter().all(|c| *c == 1) && two == 2 && ep.n == Some(1) && (value + 0.962424).abs() <= 1e-6;
    outcome(pass, format!("cat clusters {counts:?}, fixture clusters {two}, expanding power ({:?}, {value:.7})", ep.n))
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn c10_reproducible() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (s, cfg) = resolved("mp_skew", |c| {
        c.seed = Some(42);
        c.output = Some(dir.path().to_path_buf());
    });
    run(Verb::Report, &s, &cfg).unwrap();
    let first = artifacts(dir.path());
    // second run on a single worker thread
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| run(Verb::Report, &s, &cfg)).unwrap();
    let second = artifacts(dir.path());
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let pass = !first.is_empty() && first.len() == second.len() && differing.is_empty();
    outcome(pass, format!("{} artifacts compared, differing: {differing:?}", first.len()))
}

fn report(id: usize, limit: Duration, elapsed: Duration, o: &Outcome) -> bool {
    let pass = o.pass && elapsed <= limit;
    println!(
        "criterion {id:>2}: {} ({:.1}s, limit {}s) {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        o.detail
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    let (o, t) = timed(c1_oracle);
    all &= report(1, min(1), t, &o);
    let (o, t) = timed(c2_cat);
    all &= report(2, min(1), t, &o);
    let (o, t) = timed(c3_pliss);
    all &= report(3, min(1), t, &o);
    let ((o4, o5), t) = timed(c4_c5_cat_partition);
    all &= report(4, min(5), t, &o4);
    all &= report(5, min(5), t, &o5);
    let (o, t) = timed(c6_tower);
    all &= report(6, min(2), t, &o);
    let (o, t) = timed(c7_srb);
    all &= report(7, min(10), t, &o);
    let (o, t) = timed(c8_counting);
    all &= report(8, min(3), t, &o);
    let (o, t) = timed(c9_census);
    all &= report(9, min(3), t, &o);
    let (o, t) = timed(c10_reproducible);
    all &= report(10, min(15), t, &o);
    if !all {
        std::process::exit(1);
    }
}
