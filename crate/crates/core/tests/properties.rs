use proptest::prelude::*;

use gmy::app::{run, Verb};
use gmy::census::{cluster_attractors, cu_log_norm_product, CuCocycle, OmegaSignature};
use gmy::cones::{estimate_splitting, in_cone, restricted_norms, ConeKind, ConeParams, DEFAULT_SPLITTING_ITERS};
use gmy::config::RunConfig;
use gmy::hyptimes::{hyperbolic_time_set, hyperbolic_time_set_direct, pliss_theta};
use gmy::tower::tail_sum_mass;
use gmy::{Point, System, Vec2};

fn systems() -> Vec<System> {
    vec![
        System::cat(),
        System::mp_skew(0.5, 0.25).unwrap(),
        System::perturbed_cat(0.1).unwrap(),
    ]
}

fn point() -> impl Strategy<Value = Point> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| Point::new(x, y))
}

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..1.0f64, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn derivative_round_trip(p in point()) {
        for s in systems() {
            let prod = s.inverse_derivative(p) * s.derivative(p);
            let err = (prod - gmy::systems::Mat2::identity()).abs().max();
            prop_assert!(err < 1e-12, "{} at {:?}: {}", s.name(), p, err);
        }
    }

    #[test]
    fn mp_skew_vertical_fibres(p in point()) {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        let v = s.derivative(p) * Vec2::new(0.0, 1.0);
        prop_assert_eq!(v.x, 0.0);
        prop_assert_eq!(v.y, 0.25);
    }

    #[test]
    fn orbit_deterministic(p in point(), n in 1usize..500) {
        for s in systems() {
            prop_assert_eq!(s.orbit(p, n), s.orbit(p, n));
        }
    }

    #[test]
    fn oracle_equivalence(v in values(400), sigma in 0.05..0.95f64) {
        prop_assert_eq!(hyperbolic_time_set(&v, sigma).unwrap(), hyperbolic_time_set_direct(&v, sigma).unwrap());
    }

    #[test]
    fn pliss_bound(v in values(400), sigma in 0.05..0.95f64) {
        let theta = pliss_theta(&v, sigma);
        let freq = hyperbolic_time_set(&v, sigma).unwrap().len() as f64 / v.len() as f64;
        prop_assert!(freq >= theta, "frequency {} below bound {}", freq, theta);
    }

    #[test]
    fn appending_contracting_values_keeps_times(
        v in values(200),
        tail in prop::collection::vec(0.0..2.0f64, 0..50),
        sigma in 0.05..0.95f64,
    ) {
        let before = hyperbolic_time_set(&v, sigma).unwrap();
        let mut w = v.clone();
        w.extend(tail.iter().map(|d| sigma.ln() - d));
        let after = hyperbolic_time_set(&w, sigma).unwrap();
        prop_assert_eq!(&after[..before.len()], &before[..]);
    }

    #[test]
    fn cone_forward_invariance(p in point(), c in -1.0..1.0f64, a in 0.1..2.0f64) {
        for s in [System::cat(), System::perturbed_cat(0.1).unwrap()] {
            let fx = estimate_splitting(&s, p, DEFAULT_SPLITTING_ITERS, f64::INFINITY).unwrap();
            let ffx = estimate_splitting(&s, s.apply(p), DEFAULT_SPLITTING_ITERS, f64::INFINITY).unwrap();
            let (ns, ncu) = restricted_norms(&s, &fx, &ffx);
            let cone = ConeParams::new(a).unwrap();
            let v = fx.e_cu + fx.e_s * (c * a);
            prop_assert!(in_cone(v, &fx, cone, ConeKind::Cu).unwrap());
            let image = s.derivative(p) * v;
            let narrowed = ConeParams::new(ns * ncu * a * (1.0 + 1e-9) + 1e-12).unwrap();
            prop_assert!(in_cone(image, &ffx, narrowed, ConeKind::Cu).unwrap());
        }
    }

    #[test]
    fn cocycle_product_equals_sum(p in point(), n in 1usize..8) {
        for s in systems() {
            let sum = -s.log_inverse_norm(p, n).unwrap();
            let prod = cu_log_norm_product(&s, p, n).unwrap();
            prop_assert!((sum - prod).abs() <= 1e-9 * (1.0 + prod.abs()), "{}: {} vs {}", s.name(), sum, prod);
        }
    }

    #[test]
    fn tail_sum_identity(rows in prop::collection::vec((0.0..1.0f64, 1usize..30), 1..40)) {
        let (w, r): (Vec<f64>, Vec<usize>) = rows.into_iter().unzip();
        let direct: f64 = w.iter().zip(&r).map(|(w, r)| w * *r as f64).sum();
        prop_assert!((tail_sum_mass(&w, &r) - direct).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn clustering_permutation_invariant(
        (groups, order) in prop::collection::vec(0usize..3, 2..12).prop_flat_map(|g| {
            let n = g.len();
            (Just(g), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        })
    ) {
        let sig = |k: usize| {
            let g = 6;
            let mut occ = vec![0.0; g * g];
            for j in 0..g * 2 {
                occ[k * g * 2 + j] = 1.0 / (g * 2) as f64;
            }
            OmegaSignature { start: Point::new(0.0, 0.0), g, occupancy: occ }
        };
        let sigs: Vec<OmegaSignature> = groups.iter().map(|k| sig(*k)).collect();
        let shuffled: Vec<OmegaSignature> = order.iter().map(|i| sigs[*i].clone()).collect();
        let a = cluster_attractors(&sigs, 0.2).unwrap();
        let b = cluster_attractors(&shuffled, 0.2).unwrap();
        prop_assert_eq!(a.records.len(), b.records.len());
        let mut sizes_a: Vec<usize> = a.records.iter().map(|r| r.members.len()).collect();
        let mut sizes_b: Vec<usize> = b.records.iter().map(|r| r.members.len()).collect();
        sizes_a.sort();
        sizes_b.sort();
        prop_assert_eq!(sizes_a, sizes_b);
        for (i, j) in order.iter().enumerate() {
            for (k, l) in order.iter().enumerate() {
                prop_assert_eq!(b.assignment[i] == b.assignment[k], a.assignment[*j] == a.assignment[*l]);
            }
        }
    }
}

#[test]
fn report_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.output = Some(dir.path().to_path_buf());
    let (s, cfg) = c.resolve().unwrap();
    run(Verb::Certify, &s, &cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let echoed: gmy::config::Resolved = serde_json::from_value(v["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(v["checks"][0]["samples"], 1000);
}
