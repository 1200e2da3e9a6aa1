//! Cone fields, splitting frames and domination certificates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmyError, Result};
use crate::rng;
use crate::systems::{Point, System, Vec2};
use rand::Rng;

pub const DEFAULT_MIN_ANGLE: f64 = 1e-3;
pub const DEFAULT_SPLITTING_ITERS: usize = 80;

/// Approximate invariant splitting `E^s + E^cu` at a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingFrame {
    pub base: Point,
    pub e_s: Vec2,
    pub e_cu: Vec2,
    pub residual: f64,
    pub converged: bool,
}

impl SplittingFrame {
    pub fn new(base: Point, e_s: Vec2, e_cu: Vec2) -> Self {
        SplittingFrame {
            base,
            e_s: e_s.normalize(),
            e_cu: e_cu.normalize(),
            residual: 0.0,
            converged: true,
        }
    }

    /// Angle between the two lines, in `[0, pi/2]`.
    pub fn angle(&self) -> f64 {
        line_angle(self.e_s, self.e_cu)
    }

    /// Coordinates `(c_s, c_cu)` with `v = c_s e_s + c_cu e_cu`.
    pub fn decompose(&self, v: Vec2) -> (f64, f64) {
        let det = self.e_s.x * self.e_cu.y - self.e_s.y * self.e_cu.x;
        let c_s = (v.x * self.e_cu.y - v.y * self.e_cu.x) / det;
        let c_cu = (self.e_s.x * v.y - self.e_s.y * v.x) / det;
        (c_s, c_cu)
    }

    fn check_angle(&self, min_angle: f64) -> Result<()> {
        let angle = self.angle();
        if !(angle >= min_angle) {
            return Err(GmyError::DegenerateFrame {
                x: self.base.x,
                y: self.base.y,
                angle,
                min_angle,
            });
        }
        Ok(())
    }
}

/// Angle between the lines spanned by `u` and `v`.
pub fn line_angle(u: Vec2, v: Vec2) -> f64 {
    let cross = (u.x * v.y - u.y * v.x).abs();
    let dot = u.dot(&v).abs();
    cross.atan2(dot)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub a: f64,
}

impl ConeParams {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(GmyError::InvalidParameter(format!(
                "cone width must be positive, got {a}"
            )));
        }
        Ok(ConeParams { a })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    Cu,
    S,
}

/// Closed cone membership: `|v_s| <= a |v_cu|` for the centre-unstable cone.
pub fn in_cone(v: Vec2, frame: &SplittingFrame, cone: ConeParams, which: ConeKind) -> Result<bool> {
    if v.x == 0.0 && v.y == 0.0 {
        return Err(GmyError::ZeroVector);
    }
    let (c_s, c_cu) = frame.decompose(v);
    let (vs, vcu) = (c_s.abs(), c_cu.abs());
    Ok(match which {
        ConeKind::Cu => vs <= cone.a * vcu,
        ConeKind::S => vcu <= cone.a * vs,
    })
}

/// One step of the graph transform on slopes `E^cu -> E^cs`.
///
/// A slope `mu` at `x` describes the line spanned by `e_cu + mu e_s`. Its image
/// under `Df(x)` is written in the frame at `f(x)` and the new slope returned.
pub fn graph_transform_step(
    system: &System,
    at_x: &SplittingFrame,
    at_fx: &SplittingFrame,
    mu: f64,
) -> Result<f64> {
    at_x.check_angle(DEFAULT_MIN_ANGLE)?;
    at_fx.check_angle(DEFAULT_MIN_ANGLE)?;
    let df = system.derivative(at_x.base);
    let (beta, alpha) = at_fx.decompose(df * at_x.e_cu);
    let (delta, gamma) = at_fx.decompose(df * at_x.e_s);
    Ok((beta + mu * delta) / (alpha + mu * gamma))
}

fn generic_vector() -> Vec2 {
    Vec2::new(1.0, 0.3).normalize()
}

fn align(v: Vec2, reference: Vec2) -> Vec2 {
    if v.dot(&reference) < 0.0 {
        -v
    } else {
        v
    }
}

fn line_distance(u: Vec2, v: Vec2) -> f64 {
    line_angle(u, v)
}

/// Push a vector forward along `points` (each `Df` evaluated at the listed point).
fn push_forward(system: &System, points: &[Point], v0: Vec2) -> Option<Vec2> {
    let mut v = v0;
    for p in points {
        v = system.derivative(*p) * v;
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        v /= n;
    }
    Some(v)
}

/// Backward orbit `[x_{-n}, ..., x_{-1}]` in forward order.
fn backward_orbit(system: &System, x: Point, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    let mut cur = x;
    for _ in 0..n {
        cur = system.preimage(cur);
        pts.push(cur);
    }
    pts.reverse();
    pts
}

fn estimate_cu(system: &System, x: Point, n_iters: usize) -> Option<(Vec2, f64)> {
    let back = backward_orbit(system, x, n_iters);
    let full = push_forward(system, &back, generic_vector())?;
    let shorter = push_forward(system, &back[1..], generic_vector())?;
    Some((full, line_distance(full, shorter)))
}

fn pull_back(system: &System, forward: &[Point], w0: Vec2) -> Option<Vec2> {
    let mut w = w0;
    for p in forward.iter().rev() {
        w = system.inverse_derivative(*p) * w;
        let n = w.norm();
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        w /= n;
    }
    Some(w)
}

fn estimate_s(system: &System, x: Point, n_iters: usize) -> Option<(Vec2, f64)> {
    if let Some(d) = system.exact_stable_direction(x) {
        return Some((d, 0.0));
    }
    let fwd = system.orbit(x, n_iters);
    let pts = &fwd[..n_iters];
    let w0 = Vec2::new(0.3, 1.0).normalize();
    let full = pull_back(system, pts, w0)?;
    let shorter = pull_back(system, &pts[..n_iters - 1], w0)?;
    Some((full, line_distance(full, shorter)))
}

/// Finite-horizon splitting at `x`: `e_cu` from pushing a generic vector along
/// the last `n_iters` preimages, `e_s` from pulling one back along the next
/// `n_iters` images (or the exact fiber when the system has one).
pub fn estimate_splitting(system: &System, x: Point, n_iters: usize, tol: f64) -> Result<SplittingFrame> {
    if n_iters < 2 {
        return Err(GmyError::InvalidParameter("splitting needs at least 2 iterations".into()));
    }
    let (e_cu, r_cu) = estimate_cu(system, x, n_iters).ok_or(GmyError::FrameDivergence { index: 0 })?;
    let (e_s, r_s) = estimate_s(system, x, n_iters).ok_or(GmyError::FrameDivergence { index: 0 })?;
    let residual = r_cu.max(r_s);
    let frame = SplittingFrame {
        base: x,
        e_s: align(e_s, Vec2::new(0.0, 1.0)),
        e_cu: align(e_cu, Vec2::new(1.0, 0.0)),
        residual,
        converged: residual <= tol,
    };
    frame.check_angle(DEFAULT_MIN_ANGLE)?;
    Ok(frame)
}

/// Frames at `x, f(x), ..., f^n(x)`.
///
/// `e_cu` is pushed forward from the estimate at `x`, so consecutive frames are
/// exactly `Df`-related; `e_s` is pulled back from a generic vector placed
/// `n_iters` steps past the end of the orbit.
pub fn frames_along_orbit(
    system: &System,
    x: Point,
    n: usize,
    n_iters: usize,
    tol: f64,
) -> Result<Vec<SplittingFrame>> {
    let first = estimate_splitting(system, x, n_iters, tol)?;
    let orbit = system.orbit(x, n + n_iters);
    let mut e_s = vec![Vec2::zeros(); n + 1];
    if system.exact_stable_direction(x).is_some() {
        for (j, p) in orbit.iter().take(n + 1).enumerate() {
            e_s[j] = system.exact_stable_direction(*p).unwrap();
        }
    } else {
        let mut w = Vec2::new(0.3, 1.0).normalize();
        for j in (0..n + n_iters).rev() {
            w = system.inverse_derivative(orbit[j]) * w;
            let nw = w.norm();
            if !(nw > 0.0 && nw.is_finite()) {
                return Err(GmyError::FrameDivergence { index: j.min(n) });
            }
            w /= nw;
            if j <= n {
                e_s[j] = align(w, Vec2::new(0.0, 1.0));
            }
        }
    }
    let mut frames = Vec::with_capacity(n + 1);
    let mut v = first.e_cu;
    for j in 0..=n {
        if j > 0 {
            v = system.derivative(orbit[j - 1]) * v;
            let nv = v.norm();
            if !(nv > 0.0 && nv.is_finite()) {
                return Err(GmyError::FrameDivergence { index: j });
            }
            v = align(v / nv, Vec2::new(1.0, 0.0));
        }
        let frame = SplittingFrame {
            base: orbit[j],
            e_s: e_s[j],
            e_cu: v,
            residual: first.residual,
            converged: first.converged,
        };
        if frame.angle() < DEFAULT_MIN_ANGLE {
            return Err(GmyError::FrameDivergence { index: j });
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationCertificate {
    pub lambda_hat: f64,
    pub lambda_s_hat: f64,
    pub samples: usize,
    pub tol: f64,
    pub valid: bool,
}

impl DominationCertificate {
    pub fn passes(&self) -> bool {
        self.valid && self.lambda_hat < 1.0 && self.lambda_s_hat < 1.0
    }
}

/// `(|Df|E^s_x|, |Df^{-1}|E^cu_{f(x)}|)` for a frame pair along an orbit.
pub fn restricted_norms(system: &System, at_x: &SplittingFrame, at_fx: &SplittingFrame) -> (f64, f64) {
    let df = system.derivative(at_x.base);
    let s = (df * at_x.e_s).norm();
    let cu_inv = (system.inverse_derivative(at_x.base) * at_fx.e_cu).norm();
    (s, cu_inv)
}

/// Domination certificate over frame pairs `(frame at x, frame at f(x))`.
pub fn check_domination(system: &System, pairs: &[(SplittingFrame, SplittingFrame)], tol: f64) -> DominationCertificate {
    let norms: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let (s, cu) = restricted_norms(system, a, b);
            (s * cu, s)
        })
        .collect();
    let lambda_hat = norms.iter().map(|n| n.0).fold(0.0, f64::max);
    let lambda_s_hat = norms.iter().map(|n| n.1).fold(0.0, f64::max);
    let valid = !pairs.is_empty() && pairs.iter().all(|(a, b)| a.converged && b.converged);
    DominationCertificate {
        lambda_hat,
        lambda_s_hat,
        samples: pairs.len(),
        tol,
        valid,
    }
}

/// Frame pairs at `n_samples` random points. Points whose frames fail are skipped.
pub fn sample_frame_pairs(
    system: &System,
    n_samples: usize,
    seed: u64,
    n_iters: usize,
    tol: f64,
) -> Vec<(SplittingFrame, SplittingFrame)> {
    (0..n_samples)
        .into_par_iter()
        .filter_map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let x = Point::new(r.gen(), r.gen());
            let frames = frames_along_orbit(system, x, 1, n_iters, tol).ok()?;
            Some((frames[0], frames[1]))
        })
        .collect()
}

/// Convenience wrapper: sample and certify.
pub fn certify(system: &System, n_samples: usize, seed: u64, n_iters: usize, tol: f64) -> DominationCertificate {
    let pairs = sample_frame_pairs(system, n_samples, seed, n_iters, tol);
    let mut cert = check_domination(system, &pairs, tol);
    if pairs.len() < n_samples {
        cert.valid = false;
    }
    cert
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{cat_lambda_minus, cat_stable_dir, cat_unstable_dir};

    fn axis_frame() -> SplittingFrame {
        SplittingFrame::new(Point::new(0.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0))
    }

    #[test]
    fn cone_membership_examples() {
        let f = axis_frame();
        let one = ConeParams::new(1.0).unwrap();
        assert!(in_cone(Vec2::new(1.0, 1.0), &f, one, ConeKind::Cu).unwrap());
        let ten = ConeParams::new(10.0).unwrap();
        assert!(!in_cone(Vec2::new(0.0, 1.0), &f, ten, ConeKind::Cu).unwrap());
        assert!(in_cone(Vec2::new(0.0, 1.0), &f, ten, ConeKind::S).unwrap());
        assert!(matches!(
            in_cone(Vec2::zeros(), &f, one, ConeKind::Cu),
            Err(GmyError::ZeroVector)
        ));
        let cat = SplittingFrame::new(Point::new(0.2, 0.3), cat_stable_dir(), cat_unstable_dir());
        let tiny = ConeParams::new(1e-9).unwrap();
        assert!(in_cone(cat_unstable_dir(), &cat, tiny, ConeKind::Cu).unwrap());
    }

    #[test]
    fn cat_splitting_matches_eigenvectors() {
        let s = System::cat();
        let f = estimate_splitting(&s, Point::new(0.37, 0.81), 60, 1e-12).unwrap();
        assert!((f.e_cu - cat_unstable_dir()).norm() < 1e-12);
        assert!(line_angle(f.e_s, cat_stable_dir()) < 1e-12);
        assert!(f.converged);
    }

    #[test]
    fn zero_perturbation_matches_cat() {
        let p = System::perturbed_cat(0.0).unwrap();
        let f = estimate_splitting(&p, Point::new(0.1, 0.2), 60, 1e-12).unwrap();
        assert!((f.e_cu - cat_unstable_dir()).norm() < 1e-12);
        assert!(line_angle(f.e_s, cat_stable_dir()) < 1e-12);
    }

    #[test]
    fn mp_skew_stable_direction_is_vertical() {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        let f = estimate_splitting(&s, Point::new(0.3, 0.4), 80, 1e-12).unwrap();
        assert_eq!(f.e_s, Vec2::new(0.0, 1.0));
    }

    #[test]
    fn cat_graph_transform() {
        let s = System::cat();
        let fr = estimate_splitting(&s, Point::new(0.5, 0.5), 60, 1e-12).unwrap();
        let img = estimate_splitting(&s, s.apply(fr.base), 60, 1e-12).unwrap();
        assert_eq!(graph_transform_step(&s, &fr, &img, 0.0).unwrap().abs() < 1e-12, true);
        let l2 = cat_lambda_minus().powi(2);
        let mu = graph_transform_step(&s, &fr, &img, 0.7).unwrap();
        assert!((mu - 0.7 * l2).abs() < 1e-12);
    }

    #[test]
    fn mp_skew_vertical_slope_zero_is_fixed() {
        let s = System::mp_skew(0.5, 0.25).unwrap();
        let frames = frames_along_orbit(&s, Point::new(0.61, 0.2), 1, 80, 1e-12).unwrap();
        let mu = graph_transform_step(&s, &frames[0], &frames[1], 0.0).unwrap();
        assert!(mu.abs() < 1e-14);
    }

    #[test]
    fn cat_certificate() {
        let cert = certify(&System::cat(), 200, 1, 60, 1e-10);
        let l = cat_lambda_minus();
        assert!((cert.lambda_hat - l * l).abs() < 1e-9);
        assert!((cert.lambda_s_hat - l).abs() < 1e-9);
        assert!(cert.passes());
    }

    #[test]
    fn mp_skew_certificate() {
        let cert = certify(&System::mp_skew(0.5, 0.25).unwrap(), 500, 2, 80, 1e-10);
        assert_eq!(cert.lambda_s_hat, 0.25);
        assert!(cert.lambda_hat < 1.0);
        assert!(cert.passes());
    }

    #[test]
    fn frames_are_invariant_along_cat_orbit() {
        let s = System::cat();
        let fr = frames_along_orbit(&s, Point::new(0.11, 0.42), 20, 60, 1e-12).unwrap();
        for w in fr.windows(2) {
            let img = s.derivative(w[0].base) * w[0].e_cu;
            assert!(line_angle(img, w[1].e_cu) < 1e-8);
            assert!(line_angle(w[1].e_cu, cat_unstable_dir()) < 1e-8);
        }
    }
}
