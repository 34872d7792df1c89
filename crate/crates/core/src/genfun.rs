//! Geometry of `D = {α : P(α) ≤ 1}` where `P(α) = Σ exp(α·k) μ(k)`.
//!
//! The central operation is [`solve_alpha`], which inverts the Gauss map
//! `α ↦ ∇P(α)/‖∇P(α)‖` on `∂D` and packages the second-order data of the
//! twisted walk at that point.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::ser::{Serialize, SerializeStruct, Serializer};
use thiserror::Error;

use crate::model::{dot, JumpMeasure, ModelError, Step};

#[derive(Debug, Error)]
pub enum GenfunError {
    #[error("direction must be a unit vector of dimension {dim} (got norm {norm})")]
    BadDirection { dim: usize, norm: f64 },
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("alpha is not on the boundary of D: |P(alpha) - 1| = {0:e}")]
    NotOnBoundary(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GenfunError>;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Residual tolerance for `|P(α) - 1|` and the Newton system.
    pub tol: f64,
    /// Tolerance on the angle between `∇P(α)` and `u`.
    pub angle_tol: f64,
    pub max_iter: usize,
    /// Number of ray directions in the coarse angular scan (d ≥ 2).
    pub scan: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, angle_tol: 1e-8, max_iter: 100, scan: 64 }
    }
}

/// `P(α)` at a real point.
pub fn eval_p(measure: &JumpMeasure, alpha: &[f64]) -> f64 {
    measure.steps().iter().map(|s| s.p * exp_dot(alpha, &s.v)).sum()
}

pub fn grad_p(measure: &JumpMeasure, alpha: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; measure.dim()];
    for s in measure.steps() {
        let w = s.p * exp_dot(alpha, &s.v);
        for (gi, &ki) in g.iter_mut().zip(&s.v) {
            *gi += w * ki as f64;
        }
    }
    g
}

pub fn hess_p(measure: &JumpMeasure, alpha: &[f64]) -> DMatrix<f64> {
    let d = measure.dim();
    let mut h = DMatrix::zeros(d, d);
    for s in measure.steps() {
        let w = s.p * exp_dot(alpha, &s.v);
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] += w * (s.v[i] * s.v[j]) as f64;
            }
        }
    }
    h
}

/// Second-moment matrix `Σ k kᵀ exp(α·k) μ(k)`; identical to the Hessian of `P`.
pub fn second_moments(measure: &JumpMeasure, alpha: &[f64]) -> DMatrix<f64> {
    hess_p(measure, alpha)
}

fn exp_dot(alpha: &[f64], k: &[i64]) -> f64 {
    alpha.iter().zip(k).map(|(a, &b)| a * b as f64).sum::<f64>().exp()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Minimiser `α*` of `P` (damped Newton from 0). Under (A1) `P(α*) < 1`.
pub fn find_interior_min(measure: &JumpMeasure) -> Result<Vec<f64>> {
    let d = measure.dim();
    let mut alpha = vec![0.0; d];
    let mut value = eval_p(measure, &alpha);
    for _ in 0..200 {
        let g = grad_p(measure, &alpha);
        if norm(&g) <= 1e-12 {
            return Ok(alpha);
        }
        let h = hess_p(measure, &alpha);
        let step = h
            .lu()
            .solve(&DVector::from_column_slice(&g))
            .ok_or_else(|| GenfunError::NonConvergence("singular Hessian".into()))?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = alpha.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let v = eval_p(measure, &trial);
            if v <= value || t < 1e-12 {
                alpha = trial;
                value = v;
                break;
            }
            t *= 0.5;
        }
    }
    Err(GenfunError::NonConvergence(format!(
        "interior minimiser: |grad| = {:e} after 200 Newton steps",
        norm(&grad_p(measure, &alpha))
    )))
}

/// Largest `t > 0` with `P(origin + t·dir) ≤ level`, assuming `P(origin) < level`
/// and that `P` grows without bound along the ray (true on `D`'s rays under A1).
pub fn ray_to_level(measure: &JumpMeasure, origin: &[f64], dir: &[f64], level: f64) -> Result<f64> {
    let at = |t: f64| {
        let p: Vec<f64> = origin.iter().zip(dir).map(|(o, d)| o + t * d).collect();
        eval_p(measure, &p)
    };
    let mut hi = 1.0;
    let mut doublings = 0;
    while at(hi) <= level {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(GenfunError::NonConvergence("ray never leaves D".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid) <= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Boundary point of `D` hit by the ray from `origin` (with `P(origin) < 1`) along `dir`.
pub fn ray_to_boundary(measure: &JumpMeasure, origin: &[f64], dir: &[f64]) -> Result<Vec<f64>> {
    let t = ray_to_level(measure, origin, dir, 1.0)?;
    Ok(origin.iter().zip(dir).map(|(o, d)| o + t * d).collect())
}

/// Deterministic set of unit directions used for scans.
pub fn scan_directions(d: usize, count: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|j| {
                let th = 2.0 * PI * j as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            // Axis directions plus a quasi-random (Halton) cloud projected to the sphere.
            let mut out = Vec::new();
            for i in 0..d {
                for sgn in [1.0, -1.0] {
                    let mut e = vec![0.0; d];
                    e[i] = sgn;
                    out.push(e);
                }
            }
            const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
            let n = count * d * d;
            for j in 1..=n as u64 {
                let v: Vec<f64> = (0..d)
                    .map(|i| 2.0 * radical_inverse(j, PRIMES[i % PRIMES.len()]) - 1.0)
                    .collect();
                let nv = norm(&v);
                if nv > 1e-3 && nv <= 1.0 {
                    out.push(v.iter().map(|x| x / nv).collect());
                }
            }
            out
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Rotation `R` with `R·u = e1` acting as the identity on the orthogonal
/// complement of `span{u, e1}`. For `u = -e1` (d ≥ 2) this is the rotation by π
/// in the `(e1, e2)` plane; for d = 1 it is `[±1]`.
pub fn rotation_to_e1(u: &[f64]) -> DMatrix<f64> {
    let d = u.len();
    if d == 1 {
        return DMatrix::from_element(1, 1, if u[0] >= 0.0 { 1.0 } else { -1.0 });
    }
    let c = u[0];
    let mut w: Vec<f64> = u.to_vec();
    w[0] = 0.0;
    let s = norm(&w);
    let mut r = DMatrix::identity(d, d);
    if s < 1e-14 {
        if c < 0.0 {
            r[(0, 0)] = -1.0;
            r[(1, 1)] = -1.0;
        }
        return r;
    }
    for x in w.iter_mut() {
        *x /= s;
    }
    // u = c e1 + s w; rotate the (e1, w) plane by the angle taking u to e1.
    for i in 0..d {
        for j in 0..d {
            let e1i = (i == 0) as u8 as f64;
            let e1j = (j == 0) as u8 as f64;
            r[(i, j)] += (c - 1.0) * (e1i * e1j + w[i] * w[j]) + s * (e1i * w[j] - w[i] * e1j);
        }
    }
    r
}

/// Lower-right `(d-1)×(d-1)` block of `R 𝒬 Rᵀ` and its determinant (1 for d = 1).
pub fn reduced_matrix(q_full: &DMatrix<f64>, rotation: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let d = q_full.nrows();
    let rotated = rotation * q_full * rotation.transpose();
    let block = rotated.view((1, 1), (d - 1, d - 1)).into_owned();
    let det = if d == 1 { 1.0 } else { block.determinant() };
    (block, det)
}

/// The twisted (exponentially tilted) law `exp(α·k) μ(k)`, renormalised by
/// `P(α)` so that it is a probability measure to machine precision.
pub fn twisted_measure(measure: &JumpMeasure, alpha: &[f64]) -> Result<JumpMeasure> {
    let p = eval_p(measure, alpha);
    if (p - 1.0).abs() > 1e-10 {
        return Err(GenfunError::NotOnBoundary((p - 1.0).abs()));
    }
    let steps = measure
        .steps()
        .iter()
        .map(|s| Step { v: s.v.clone(), p: s.p * exp_dot(alpha, &s.v) / p })
        .collect();
    Ok(JumpMeasure::new(measure.dim(), steps)?)
}

/// Everything attached to the boundary point `α(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub u: Vec<f64>,
    pub alpha: Vec<f64>,
    pub r: Vec<f64>,
    pub lambda: f64,
    pub drift: Vec<f64>,
    pub q_full: DMatrix<f64>,
    pub rotation: DMatrix<f64>,
    pub q_reduced: DMatrix<f64>,
    pub det_q_reduced: f64,
}

impl BoundaryData {
    fn assemble(measure: &JumpMeasure, u: &[f64], alpha: Vec<f64>) -> Self {
        let drift = grad_p(measure, &alpha);
        let lambda = norm(&drift);
        let q_full = second_moments(measure, &alpha);
        let rotation = rotation_to_e1(u);
        let (q_reduced, det_q_reduced) = reduced_matrix(&q_full, &rotation);
        Self {
            u: u.to_vec(),
            r: alpha.iter().map(|a| a.exp()).collect(),
            alpha,
            lambda,
            drift,
            q_full,
            rotation,
            q_reduced,
            det_q_reduced,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn drift_norm(&self) -> f64 {
        self.lambda
    }

    /// Distance between the normalised drift and `u`.
    pub fn direction_error(&self) -> f64 {
        self.drift
            .iter()
            .zip(&self.u)
            .map(|(m, u)| (m / self.lambda - u).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl Serialize for BoundaryData {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("BoundaryData", 9)?;
        s.serialize_field("u", &self.u)?;
        s.serialize_field("alpha", &self.alpha)?;
        s.serialize_field("r", &self.r)?;
        s.serialize_field("drift", &self.drift)?;
        s.serialize_field("drift_norm", &self.lambda)?;
        s.serialize_field("q_full", &rows(&self.q_full))?;
        s.serialize_field("rotation", &rows(&self.rotation))?;
        s.serialize_field("q_reduced", &rows(&self.q_reduced))?;
        s.serialize_field("det_q", &self.det_q_reduced)?;
        s.end()
    }
}

/// Solves `∇P(α) = λu`, `P(α) = 1`, `λ > 0`.
///
/// Pipeline: interior minimiser, coarse ray scan from it, Newton polish on the
/// bordered `(d+1)` system. If Newton stalls the scan is refined around the
/// best ray and Newton restarted.
pub fn solve_alpha(measure: &JumpMeasure, u: &[f64], tol: f64) -> Result<BoundaryData> {
    solve_alpha_with(measure, u, &SolverOptions { tol, ..SolverOptions::default() })
}

pub fn solve_alpha_with(
    measure: &JumpMeasure,
    u: &[f64],
    opts: &SolverOptions,
) -> Result<BoundaryData> {
    let d = measure.dim();
    let un = norm(u);
    if u.len() != d || (un - 1.0).abs() > 1e-9 {
        return Err(GenfunError::BadDirection { dim: d, norm: un });
    }
    let u: Vec<f64> = u.iter().map(|x| x / un).collect();
    let center = find_interior_min(measure)?;

    let score = |dir: &[f64]| -> Result<(f64, Vec<f64>)> {
        let b = ray_to_boundary(measure, &center, dir)?;
        let g = grad_p(measure, &b);
        Ok((dot(&g, &u) / norm(&g), b))
    };

    let mut best_dir = u.clone();
    let (mut best_score, mut best_point) = score(&u)?;
    for dir in scan_directions(d, opts.scan) {
        let (s, b) = score(&dir)?;
        if s > best_score {
            best_score = s;
            best_point = b;
            best_dir = dir;
        }
    }

    let mut spread = if d == 1 { 0.0 } else { 2.0 * PI / opts.scan as f64 };
    for _restart in 0..8 {
        if let Some(alpha) = newton_polish(measure, &u, &best_point, opts) {
            let bd = BoundaryData::assemble(measure, &u, alpha);
            let p_err = (eval_p(measure, &bd.alpha) - 1.0).abs();
            if p_err <= opts.tol && bd.direction_error() <= opts.angle_tol {
                return Ok(bd);
            }
        }
        if d == 1 {
            break;
        }
        // Refine the ray around the current best direction.
        let mut improved_dir = best_dir.clone();
        for probe in local_probes(&best_dir, spread, opts.scan) {
            let (s, b) = score(&probe)?;
            if s > best_score {
                best_score = s;
                best_point = b;
                improved_dir = probe;
            }
        }
        best_dir = improved_dir;
        spread *= 0.25;
    }
    Err(GenfunError::NonConvergence(format!(
        "boundary point for u = {u:?}: best alignment {best_score}"
    )))
}

fn local_probes(center: &[f64], spread: f64, count: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    let mut out = Vec::new();
    for (j, dir) in scan_directions(d, count).into_iter().enumerate() {
        let scale = spread * (1.0 + (j % 4) as f64) / 4.0;
        let v: Vec<f64> = center.iter().zip(&dir).map(|(c, e)| c + scale * e).collect();
        let nv = norm(&v);
        out.push(v.iter().map(|x| x / nv).collect());
    }
    out
}

/// Damped Newton on `F(α, λ) = (∇P(α) - λu, P(α) - 1)`.
fn newton_polish(
    measure: &JumpMeasure,
    u: &[f64],
    start: &[f64],
    opts: &SolverOptions,
) -> Option<Vec<f64>> {
    let d = u.len();
    let residual = |alpha: &[f64], lambda: f64| -> DVector<f64> {
        let g = grad_p(measure, alpha);
        let mut f = DVector::zeros(d + 1);
        for i in 0..d {
            f[i] = g[i] - lambda * u[i];
        }
        f[d] = eval_p(measure, alpha) - 1.0;
        f
    };
    let mut alpha = start.to_vec();
    let mut lambda = dot(&grad_p(measure, &alpha), u).max(1e-12);
    let mut f = residual(&alpha, lambda);
    for _ in 0..opts.max_iter {
        if f.norm() <= 1e-15 {
            break;
        }
        let h = hess_p(measure, &alpha);
        let g = grad_p(measure, &alpha);
        let mut jac = DMatrix::zeros(d + 1, d + 1);
        for i in 0..d {
            for j in 0..d {
                jac[(i, j)] = h[(i, j)];
            }
            jac[(i, d)] = -u[i];
            jac[(d, i)] = g[i];
        }
        let delta = jac.lu().solve(&f)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..d).map(|i| alpha[i] - t * delta[i]).collect();
            let tl = lambda - t * delta[d];
            let tf = residual(&trial, tl);
            if tl > 0.0 && tf.norm() < f.norm() {
                alpha = trial;
                lambda = tl;
                f = tf;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if lambda > 0.0 && f.norm().is_finite() {
        Some(alpha)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{m0, m1_measure};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Closed-form oracle for M1 at u = e1: ∂P/∂α₂ = 0 gives e^{2α₂} = 2/3,
    /// then 0.4y² − (1 − 2√0.06)y + 0.1 = 0 in y = e^{α₁}, larger root.
    fn m1_e1_oracle() -> (f64, f64) {
        let b = 0.5 * (2.0f64 / 3.0).ln();
        let c = 1.0 - 2.0 * 0.06f64.sqrt();
        let y = (c + (c * c - 0.16).sqrt()) / 0.8;
        (y.ln(), b)
    }

    fn swap_symmetric() -> JumpMeasure {
        JumpMeasure::from_pairs(
            2,
            &[(&[1, 0], 0.35), (&[0, 1], 0.35), (&[-1, 0], 0.15), (&[0, -1], 0.15)],
        )
        .unwrap()
    }

    #[test]
    fn eval_p_examples() {
        let m0 = m0().measure;
        assert_abs_diff_eq!(eval_p(&m0, &[0.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval_p(&m0, &[-(2.0f64).ln()]), 1.0, epsilon = 1e-15);
        let (a1, a2) = m1_e1_oracle();
        assert_abs_diff_eq!(eval_p(&m1_measure(), &[a1, a2]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_and_hessian_at_origin() {
        let m1 = m1_measure();
        let g = grad_p(&m1, &[0.0, 0.0]);
        assert_abs_diff_eq!(g[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.1, epsilon = 1e-15);
        let h = hess_p(&m1, &[0.0, 0.0]);
        assert_abs_diff_eq!(h, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]), epsilon = 1e-15);
        assert_abs_diff_eq!(grad_p(&m0().measure, &[0.0])[0], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn interior_minimisers() {
        let a = find_interior_min(&m0().measure).unwrap();
        assert_abs_diff_eq!(a[0], 0.5 * 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(eval_p(&m0().measure, &a), 2.0 * 2f64.sqrt() / 3.0, epsilon = 1e-12);

        let m1 = m1_measure();
        let a = find_interior_min(&m1).unwrap();
        assert_abs_diff_eq!(a[0], 0.5 * 0.25f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.5 * (2.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(eval_p(&m1, &a), 0.4 + 2.0 * 0.06f64.sqrt(), epsilon = 1e-12);

        let s = find_interior_min(&swap_symmetric()).unwrap();
        assert_abs_diff_eq!(s[0], s[1], epsilon = 1e-14);
    }

    #[test]
    fn solve_alpha_m0() {
        let bd = solve_alpha(&m0().measure, &[1.0], 1e-10).unwrap();
        assert_abs_diff_eq!(bd.alpha[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(bd.lambda, 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(bd.drift[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_eq!(bd.q_reduced.nrows(), 0);
        assert_eq!(bd.det_q_reduced, 1.0);

        let down = solve_alpha(&m0().measure, &[-1.0], 1e-10).unwrap();
        assert_abs_diff_eq!(down.alpha[0], -(2.0f64).ln(), epsilon = 1e-14);
    }

    #[test]
    fn solve_alpha_m1_e1_matches_oracle() {
        let (a1, a2) = m1_e1_oracle();
        let bd = solve_alpha(&m1_measure(), &[1.0, 0.0], 1e-10).unwrap();
        assert_abs_diff_eq!(bd.alpha[0], a1, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.alpha[1], a2, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.alpha[0], 0.0327725, epsilon = 1e-7);
        assert_abs_diff_eq!(bd.alpha[1], -0.2027326, epsilon = 1e-7);
        let y = a1.exp();
        assert_abs_diff_eq!(bd.drift[0], 0.4 * y - 0.1 / y, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.drift[0], 0.3165503, epsilon = 1e-7);
        assert_abs_diff_eq!(bd.drift[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.q_full[(0, 0)], 0.5101021, epsilon = 1e-7);
        assert_abs_diff_eq!(bd.q_full[(1, 1)], 0.4898979, epsilon = 1e-7);
        assert_abs_diff_eq!(bd.rotation, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(bd.det_q_reduced, 0.4898979, epsilon = 1e-7);
    }

    #[test]
    fn symmetric_direction_gives_symmetric_alpha() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bd = solve_alpha(&swap_symmetric(), &[s, s], 1e-10).unwrap();
        assert_abs_diff_eq!(bd.alpha[0], bd.alpha[1], epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(matches!(
            solve_alpha(&m1_measure(), &[1.0, 1.0], 1e-10),
            Err(GenfunError::BadDirection { .. })
        ));
    }

    #[test]
    fn twisted_measure_examples() {
        let m0 = m0().measure;
        assert_eq!(twisted_measure(&m0, &[0.0]).unwrap().steps(), m0.steps());
        let t = twisted_measure(&m0, &[-(2.0f64).ln()]).unwrap();
        assert_abs_diff_eq!(t.steps()[0].p, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.steps()[1].p, 2.0 / 3.0, epsilon = 1e-15);

        let bd = solve_alpha(&m1_measure(), &[1.0, 0.0], 1e-10).unwrap();
        let t = twisted_measure(&m1_measure(), &bd.alpha).unwrap();
        let mean = t.mean();
        assert_abs_diff_eq!(mean[0], bd.drift[0], epsilon = 1e-12);
        assert_abs_diff_eq!(mean[1], 0.0, epsilon = 1e-12);
        assert!(matches!(
            twisted_measure(&m1_measure(), &[0.3, 0.3]),
            Err(GenfunError::NotOnBoundary(_))
        ));
    }

    #[test]
    fn rotation_examples() {
        assert_abs_diff_eq!(rotation_to_e1(&[1.0, 0.0, 0.0]), DMatrix::identity(3, 3));
        let r = rotation_to_e1(&[0.0, 1.0]);
        assert_abs_diff_eq!(r, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), epsilon = 1e-15);
        let r = rotation_to_e1(&[-1.0, 0.0, 0.0]);
        let v = &r * DVector::from_column_slice(&[-1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(v, DVector::from_column_slice(&[1.0, 0.0, 0.0]));
        assert_abs_diff_eq!(r.determinant(), 1.0);
        assert_eq!(rotation_to_e1(&[-1.0])[(0, 0)], -1.0);
    }

    #[test]
    fn reduced_det_invariant_under_choice_of_rotation_at_minus_e1() {
        // Any rotation sending -e1 to e1 changes Q_u by an orthogonal conjugation.
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.1]);
        let (_, det_a) = reduced_matrix(&q, &rotation_to_e1(&[-1.0, 0.0, 0.0]));
        let alt = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, 1.0, -1.0]));
        let (_, det_b) = reduced_matrix(&q, &alt);
        assert_abs_diff_eq!(det_a, det_b, epsilon = 1e-14);
    }

    #[test]
    fn reduced_matrix_examples() {
        let (b, det) = reduced_matrix(&DMatrix::from_element(1, 1, 3.0), &DMatrix::identity(1, 1));
        assert_eq!((b.nrows(), det), (0, 1.0));
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 2.0, 3.0]));
        let (b, det) = reduced_matrix(&q, &DMatrix::identity(3, 3));
        assert_abs_diff_eq!(b, DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0])));
        assert_abs_diff_eq!(det, 6.0);
    }

    #[test]
    fn second_moment_examples() {
        assert_abs_diff_eq!(second_moments(&m0().measure, &[0.0])[(0, 0)], 1.0);
    }

    fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
            .prop_map(|v| {
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
    }

    fn m3() -> JumpMeasure {
        JumpMeasure::from_pairs(
            3,
            &[
                (&[1, 0, 0], 0.25),
                (&[-1, 0, 0], 0.1),
                (&[0, 1, 0], 0.2),
                (&[0, -1, 0], 0.15),
                (&[0, 0, 1], 0.1),
                (&[0, 0, -1], 0.1),
                (&[1, 1, 1], 0.1),
            ],
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn log_convexity(a in prop::collection::vec(-2.0f64..2.0, 2),
                         b in prop::collection::vec(-2.0f64..2.0, 2)) {
            let m = m1_measure();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            prop_assert!(eval_p(&m, &mid).ln()
                <= 0.5 * (eval_p(&m, &a).ln() + eval_p(&m, &b).ln()) + 1e-12);
        }

        #[test]
        fn gauss_map_left_inverse(u in unit_vec(2)) {
            let bd = solve_alpha(&m1_measure(), &u, 1e-10).unwrap();
            prop_assert!((eval_p(&m1_measure(), &bd.alpha) - 1.0).abs() <= 1e-10);
            prop_assert!(bd.direction_error() <= 1e-8);
            let t = twisted_measure(&m1_measure(), &bd.alpha).unwrap();
            let mean = t.mean();
            let mn = norm(&mean);
            prop_assert!(mean.iter().zip(&u).all(|(m, u)| (m / mn - u).abs() <= 1e-8));
        }

        #[test]
        fn gauss_map_in_three_dimensions(u in unit_vec(3)) {
            let bd = solve_alpha(&m3(), &u, 1e-10).unwrap();
            prop_assert!((eval_p(&m3(), &bd.alpha) - 1.0).abs() <= 1e-10);
            prop_assert!(bd.direction_error() <= 1e-8);
            prop_assert!(bd.det_q_reduced > 0.0);
            let (q, _) = reduced_matrix(&bd.q_full, &bd.rotation);
            prop_assert!((q - &bd.q_reduced).abs().max() <= 1e-12);
        }

        #[test]
        fn support_function_maximality(u in unit_vec(2), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let m = m1_measure();
            let bd = solve_alpha(&m, &u, 1e-10).unwrap();
            let center = find_interior_min(&m).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let top = dot(&bd.alpha, &u);
            for _ in 0..500 {
                let th: f64 = rng.gen_range(0.0..2.0 * PI);
                let dir = [th.cos(), th.sin()];
                let t = ray_to_level(&m, &center, &dir, 1.0).unwrap() * rng.gen_range(0.0..=1.0);
                let beta = [center[0] + t * dir[0], center[1] + t * dir[1]];
                prop_assert!(dot(&beta, &u) <= top + 1e-10);
            }
        }

        #[test]
        fn rotations_are_proper(d in 1usize..=4, raw in prop::collection::vec(-1.0f64..1.0, 4)) {
            let v = &raw[..d];
            prop_assume!(norm(v) > 1e-3);
            let u: Vec<f64> = v.iter().map(|x| x / norm(v)).collect();
            let r = rotation_to_e1(&u);
            let id = &r * r.transpose();
            prop_assert!((id - DMatrix::<f64>::identity(d, d)).abs().max() <= 1e-12);
            let ru = &r * DVector::from_column_slice(&u);
            prop_assert!((ru[0] - 1.0).abs() <= 1e-10);
            prop_assert!(ru.iter().skip(1).all(|x| x.abs() <= 1e-10));
            if d > 1 {
                prop_assert!((r.determinant() - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn trace_dominates_squared_drift(u in unit_vec(2)) {
            let bd = solve_alpha(&m1_measure(), &u, 1e-10).unwrap();
            prop_assert!(bd.q_full.trace() >= bd.lambda * bd.lambda);
        }
    }
}
