//! Generating functions of the killed walk: `𝒫`, truncated `F_k` and `H_k`,
//! the functional equation and torus quadrature for Green functions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::genfun::{eval_p, find_interior_min, GenfunError};
use crate::green::{self, Certifier, DpOptions, DpRun, ExitLaw, GreenError};
use crate::model::{JumpMeasure, LatticeWindow, ModelError, WalkModel};

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("point lies outside the open domain: P(|x|) = {p_abs} (need < 1 and |x_i| > 0)")]
    OutsideDomain { p_abs: f64 },
    #[error("invalid torus grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Green(#[from] GreenError),
    #[error(transparent)]
    Genfun(#[from] GenfunError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SeriesError>;

/// `x^m` for integer (possibly negative) exponents.
pub fn monomial(x: &[Complex64], m: &[i64]) -> Complex64 {
    x.iter()
        .zip(m)
        .fold(Complex64::new(1.0, 0.0), |acc, (xi, &e)| acc * xi.powi(e as i32))
}

/// `𝒫(x) = Σ μ(s) x^s`.
pub fn eval_calp(measure: &JumpMeasure, x: &[Complex64]) -> Complex64 {
    measure.steps().iter().map(|s| s.p * monomial(x, &s.v)).sum()
}

fn modulus(x: &[Complex64]) -> Vec<f64> {
    x.iter().map(|z| z.norm()).collect()
}

fn check_domain(measure: &JumpMeasure, x: &[Complex64]) -> Result<Vec<f64>> {
    let r = modulus(x);
    if r.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(SeriesError::OutsideDomain { p_abs: f64::INFINITY });
    }
    let gamma: Vec<f64> = r.iter().map(|v| v.ln()).collect();
    let p_abs = eval_p(measure, &gamma);
    if p_abs >= 1.0 {
        return Err(SeriesError::OutsideDomain { p_abs });
    }
    Ok(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncatedSum {
    pub re: f64,
    pub im: f64,
    /// Mass whose contribution is missing from the sum.
    pub truncation_mass: f64,
}

impl TruncatedSum {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

fn sum_terms<'a>(terms: impl Iterator<Item = (&'a Vec<i64>, f64)>, x: &[Complex64]) -> Complex64 {
    terms.map(|(m, w)| w * monomial(x, m)).sum()
}

/// Truncated `F_k(x) = Σ exit(m) x^m`.
pub fn eval_f_truncated(exit: &ExitLaw, x: &[Complex64]) -> TruncatedSum {
    let v = sum_terms(exit.entries.iter().map(|(m, &w)| (m, w)), x);
    TruncatedSum { re: v.re, im: v.im, truncation_mass: exit.truncation_bound }
}

/// Truncated `H_k(x) = Σ G(k, m) x^m` from a DP run.
pub fn eval_h_truncated(run: &DpRun, x: &[Complex64]) -> TruncatedSum {
    let table = run.visit_table();
    let v = sum_terms(table.iter().map(|(m, w)| (m, *w)), x);
    TruncatedSum { re: v.re, im: v.im, truncation_mass: run.residue_mass() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeCheck {
    pub residual: f64,
    /// `Σ_discarded w |x|^z + 𝒫(|x|) Σ_live w |x|^z`, plus rounding slack.
    pub bound: f64,
    pub p_abs: f64,
    pub window_half: i64,
    pub tol: f64,
}

/// `|H_k(x)(1 - 𝒫(x)) - x^k + F_k(x)|` for DP-truncated `H` and `F`.
///
/// For the truncated sums the left side equals `|D(x) + 𝒫(x) L(x)|`, the
/// transforms of the discarded and the final live mass, which gives the bound.
pub fn functional_eq_residual(
    model: &WalkModel,
    k: &[i64],
    x: &[Complex64],
    window: &LatticeWindow,
    opts: impl Into<DpOptions>,
) -> Result<FeCheck> {
    let opts = opts.into();
    if x.len() != model.dim() {
        return Err(ModelError::DimensionMismatch { expected: model.dim(), got: x.len() }.into());
    }
    let gamma = check_domain(&model.measure, x)?;
    let run = green::killed_run(model, k, window, &opts)?;
    let cert = Certifier::for_model(model)?;
    let exit = ExitLaw::from_run(&run, &cert)?;
    let h = eval_h_truncated(&run, x).value();
    let f = eval_f_truncated(&exit, x).value();
    let calp = eval_calp(&model.measure, x);
    let xk = monomial(x, k);
    let residual = (h * (1.0 - calp) - xk + f).norm();

    let p_abs = eval_p(&model.measure, &gamma);
    let weight = |list: &[(Vec<i64>, f64)]| -> f64 {
        list.iter()
            .map(|(z, w)| {
                let e: f64 = gamma.iter().zip(z).map(|(g, &c)| g * c as f64).sum();
                w * e.exp()
            })
            .sum()
    };
    let scale = h.norm() * (1.0 + calp.norm()) + xk.norm() + f.norm();
    let bound = weight(&run.discarded) + p_abs * weight(&run.live) + 1e-13 * scale;
    Ok(FeCheck { residual, bound, p_abs, window_half: window.hi()[0], tol: opts.tol })
}

/// Equispaced torus grid `x_j = r_j e^{i s_j}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TorusGrid {
    pub d: usize,
    pub n_per_axis: usize,
    pub base: Vec<f64>,
}

impl TorusGrid {
    pub fn new(measure: &JumpMeasure, n_per_axis: usize, base: Vec<f64>) -> Result<Self> {
        if !n_per_axis.is_power_of_two() || n_per_axis < 2 {
            return Err(SeriesError::BadGrid(format!("n_per_axis = {n_per_axis} is not a power of two ≥ 2")));
        }
        if base.len() != measure.dim() {
            return Err(ModelError::DimensionMismatch { expected: measure.dim(), got: base.len() }.into());
        }
        if base.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
            return Err(SeriesError::BadGrid("base radii must be positive".into()));
        }
        let gamma: Vec<f64> = base.iter().map(|r| r.ln()).collect();
        let p = eval_p(measure, &gamma);
        if p >= 1.0 - 1e-9 {
            return Err(SeriesError::BadGrid(format!("P(ln base) = {p} is not below 1 - 1e-9")));
        }
        if measure.dim() == 4 {
            eprintln!("warning: 4-dimensional torus quadrature with {} nodes", n_per_axis.pow(4));
        }
        Ok(Self { d: measure.dim(), n_per_axis, base })
    }

    /// Grid through `exp(α*)`, the interior minimiser of `P`.
    pub fn centered(measure: &JumpMeasure, n_per_axis: usize) -> Result<Self> {
        let a = find_interior_min(measure)?;
        Self::new(measure, n_per_axis, a.iter().map(|v| v.exp()).collect())
    }

    pub fn nodes(&self) -> usize {
        self.n_per_axis.pow(self.d as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureValue {
    pub value: f64,
    pub imag: f64,
}

struct Phases {
    n: usize,
    roots: Vec<Complex64>,
}

impl Phases {
    fn new(n: usize) -> Self {
        let roots = (0..n)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / n as f64))
            .collect();
        Self { n, roots }
    }

    /// `e^{i s·v}` at node `idx`.
    fn at(&self, idx: &[usize], v: &[i64]) -> Complex64 {
        let n = self.n as i64;
        let e: i64 = idx.iter().zip(v).map(|(&j, &c)| (j as i64 * c).rem_euclid(n)).sum();
        self.roots[e.rem_euclid(n) as usize]
    }
}

/// A sum of weighted monomials `Σ c_v x^v` restricted to a torus.
struct TorusPoly {
    terms: Vec<(Vec<i64>, f64)>,
}

impl TorusPoly {
    fn new(base: &[f64], terms: impl Iterator<Item = (Vec<i64>, f64)>) -> Self {
        let terms = terms
            .map(|(v, c)| {
                let r: f64 = base.iter().zip(&v).map(|(b, &e)| b.powi(e as i32)).product();
                (v, c * r)
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, phases: &Phases, idx: &[usize]) -> Complex64 {
        self.terms.iter().map(|(v, c)| *c * phases.at(idx, v)).sum()
    }
}

/// Trapezoid mean of `f` over the torus, rows in parallel and summed in order.
fn torus_mean<F>(grid: &TorusGrid, f: F) -> Complex64
where
    F: Fn(&[usize]) -> Complex64 + Sync,
{
    let n = grid.n_per_axis;
    let per_row = n.pow(grid.d as u32 - 1);
    let rows: Vec<Complex64> = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut idx = vec![0usize; grid.d];
            idx[0] = first;
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..per_row {
                let mut rest = r;
                for axis in (1..grid.d).rev() {
                    idx[axis] = rest % n;
                    rest /= n;
                }
                acc += f(&idx);
            }
            acc
        })
        .collect();
    rows.into_iter().sum::<Complex64>() / grid.nodes() as f64
}

/// `(2π)^{-d} ∫ x^{k-m} / (1 - 𝒫(x)) ds` on the torus through `grid.base`:
/// the free Green function `Σ_n p_n(k, m)`.
pub fn free_green_quadrature(
    measure: &JumpMeasure,
    k: &[i64],
    m: &[i64],
    grid: &TorusGrid,
) -> Result<QuadratureValue> {
    let grid = TorusGrid::new(measure, grid.n_per_axis, grid.base.clone())?;
    let phases = Phases::new(grid.n_per_axis);
    let calp = TorusPoly::new(&grid.base, measure.steps().iter().map(|s| (s.v.clone(), s.p)));
    let diff: Vec<i64> = k.iter().zip(m).map(|(a, b)| a - b).collect();
    let numer = TorusPoly::new(&grid.base, std::iter::once((diff, 1.0)));
    let v = torus_mean(&grid, |idx| numer.eval(&phases, idx) / (1.0 - calp.eval(&phases, idx)));
    Ok(QuadratureValue { value: v.re, imag: v.im })
}

/// `(2π)^{-d} ∫ (x^k - F_k(x)) x^{-m} / (1 - 𝒫(x)) ds`: the killed Green function.
pub fn killed_green_quadrature(
    model: &WalkModel,
    k: &[i64],
    m: &[i64],
    grid: &TorusGrid,
    exit: &ExitLaw,
) -> Result<QuadratureValue> {
    let grid = TorusGrid::new(&model.measure, grid.n_per_axis, grid.base.clone())?;
    let phases = Phases::new(grid.n_per_axis);
    let calp = TorusPoly::new(&grid.base, model.measure.steps().iter().map(|s| (s.v.clone(), s.p)));
    let shift = |v: &[i64]| -> Vec<i64> { v.iter().zip(m).map(|(a, b)| a - b).collect() };
    let numer = TorusPoly::new(
        &grid.base,
        std::iter::once((shift(k), 1.0)).chain(exit.entries.iter().map(|(z, &w)| (shift(z), -w))),
    );
    let v = torus_mean(&grid, |idx| numer.eval(&phases, idx) / (1.0 - calp.eval(&phases, idx)));
    Ok(QuadratureValue { value: v.re, imag: v.im })
}
