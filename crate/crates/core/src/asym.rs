//! Asymptotics of `G_C(k, m)` along rays: predictions, Martin kernel ratios
//! and empirical ray studies that pick the prefactor.

use std::f64::consts::PI;

use serde::Serialize;
use thiserror::Error;

use crate::genfun::{solve_alpha, BoundaryData, GenfunError};
use crate::green::{
    self, series_h, Certifier, DpOptions, DpRun, ExitLaw, GreenError, GreenEstimate,
};
use crate::model::{Cone, LatticeWindow, ModelError, Point, WalkModel};

#[derive(Debug, Error)]
pub enum AsymError {
    #[error("direction {0:?} is not in the cone")]
    DirectionOutsideCone(Vec<f64>),
    #[error("boundary data solved at {solved:?}, but m/|m| = {expected:?}")]
    BoundaryMismatch { solved: Vec<f64>, expected: Vec<f64> },
    #[error("h_k must be positive, got {0:e}")]
    NonPositiveHarmonic(f64),
    #[error("radii must be positive and strictly increasing")]
    RadiiOrder,
    #[error("no point of E within one lattice step of R·u for R = {0}")]
    NoLatticePoint(f64),
    #[error("denominator Green value is zero")]
    ZeroDenominator,
    #[error("unstable study: {0}")]
    Unstable(String),
    #[error(transparent)]
    Green(#[from] GreenError),
    #[error(transparent)]
    Genfun(#[from] GenfunError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AsymError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Paper,
    Lclt,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Paper, Variant::Lclt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Paper => "paper",
            Variant::Lclt => "lclt",
        }
    }

    /// Constant in front of `h_k (2π|m|)^{-(d-1)/2} exp(-α·m)`.
    pub fn constant(self, boundary: &BoundaryData) -> f64 {
        let d = boundary.dim() as f64;
        let drift = boundary.drift_norm();
        let det = boundary.det_q_reduced;
        match self {
            Variant::Paper => det.sqrt() / drift,
            Variant::Lclt => drift.powf((d - 3.0) / 2.0) / det.sqrt(),
        }
    }
}

fn norm_i(m: &[i64]) -> f64 {
    m.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

fn dot_i(a: &[f64], m: &[i64]) -> f64 {
    a.iter().zip(m).map(|(x, &y)| x * y as f64).sum()
}

/// `(2π|m|)^{(d-1)/2} exp(α·m)`: the factor removed from `G` to expose the constant.
pub fn scale_factor(boundary: &BoundaryData, m: &[i64]) -> f64 {
    let d = m.len() as f64;
    (2.0 * PI * norm_i(m)).powf((d - 1.0) / 2.0) * dot_i(&boundary.alpha, m).exp()
}

pub fn unit(m: &[i64]) -> Vec<f64> {
    let n = norm_i(m);
    m.iter().map(|&x| x as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub value: f64,
    pub variant: Variant,
    pub boundary: BoundaryData,
    pub h_k: f64,
    pub m: Point,
    pub k: Point,
}

impl Prediction {
    pub fn recompute(&self) -> f64 {
        self.h_k * self.variant.constant(&self.boundary) / scale_factor(&self.boundary, &self.m)
    }
}

pub fn predict_green(
    cone: &Cone,
    boundary: &BoundaryData,
    h_k: f64,
    k: &[i64],
    m: &[i64],
    variant: Variant,
) -> Result<Prediction> {
    let um = unit(m);
    if !cone.contains(&um)? {
        return Err(AsymError::DirectionOutsideCone(um));
    }
    let off: f64 = um.iter().zip(&boundary.u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if off > 1e-9 {
        return Err(AsymError::BoundaryMismatch { solved: boundary.u.clone(), expected: um });
    }
    if h_k.is_nan() || h_k <= 0.0 {
        return Err(AsymError::NonPositiveHarmonic(h_k));
    }
    let mut p = Prediction {
        value: 0.0,
        variant,
        boundary: boundary.clone(),
        h_k,
        m: m.to_vec(),
        k: k.to_vec(),
    };
    p.value = p.recompute();
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartinValue {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `G(k, m) / G(k0, m)` with the interval implied by both error bars.
pub fn martin_kernel(g_km: &GreenEstimate, g_k0m: &GreenEstimate) -> Result<MartinValue> {
    if g_k0m.value <= 0.0 {
        return Err(AsymError::ZeroDenominator);
    }
    let value = g_km.value / g_k0m.value;
    let (n_lo, n_hi, d_lo, d_hi) = match (&g_km.error, &g_k0m.error) {
        (green::ErrorBar::Bound { bound: a }, green::ErrorBar::Bound { bound: b }) => {
            (g_km.value, g_km.value + a, g_k0m.value, g_k0m.value + b)
        }
        _ => (
            g_km.value - g_km.spread(),
            g_km.value + g_km.spread(),
            g_k0m.value - g_k0m.spread(),
            g_k0m.value + g_k0m.spread(),
        ),
    };
    let upper = if d_lo > 0.0 { n_hi / d_lo } else { f64::INFINITY };
    Ok(MartinValue { value, lower: n_lo.max(0.0) / d_hi, upper })
}

/// Nearest point of `E` to `R·u`: componentwise rounding, then the closest
/// point of `E` in the surrounding `3^d` block (lexicographic tie-break).
pub fn nearest_in_e(model: &WalkModel, target: &[f64]) -> Option<Point> {
    let base: Point = target.iter().map(|x| x.round() as i64).collect();
    if model.in_e(&base) {
        return Some(base);
    }
    let d = base.len();
    let mut best: Option<(f64, Point)> = None;
    for code in 0..3usize.pow(d as u32) {
        let mut c = code;
        let mut p = base.clone();
        for axis in (0..d).rev() {
            p[axis] += (c % 3) as i64 - 1;
            c /= 3;
        }
        if !model.in_e(&p) {
            continue;
        }
        let dist: f64 = p.iter().zip(target).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
        let better = match &best {
            None => true,
            Some((bd, bp)) => dist < *bd || (dist == *bd && p < *bp),
        };
        if better {
            best = Some((dist, p));
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WindowPolicy {
    /// Window `[-half, half]^d`.
    Fixed(i64),
    /// `half = 2·max radius + margin`.
    Auto { margin: i64 },
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::Auto { margin: 20 }
    }
}

impl WindowPolicy {
    pub fn half(&self, max_radius: f64) -> i64 {
        match *self {
            WindowPolicy::Fixed(h) => h,
            WindowPolicy::Auto { margin } => 2 * max_radius.ceil() as i64 + margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub radius: f64,
    pub m: Point,
    pub g: GreenEstimate,
    pub pred_paper: f64,
    pub pred_lclt: f64,
    pub c_emp: f64,
    pub h_k: f64,
    pub h_bound: f64,
    pub boundary: BoundaryData,
}

impl StudyRow {
    pub fn prediction(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Paper => self.pred_paper,
            Variant::Lclt => self.pred_lclt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub k: Point,
    pub u: Vec<f64>,
    pub window_half: i64,
    pub tol: f64,
    pub rows: Vec<StudyRow>,
}

pub const CSV_FIXED: [&str; 8] =
    ["g_value", "g_bound", "pred_paper", "pred_lclt", "c_emp", "h_k", "det_q", "drift_norm"];

impl StudyTable {
    pub fn csv_header(d: usize) -> Vec<String> {
        let mut h = vec!["R".to_string()];
        h.extend((1..=d).map(|i| format!("m_{i}")));
        h.extend(CSV_FIXED[..6].iter().map(|s| s.to_string()));
        h.extend((1..=d).map(|i| format!("alpha_{i}")));
        h.extend(CSV_FIXED[6..].iter().map(|s| s.to_string()));
        h
    }

    /// CSV records in header order, floats rendered by `fmt`.
    pub fn csv_records(&self, fmt: impl Fn(f64) -> String) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![fmt(r.radius)];
                rec.extend(r.m.iter().map(|x| x.to_string()));
                for v in [r.g.value, r.g.spread(), r.pred_paper, r.pred_lclt, r.c_emp, r.h_k] {
                    rec.push(fmt(v));
                }
                rec.extend(r.boundary.alpha.iter().map(|&a| fmt(a)));
                rec.push(fmt(r.boundary.det_q_reduced));
                rec.push(fmt(r.boundary.drift_norm()));
                rec
            })
            .collect()
    }
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() || radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AsymError::RadiiOrder);
    }
    Ok(())
}

/// Lattice targets along the ray, one per radius.
pub fn ray_points(model: &WalkModel, u: &[f64], radii: &[f64]) -> Result<Vec<Point>> {
    check_radii(radii)?;
    radii
        .iter()
        .map(|&r| {
            let t: Vec<f64> = u.iter().map(|x| r * x).collect();
            nearest_in_e(model, &t).ok_or(AsymError::NoLatticePoint(r))
        })
        .collect()
}

fn normalized(u: &[f64]) -> Vec<f64> {
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter().map(|x| x / n).collect()
}

/// Row data from a DP run from `k` (which yields both `G(k, ·)` and the exit law).
fn study_row(
    model: &WalkModel,
    run: &DpRun,
    exit: &ExitLaw,
    cert: &Certifier<'_>,
    radius: f64,
    m: &[i64],
    tol: f64,
) -> Result<StudyRow> {
    let bd = solve_alpha(&model.measure, &unit(m), 1e-12)?;
    let h = series_h(exit, cert, &bd.alpha)?;
    let g = green::green_from_run(run, cert, m, tol);
    let paper = predict_green(&model.cone, &bd, h.value, &run.start, m, Variant::Paper)?;
    let lclt = predict_green(&model.cone, &bd, h.value, &run.start, m, Variant::Lclt)?;
    Ok(StudyRow {
        radius,
        m: m.to_vec(),
        c_emp: g.value * scale_factor(&bd, m) / h.value,
        g,
        pred_paper: paper.value,
        pred_lclt: lclt.value,
        h_k: h.value,
        h_bound: h.bound,
        boundary: bd,
    })
}

/// Green values along the ray `R·u` together with both predictions.
pub fn ray_study(
    model: &WalkModel,
    k: &[i64],
    u: &[f64],
    radii: &[f64],
    policy: WindowPolicy,
    tol: f64,
) -> Result<StudyTable> {
    let u = normalized(u);
    if !model.cone.contains(&u)? {
        return Err(AsymError::DirectionOutsideCone(u));
    }
    let points = ray_points(model, &u, radii)?;
    let half = policy.half(*radii.last().unwrap());
    let window = LatticeWindow::centered(model.dim(), half);
    for m in &points {
        if !window.contains(m) {
            return Err(GreenError::WindowTooSmall(m.clone()).into());
        }
    }
    if !model.in_e(k) {
        return Err(GreenError::NotInE(k.to_vec()).into());
    }
    let run = green::killed_run(model, k, &window, &DpOptions::with_tol(tol))?;
    let cert = Certifier::for_model(model)?;
    let exit = ExitLaw::from_run(&run, &cert)?;
    let rows = radii
        .iter()
        .zip(&points)
        .map(|(&r, m)| study_row(model, &run, &exit, &cert, r, m, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyTable { k: k.to_vec(), u, window_half: half, tol, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    /// `None` when the variants cannot be told apart.
    pub selected: Option<Variant>,
    pub note: String,
    pub rel_error_paper: f64,
    pub rel_error_lclt: f64,
    pub c_emp_last: f64,
    pub last_change: f64,
}

impl Verdict {
    pub fn rel_error(&self, v: Variant) -> f64 {
        match v {
            Variant::Paper => self.rel_error_paper,
            Variant::Lclt => self.rel_error_lclt,
        }
    }
}

/// Picks the prefactor variant closest to the empirical constant of the last row.
pub fn prefactor_select(study: &StudyTable) -> Result<Verdict> {
    let n = study.rows.len();
    if n < 3 {
        return Err(AsymError::Unstable(format!("{n} rows, need at least 3")));
    }
    let (a, b) = (&study.rows[n - 2], &study.rows[n - 1]);
    let change = (b.c_emp - a.c_emp).abs() / b.c_emp.abs();
    if !(change < 0.05) {
        return Err(AsymError::Unstable(format!("last-two relative change {change:.4} ≥ 0.05")));
    }
    let err = |v: Variant| (b.c_emp / v.constant(&b.boundary) - 1.0).abs();
    let (ep, el) = (err(Variant::Paper), err(Variant::Lclt));
    let (selected, note) = if study.u.len() == 1 {
        (None, "indistinguishable, d=1".to_string())
    } else if el <= ep {
        (Some(Variant::Lclt), "lclt".to_string())
    } else {
        (Some(Variant::Paper), "paper".to_string())
    };
    Ok(Verdict {
        selected,
        note,
        rel_error_paper: ep,
        rel_error_lclt: el,
        c_emp_last: b.c_emp,
        last_change: change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartinRow {
    pub radius: f64,
    pub m: Point,
    pub kernel: MartinValue,
    /// `h(k)/h(k0)` at `α(u_m)` from the series.
    pub h_ratio: f64,
}

/// Martin kernel `G(k, m)/G(k0, m)` along the ray, next to the limit `h(k)/h(k0)`.
pub fn martin_study(
    model: &WalkModel,
    k: &[i64],
    k0: &[i64],
    u: &[f64],
    radii: &[f64],
    policy: WindowPolicy,
    tol: f64,
) -> Result<Vec<MartinRow>> {
    let u = normalized(u);
    if !model.cone.contains(&u)? {
        return Err(AsymError::DirectionOutsideCone(u));
    }
    let points = ray_points(model, &u, radii)?;
    let window = LatticeWindow::centered(model.dim(), policy.half(*radii.last().unwrap()));
    let opts = DpOptions::with_tol(tol);
    let cert = Certifier::for_model(model)?;
    let run_k = green::killed_run(model, k, &window, &opts)?;
    let run_0 = green::killed_run(model, k0, &window, &opts)?;
    let exit_k = ExitLaw::from_run(&run_k, &cert)?;
    let exit_0 = ExitLaw::from_run(&run_0, &cert)?;
    radii
        .iter()
        .zip(points)
        .map(|(&radius, m)| {
            let bd = solve_alpha(&model.measure, &unit(&m), 1e-12)?;
            let hk = series_h(&exit_k, &cert, &bd.alpha)?.value;
            let h0 = series_h(&exit_0, &cert, &bd.alpha)?.value;
            let kernel = martin_kernel(
                &green::green_from_run(&run_k, &cert, &m, tol),
                &green::green_from_run(&run_0, &cert, &m, tol),
            )?;
            Ok(MartinRow { radius, m, kernel, h_ratio: hk / h0 })
        })
        .collect()
}
