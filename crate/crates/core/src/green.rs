//! Ground truth for the killed walk: Green functions, exit laws, survival of
//! the twisted walk and the harmonic functions `h_α`.
//!
//! The deterministic route iterates sub-probability measures forward in time,
//! killing mass that leaves `C` (recorded as exit law) and dropping mass that
//! stays in `C` but leaves the truncation window (recorded as residue). Every
//! truncation is certified with exponential-martingale bounds computed from
//! the jump law, so a DP value `v` with bound `b` brackets the true value in
//! `[v, v + b]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::genfun::{self, eval_p, find_interior_min, ray_to_level, BoundaryData, GenfunError};
use crate::model::{Cone, JumpMeasure, LatticeWindow, ModelError, Point, WalkModel};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum GreenError {
    #[error("point {0:?} lies outside the truncation window")]
    WindowTooSmall(Point),
    #[error("point {0:?} is not in E = Z^d ∩ C")]
    NotInE(Point),
    #[error("live mass {live:e} did not decay below tolerance after {steps} steps; enlarge the window")]
    NoDecay { steps: usize, live: f64 },
    #[error("direction {0:?} is not in the cone; h is only defined for u in C")]
    DirectionOutsideCone(Vec<f64>),
    #[error("harmonic value {value:e} is negative beyond its error bound {bound:e}; enlarge the window")]
    NegativeHarmonic { value: f64, bound: f64 },
    #[error(transparent)]
    Genfun(#[from] GenfunError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GreenError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpOptions {
    /// Iteration stops once the live in-window mass drops below this.
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self { tol: 1e-14, max_steps: 1_000_000 }
    }
}

impl DpOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

impl From<f64> for DpOptions {
    fn from(tol: f64) -> Self {
        Self::with_tol(tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dp,
    Mc,
    Quadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ErrorBar {
    /// Deterministic: true value in `[value, value + bound]` for DP.
    Bound { bound: f64 },
    Interval { ci_half_width: f64, confidence: f64, n_samples: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenEstimate {
    pub value: f64,
    pub error: ErrorBar,
    pub method: Method,
    pub params: BTreeMap<String, String>,
}

impl GreenEstimate {
    /// Half-width of the error bar (bound or CI) regardless of its kind.
    pub fn spread(&self) -> f64 {
        match self.error {
            ErrorBar::Bound { bound } => bound,
            ErrorBar::Interval { ci_half_width, .. } => ci_half_width,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Region<'a> {
    Cone(&'a Cone),
    Free,
}

impl Region<'_> {
    fn contains(&self, x: &[i64]) -> bool {
        match self {
            Region::Cone(c) => c.contains_point(x),
            Region::Free => true,
        }
    }
}

const NONE: u32 = u32::MAX;

/// Result of one forward iteration from a start point.
#[derive(Debug, Clone)]
pub struct DpRun {
    pub start: Point,
    pub window: LatticeWindow,
    active: Vec<usize>,
    position: Vec<u32>,
    visits: Vec<f64>,
    /// Exterior points reached on the killing step, with their mass.
    pub exits: Vec<(Point, f64)>,
    /// Mass dropped at the window edge (still inside `C`).
    pub discarded: Vec<(Point, f64)>,
    /// Mass still alive when the iteration stopped.
    pub live: Vec<(Point, f64)>,
    pub steps: usize,
    pub final_live: f64,
}

impl DpRun {
    /// Accumulated visit mass at `m` (0 outside the active region).
    pub fn visits_at(&self, m: &[i64]) -> f64 {
        self.window
            .index_of(m)
            .map(|i| self.position[i])
            .filter(|&p| p != NONE)
            .map_or(0.0, |p| self.visits[p as usize])
    }

    /// `(point, visits)` for every active site with positive mass.
    pub fn visit_table(&self) -> Vec<(Point, f64)> {
        self.active
            .iter()
            .zip(&self.visits)
            .filter(|(_, &v)| v > 0.0)
            .map(|(&i, &v)| (self.window.point_at(i), v))
            .collect()
    }

    /// Mass whose future is not followed: discarded plus still alive.
    pub fn residue(&self) -> impl Iterator<Item = &(Point, f64)> {
        self.discarded.iter().chain(self.live.iter())
    }

    pub fn residue_mass(&self) -> f64 {
        self.residue().map(|(_, w)| w).sum()
    }
}

fn run_dp(
    measure: &JumpMeasure,
    region: Region<'_>,
    start: &[i64],
    window: &LatticeWindow,
    opts: &DpOptions,
) -> Result<DpRun> {
    if !window.contains(start) {
        return Err(GreenError::WindowTooSmall(start.to_vec()));
    }
    if !region.contains(start) {
        return Err(GreenError::NotInE(start.to_vec()));
    }
    let steps = measure.steps();
    let nsteps = steps.len();

    let mut position = vec![NONE; window.len()];
    let mut active = Vec::new();
    let mut points = Vec::new();
    for i in 0..window.len() {
        let p = window.point_at(i);
        if region.contains(&p) {
            position[i] = active.len() as u32;
            active.push(i);
            points.push(p);
        }
    }

    // gather[a * nsteps + j] = active index of point(a) - step_j, if active.
    let mut gather = vec![NONE; active.len() * nsteps];
    let mut exit_ids: BTreeMap<Point, usize> = BTreeMap::new();
    let mut disc_ids: BTreeMap<Point, usize> = BTreeMap::new();
    let mut exit_edges = Vec::new();
    let mut disc_edges = Vec::new();
    let mut buf = vec![0i64; start.len()];
    for (a, p) in points.iter().enumerate() {
        for (j, s) in steps.iter().enumerate() {
            for ((b, x), v) in buf.iter_mut().zip(p).zip(&s.v) {
                *b = x - v;
            }
            if let Some(src) = window.index_of(&buf) {
                gather[a * nsteps + j] = position[src];
            }
            for ((b, x), v) in buf.iter_mut().zip(p).zip(&s.v) {
                *b = x + v;
            }
            if !region.contains(&buf) {
                let n = exit_ids.len();
                let id = *exit_ids.entry(buf.clone()).or_insert(n);
                exit_edges.push((a, id, s.p));
            } else if !window.contains(&buf) {
                let n = disc_ids.len();
                let id = *disc_ids.entry(buf.clone()).or_insert(n);
                disc_edges.push((a, id, s.p));
            }
        }
    }
    let probs: Vec<f64> = steps.iter().map(|s| s.p).collect();

    let n_active = active.len();
    let mut cur = vec![0.0; n_active];
    cur[position[window.index_of(start).unwrap()] as usize] = 1.0;
    let mut next = vec![0.0; n_active];
    let mut visits = vec![0.0; n_active];
    let mut exit_acc = vec![0.0; exit_ids.len()];
    let mut disc_acc = vec![0.0; disc_ids.len()];

    let mut n = 0usize;
    let final_live = loop {
        for (v, c) in visits.iter_mut().zip(&cur) {
            *v += c;
        }
        let live: f64 = cur.iter().sum();
        if live < opts.tol {
            break live;
        }
        if n >= opts.max_steps {
            return Err(GreenError::NoDecay { steps: n, live });
        }
        for &(a, id, p) in &exit_edges {
            exit_acc[id] += p * cur[a];
        }
        for &(a, id, p) in &disc_edges {
            disc_acc[id] += p * cur[a];
        }
        next.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
            let mut terms = Vec::with_capacity(nsteps);
            for (off, out) in chunk.iter_mut().enumerate() {
                let a = c * 4096 + off;
                terms.clear();
                for j in 0..nsteps {
                    let src = gather[a * nsteps + j];
                    if src != NONE {
                        let t = probs[j] * cur[src as usize];
                        if t != 0.0 {
                            terms.push(t);
                        }
                    }
                }
                // Fixed summation order (ascending) makes the result independent
                // of how the support is listed.
                terms.sort_by(|x, y| x.total_cmp(y));
                *out = terms.iter().sum();
            }
        });
        std::mem::swap(&mut cur, &mut next);
        n += 1;
    };

    let collect = |ids: BTreeMap<Point, usize>, acc: &[f64]| -> Vec<(Point, f64)> {
        ids.into_iter()
            .map(|(p, id)| (p, acc[id]))
            .filter(|(_, w)| *w > 0.0)
            .collect()
    };
    let live = points
        .iter()
        .zip(&cur)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, &w)| (p.clone(), w))
        .collect();
    Ok(DpRun {
        start: start.to_vec(),
        window: window.clone(),
        active,
        position,
        visits,
        exits: collect(exit_ids, &exit_acc),
        discarded: collect(disc_ids, &disc_acc),
        live,
        steps: n,
        final_live,
    })
}

/// One killed DP run from `k`; the building block of every deterministic estimate.
pub fn killed_run(
    model: &WalkModel,
    k: &[i64],
    window: &LatticeWindow,
    opts: &DpOptions,
) -> Result<DpRun> {
    run_dp(&model.measure, Region::Cone(&model.cone), k, window, opts)
}

/// Free-space (no killing) run, used as a domination reference.
pub fn free_run(
    measure: &JumpMeasure,
    k: &[i64],
    window: &LatticeWindow,
    opts: &DpOptions,
) -> Result<DpRun> {
    run_dp(measure, Region::Free, k, window, opts)
}

/// Exponential-martingale bounds for the truncation certificates.
pub struct Certifier<'a> {
    measure: &'a JumpMeasure,
    cone: Option<&'a Cone>,
    /// Interior points β with the factor 1/(1 - P(β)).
    candidates: Vec<(Vec<f64>, f64)>,
}

impl<'a> Certifier<'a> {
    pub fn new(measure: &'a JumpMeasure, cone: Option<&'a Cone>) -> Result<Self> {
        let center = find_interior_min(measure)?;
        let mut candidates = vec![(center.clone(), 1.0 / (1.0 - eval_p(measure, &center)))];
        for dir in genfun::scan_directions(measure.dim(), 32) {
            let t = ray_to_level(measure, &center, &dir, 1.0)?;
            for frac in [0.5, 0.8, 0.95] {
                let beta: Vec<f64> =
                    center.iter().zip(&dir).map(|(c, d)| c + frac * t * d).collect();
                let p = eval_p(measure, &beta);
                if p < 1.0 {
                    candidates.push((beta, 1.0 / (1.0 - p)));
                }
            }
        }
        Ok(Self { measure, cone, candidates })
    }

    pub fn for_model(model: &'a WalkModel) -> Result<Self> {
        Self::new(&model.measure, Some(&model.cone))
    }

    /// Upper bound on the free Green function `G(z, m)` (hence on `G_C(z, m)`):
    /// `p_n(z, m) ≤ exp(β·(z - m)) P(β)^n` for every β.
    pub fn green_tail(&self, z: &[i64], m: &[i64]) -> f64 {
        self.candidates
            .iter()
            .map(|(beta, factor)| {
                let e: f64 = beta.iter().zip(z.iter().zip(m)).map(|(b, (zi, mi))| b * (zi - mi) as f64).sum();
                e.exp() * factor
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-normal exponential rates `t_n = sup{t ≥ 0 : P(γ - t n) ≤ P(γ)}`.
    pub fn escape_rates(&self, gamma: &[f64]) -> Result<Vec<Vec<f64>>> {
        let Some(cone) = self.cone else { return Ok(Vec::new()) };
        let level = eval_p(self.measure, gamma);
        cone.branches()
            .iter()
            .map(|b| {
                b.iter()
                    .map(|n| {
                        let neg: Vec<f64> = n.iter().map(|x| -x).collect();
                        Ok(ray_to_level(self.measure, gamma, &neg, level)?)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect()
    }

    /// Bound on the probability that the walk tilted by γ, started at `z`,
    /// ever leaves `C`: the complement of a branch is a union of half-spaces
    /// `{n·x ≤ 0}`, each hit with probability at most `exp(-t_n n·z)`.
    pub fn escape_factor(&self, rates: &[Vec<f64>], z: &[i64]) -> f64 {
        let Some(cone) = self.cone else { return 0.0 };
        let mut best: f64 = 1.0;
        for (b, r) in cone.branches().iter().zip(rates) {
            let s: f64 = b
                .iter()
                .zip(r)
                .map(|(n, t)| {
                    let nz: f64 = n.iter().zip(z).map(|(a, &c)| a * c as f64).sum();
                    (-t * nz).exp()
                })
                .sum();
            best = best.min(s);
        }
        best
    }

    /// Bound on `E_z(exp(γ·Z(τ)); τ < ∞)` for `P(γ) ≤ 1`.
    pub fn exit_transform_tail(&self, rates: &[Vec<f64>], gamma: &[f64], z: &[i64]) -> f64 {
        let e: f64 = gamma.iter().zip(z).map(|(g, &c)| g * c as f64).sum();
        e.exp() * self.escape_factor(rates, z)
    }

    pub fn green_bound(&self, run: &DpRun, m: &[i64]) -> f64 {
        run.residue().map(|(z, w)| w * self.green_tail(z, m)).sum()
    }

    /// Bound on the exit-transform mass missed by a run, at log-modulus γ.
    pub fn exit_bound(&self, run_residue: &[(Point, f64)], gamma: &[f64]) -> Result<f64> {
        let rates = self.escape_rates(gamma)?;
        Ok(run_residue
            .iter()
            .map(|(z, w)| w * self.exit_transform_tail(&rates, gamma, z))
            .sum())
    }
}

fn check_targets(model: &WalkModel, k: &[i64], window: &LatticeWindow) -> Result<()> {
    if k.len() != model.dim() {
        return Err(ModelError::DimensionMismatch { expected: model.dim(), got: k.len() }.into());
    }
    if !window.contains(k) {
        return Err(GreenError::WindowTooSmall(k.to_vec()));
    }
    if !model.in_e(k) {
        return Err(GreenError::NotInE(k.to_vec()));
    }
    Ok(())
}

fn dp_estimate(run: &DpRun, cert: &Certifier<'_>, m: &[i64], tol: f64) -> GreenEstimate {
    let mut params = BTreeMap::new();
    params.insert("k".into(), format!("{:?}", run.start));
    params.insert("m".into(), format!("{m:?}"));
    params.insert("window_lo".into(), format!("{:?}", run.window.lo()));
    params.insert("window_hi".into(), format!("{:?}", run.window.hi()));
    params.insert("tol".into(), format!("{tol:e}"));
    params.insert("steps".into(), run.steps.to_string());
    let value = run.visits_at(m);
    let bound = if cert.cone.is_some_and(|c| !c.contains_point(m)) {
        0.0
    } else {
        cert.green_bound(run, m)
    };
    GreenEstimate { value, error: ErrorBar::Bound { bound }, method: Method::Dp, params }
}

/// Certified `G_C(k, m)` for each target. Targets outside `C` get exactly 0.
pub fn green_dp(
    model: &WalkModel,
    k: &[i64],
    targets: &[Point],
    window: &LatticeWindow,
    opts: impl Into<DpOptions>,
) -> Result<BTreeMap<Point, GreenEstimate>> {
    let opts = &opts.into();
    check_targets(model, k, window)?;
    for m in targets {
        if !window.contains(m) {
            return Err(GreenError::WindowTooSmall(m.clone()));
        }
    }
    let run = killed_run(model, k, window, opts)?;
    let cert = Certifier::for_model(model)?;
    Ok(targets
        .iter()
        .map(|m| (m.clone(), dp_estimate(&run, &cert, m, opts.tol)))
        .collect())
}

/// Certified estimates read off an existing run.
pub fn green_from_run(run: &DpRun, cert: &Certifier<'_>, m: &[i64], tol: f64) -> GreenEstimate {
    dp_estimate(run, cert, m, tol)
}

/// Free-space Green function by the same iteration (no killing).
pub fn free_green_dp(
    measure: &JumpMeasure,
    k: &[i64],
    targets: &[Point],
    window: &LatticeWindow,
    opts: &DpOptions,
) -> Result<BTreeMap<Point, GreenEstimate>> {
    for m in targets.iter().chain(std::iter::once(&k.to_vec())) {
        if !window.contains(m) {
            return Err(GreenError::WindowTooSmall(m.clone()));
        }
    }
    let run = free_run(measure, k, window, opts)?;
    let cert = Certifier::new(measure, None)?;
    Ok(targets
        .iter()
        .map(|m| (m.clone(), dp_estimate(&run, &cert, m, opts.tol)))
        .collect())
}

/// Truncated law of `Z(τ)` from `start`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitLaw {
    pub start: Point,
    pub entries: BTreeMap<Point, f64>,
    pub total_mass: f64,
    /// Bound on the exit mass carried by the residue (never followed).
    pub truncation_bound: f64,
    #[serde(skip)]
    pub residue: Vec<(Point, f64)>,
}

impl ExitLaw {
    pub fn from_run(run: &DpRun, cert: &Certifier<'_>) -> Result<Self> {
        let residue: Vec<(Point, f64)> = run.residue().cloned().collect();
        let zero = vec![0.0; run.start.len()];
        let truncation_bound = cert.exit_bound(&residue, &zero)?.min(run.residue_mass());
        let entries: BTreeMap<Point, f64> = run.exits.iter().cloned().collect();
        Ok(Self {
            start: run.start.clone(),
            total_mass: entries.values().sum(),
            entries,
            truncation_bound,
            residue,
        })
    }

    /// `Σ entries · exp(γ·m)` together with the bound on the missing part.
    pub fn exp_transform(&self, cert: &Certifier<'_>, gamma: &[f64]) -> Result<(f64, f64)> {
        let value = self
            .entries
            .iter()
            .map(|(m, w)| {
                let e: f64 = gamma.iter().zip(m).map(|(g, &c)| g * c as f64).sum();
                w * e.exp()
            })
            .sum();
        Ok((value, cert.exit_bound(&self.residue, gamma)?))
    }
}

pub fn exit_law_dp(
    model: &WalkModel,
    k: &[i64],
    window: &LatticeWindow,
    opts: impl Into<DpOptions>,
) -> Result<ExitLaw> {
    check_targets(model, k, window)?;
    let run = killed_run(model, k, window, &opts.into())?;
    ExitLaw::from_run(&run, &Certifier::for_model(model)?)
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Sampler {
    cumulative: Vec<f64>,
    steps: Vec<Point>,
}

impl Sampler {
    fn new(measure: &JumpMeasure) -> Self {
        let mut acc = 0.0;
        let cumulative = measure
            .steps()
            .iter()
            .map(|s| {
                acc += s.p;
                acc
            })
            .collect();
        Self { cumulative, steps: measure.steps().iter().map(|s| s.v.clone()).collect() }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> &[i64] {
        let x: f64 = rng.gen::<f64>() * self.cumulative[self.cumulative.len() - 1];
        let j = self.cumulative.iter().position(|&c| x < c).unwrap_or(self.steps.len() - 1);
        &self.steps[j]
    }
}

const MC_CHUNK: u64 = 4096;

/// Runs `f` over trajectory indices in fixed chunks and folds the per-chunk
/// results in index order, so output does not depend on the thread count.
fn chunked<T: Send, F>(n: u64, f: F, fold: impl Fn(T, T) -> T, init: T) -> T
where
    F: Fn(u64, u64) -> T + Sync,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| f(c * MC_CHUNK, ((c + 1) * MC_CHUNK).min(n)))
        .collect();
    parts.into_iter().fold(init, fold)
}

/// Monte Carlo visit count to `m` before `τ`, over `n_traj` walks of at most
/// `horizon` steps. Deterministic for fixed `(seed, n_traj)`.
pub fn green_mc(
    model: &WalkModel,
    k: &[i64],
    m: &[i64],
    n_traj: u64,
    horizon: u64,
    seed: u64,
) -> Result<GreenEstimate> {
    if !model.in_e(k) {
        return Err(GreenError::NotInE(k.to_vec()));
    }
    let mut params = BTreeMap::new();
    params.insert("k".into(), format!("{k:?}"));
    params.insert("m".into(), format!("{m:?}"));
    params.insert("horizon".into(), horizon.to_string());
    params.insert("seed".into(), seed.to_string());
    params.insert("truncation".into(), "visits after the horizon are not counted".into());
    if !model.in_e(m) {
        return Ok(GreenEstimate {
            value: 0.0,
            error: ErrorBar::Interval { ci_half_width: 0.0, confidence: 0.95, n_samples: n_traj },
            method: Method::Mc,
            params,
        });
    }
    let sampler = Sampler::new(&model.measure);
    let (sum, sum_sq) = chunked(
        n_traj,
        |lo, hi| {
            let mut s = 0u64;
            let mut s2 = 0u64;
            let mut x = k.to_vec();
            for i in lo..hi {
                let mut rng = rng_for(seed, i);
                x.copy_from_slice(k);
                let mut count = 0u64;
                for _ in 0..=horizon {
                    if x == m {
                        count += 1;
                    }
                    let step = sampler.draw(&mut rng);
                    for (xi, si) in x.iter_mut().zip(step) {
                        *xi += si;
                    }
                    if !model.cone.contains_point(&x) {
                        break;
                    }
                }
                s += count;
                s2 += count * count;
            }
            (s, s2)
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
        (0, 0),
    );
    let n = n_traj as f64;
    let mean = sum as f64 / n;
    let var = (sum_sq as f64 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(GreenEstimate {
        value: mean,
        error: ErrorBar::Interval {
            ci_half_width: Z95 * (var / n).sqrt(),
            confidence: 0.95,
            n_samples: n_traj,
        },
        method: Method::Mc,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalEstimate {
    /// Escaped trajectories, each discounted by the bound on ever exiting later.
    pub lower: f64,
    /// Trajectories not yet killed when stopped (escaped or alive at the horizon).
    pub upper: f64,
    pub sigma_lower: f64,
    pub sigma_upper: f64,
    pub n_samples: u64,
    pub horizon: u64,
    pub escape_radius: f64,
    pub seed: u64,
}

impl SurvivalEstimate {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Brackets `P_k(τ_u = ∞)` for the walk twisted by `α(u)`.
///
/// Each trajectory runs until it leaves `C`, reaches depth `escape_radius`
/// inside `C` or hits the horizon.
pub fn survival_mc(
    model: &WalkModel,
    boundary: &BoundaryData,
    k: &[i64],
    n_traj: u64,
    horizon: u64,
    escape_radius: f64,
    seed: u64,
) -> Result<SurvivalEstimate> {
    if !model.in_e(k) {
        return Err(GreenError::NotInE(k.to_vec()));
    }
    let twisted = genfun::twisted_measure(&model.measure, &boundary.alpha)?;
    let cert = Certifier::for_model(model)?;
    let rates = cert.escape_rates(&boundary.alpha)?;
    let sampler = Sampler::new(&twisted);
    // (upper count, lower sum, lower sum of squares)
    let (up, low, low_sq) = chunked(
        n_traj,
        |lo, hi| {
            let mut up = 0u64;
            let mut low = 0.0;
            let mut low_sq = 0.0;
            let mut x = k.to_vec();
            for i in lo..hi {
                let mut rng = rng_for(seed, i);
                x.copy_from_slice(k);
                let mut alive = true;
                let mut escaped = false;
                for _ in 0..horizon {
                    let step = sampler.draw(&mut rng);
                    for (xi, si) in x.iter_mut().zip(step) {
                        *xi += si;
                    }
                    if !model.cone.contains_point(&x) {
                        alive = false;
                        break;
                    }
                    if model.cone.depth(&x) > escape_radius {
                        escaped = true;
                        break;
                    }
                }
                if alive {
                    up += 1;
                }
                if escaped {
                    let w = (1.0 - cert.escape_factor(&rates, &x)).max(0.0);
                    low += w;
                    low_sq += w * w;
                }
            }
            (up, low, low_sq)
        },
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
        (0, 0.0, 0.0),
    );
    let n = n_traj as f64;
    let upper = up as f64 / n;
    let lower = low / n;
    let var_low = (low_sq / n - lower * lower).max(0.0);
    Ok(SurvivalEstimate {
        lower,
        upper,
        sigma_lower: (var_low / n).sqrt(),
        sigma_upper: (upper * (1.0 - upper) / n).sqrt(),
        n_samples: n_traj,
        horizon,
        escape_radius,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HarmonicMethod {
    Series,
    MonteCarlo { n_traj: u64, horizon: u64, escape_radius: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicEstimate {
    pub value: f64,
    /// Deterministic error: for the series, the true value lies in
    /// `[value - bound, value]`; for Monte Carlo, half the bracket width.
    pub bound: f64,
    /// Statistical standard deviation (0 for the series).
    pub sigma: f64,
}

/// `exp(α·k) - Σ exit(m) exp(α·m)` from an exit law, with its truncation bound.
/// Defined for every boundary point α; positivity needs `∇P(α)` in `C`.
pub fn series_h(
    exit: &ExitLaw,
    cert: &Certifier<'_>,
    alpha: &[f64],
) -> Result<HarmonicEstimate> {
    let e: f64 = alpha.iter().zip(&exit.start).map(|(a, &c)| a * c as f64).sum();
    let (sum, bound) = exit.exp_transform(cert, alpha)?;
    Ok(HarmonicEstimate { value: e.exp() - sum, bound, sigma: 0.0 })
}

/// The harmonic function `h_{α(u)}(k)` of the killed walk.
pub fn harmonic_h(
    model: &WalkModel,
    boundary: &BoundaryData,
    k: &[i64],
    method: HarmonicMethod,
    window: &LatticeWindow,
    opts: impl Into<DpOptions>,
) -> Result<HarmonicEstimate> {
    if !model.cone.contains(&boundary.u)? {
        return Err(GreenError::DirectionOutsideCone(boundary.u.clone()));
    }
    check_targets(model, k, window)?;
    match method {
        HarmonicMethod::Series => {
            let run = killed_run(model, k, window, &opts.into())?;
            let cert = Certifier::for_model(model)?;
            let exit = ExitLaw::from_run(&run, &cert)?;
            let h = series_h(&exit, &cert, &boundary.alpha)?;
            if h.value + 1e-12 < 0.0 && h.value.abs() > h.bound {
                return Err(GreenError::NegativeHarmonic { value: h.value, bound: h.bound });
            }
            Ok(h)
        }
        HarmonicMethod::MonteCarlo { n_traj, horizon, escape_radius, seed } => {
            let s = survival_mc(model, boundary, k, n_traj, horizon, escape_radius, seed)?;
            let e: f64 = boundary.alpha.iter().zip(k).map(|(a, &c)| a * c as f64).sum::<f64>().exp();
            Ok(HarmonicEstimate {
                value: e * s.midpoint(),
                bound: e * 0.5 * (s.upper - s.lower),
                sigma: e * s.sigma_lower.max(s.sigma_upper),
            })
        }
    }
}

/// `|Σ_{s: k+s ∈ C} μ(s) h(k+s) - h(k)|` with `h` from the series route.
/// Works for any boundary point (no cone condition on `u`).
pub fn harmonicity_residual(
    model: &WalkModel,
    boundary: &BoundaryData,
    k: &[i64],
    window: &LatticeWindow,
    opts: impl Into<DpOptions>,
) -> Result<f64> {
    check_targets(model, k, window)?;
    let cert = Certifier::for_model(model)?;
    let opts = opts.into();
    let h_at = |x: &[i64]| -> Result<f64> {
        let run = killed_run(model, x, window, &opts)?;
        let exit = ExitLaw::from_run(&run, &cert)?;
        Ok(series_h(&exit, &cert, &boundary.alpha)?.value)
    };
    let mut acc = 0.0;
    for s in model.measure.steps() {
        let y: Point = k.iter().zip(&s.v).map(|(a, b)| a + b).collect();
        if model.in_e(&y) {
            if !window.contains(&y) {
                return Err(GreenError::WindowTooSmall(y));
            }
            acc += s.p * h_at(&y)?;
        }
    }
    Ok((acc - h_at(k)?).abs())
}
