//! Walk models: a finitely supported jump law on `Z^d` together with an open
//! cone given as a finite union of open polyhedral cones.
//!
//! Everything here is immutable after construction. The irreducibility checks
//! are finite proxies (breadth-first search inside a bounded box); they cannot
//! certify irreducibility on all of `Z^d` and the reports say so.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lattice point in `Z^d`.
pub type Point = Vec<i64>;

pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("base point {0:?} is not in E = Z^d ∩ C ∩ window")]
    BaseOutsideE(Point),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub v: Point,
    pub p: f64,
}

/// A probability measure on `Z^d` with finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasure {
    dim: usize,
    steps: Vec<Step>,
}

impl JumpMeasure {
    /// Checks the structural invariants: positive dimension, consistent step
    /// lengths, probabilities in (0, 1], distinct steps, total mass 1.
    ///
    /// Hypothesis (A1) is *not* checked here; see [`check_a1`] and
    /// [`WalkModel::new`].
    pub fn new(dim: usize, steps: Vec<Step>) -> Result<Self> {
        if dim == 0 {
            return Err(ModelError::Validation("dimension must be positive".into()));
        }
        if steps.is_empty() {
            return Err(ModelError::Validation("empty support".into()));
        }
        let mut seen = HashSet::new();
        let mut mass = 0.0;
        for s in &steps {
            if s.v.len() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, got: s.v.len() });
            }
            if !(s.p > 0.0 && s.p <= 1.0) {
                return Err(ModelError::Validation(format!(
                    "probability {} of step {:?} not in (0,1]",
                    s.p, s.v
                )));
            }
            if !seen.insert(s.v.clone()) {
                return Err(ModelError::Validation(format!("duplicate step {:?}", s.v)));
            }
            mass += s.p;
        }
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(ModelError::Validation(format!("mass ≠ 1 (total {mass})")));
        }
        Ok(Self { dim, steps })
    }

    pub fn from_pairs(dim: usize, pairs: &[(&[i64], f64)]) -> Result<Self> {
        Self::new(
            dim,
            pairs.iter().map(|(v, p)| Step { v: v.to_vec(), p: *p }).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for s in &self.steps {
            for (mi, &vi) in m.iter_mut().zip(&s.v) {
                *mi += s.p * vi as f64;
            }
        }
        m
    }

    /// Largest sup-norm of a support step.
    pub fn max_step_norm(&self) -> i64 {
        self.steps
            .iter()
            .flat_map(|s| s.v.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Finite union of open polyhedral cones. A branch is a list of normals `n`
/// and contains `x` iff `n·x > 0` for all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Cone {
    dim: usize,
    branches: Vec<Vec<Vec<f64>>>,
}

impl Cone {
    pub fn new(branches: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let first = branches
            .first()
            .and_then(|b| b.first())
            .ok_or_else(|| ModelError::Validation("cone needs a nonempty branch".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(ModelError::Validation("cone normals must be nonempty".into()));
        }
        for b in &branches {
            if b.is_empty() {
                return Err(ModelError::Validation("empty cone branch".into()));
            }
            for n in b {
                if n.len() != dim {
                    return Err(ModelError::DimensionMismatch { expected: dim, got: n.len() });
                }
                if n.iter().all(|&c| c == 0.0) || n.iter().any(|c| !c.is_finite()) {
                    return Err(ModelError::Validation(format!("invalid normal {n:?}")));
                }
            }
        }
        Ok(Self { dim, branches })
    }

    /// The open orthant `{x : x_i > 0 for all i}`.
    pub fn positive_orthant(dim: usize) -> Self {
        let normals = (0..dim).map(|i| unit(dim, i)).collect();
        Self { dim, branches: vec![normals] }
    }

    /// `R^d` minus the closed positive orthant: one branch `{x_i < 0}` per axis.
    pub fn orthant_complement(dim: usize) -> Self {
        let branches = (0..dim)
            .map(|i| {
                let mut n = unit(dim, i);
                n[i] = -1.0;
                vec![n]
            })
            .collect();
        Self { dim, branches }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branches(&self) -> &[Vec<Vec<f64>>] {
        &self.branches
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.contains_unchecked(x))
    }

    fn contains_unchecked(&self, x: &[f64]) -> bool {
        self.branches
            .iter()
            .any(|b| b.iter().all(|n| dot(n, x) > 0.0))
    }

    /// Membership of a lattice point; the caller guarantees the dimension.
    pub fn contains_point(&self, x: &[i64]) -> bool {
        self.branches.iter().any(|b| {
            b.iter()
                .all(|n| n.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() > 0.0)
        })
    }

    /// Euclidean distance from `x` to the boundary of the deepest branch
    /// containing it (0 when `x ∉ C`).
    pub fn depth(&self, x: &[i64]) -> f64 {
        self.branches
            .iter()
            .map(|b| {
                b.iter()
                    .map(|n| {
                        let nn = dot(n, n).sqrt();
                        n.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() / nn
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }
}

pub fn cone_contains(cone: &Cone, x: &[f64]) -> Result<bool> {
    cone.contains(x)
}

fn unit(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Axis-aligned integer box `lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeWindow {
    lo: Point,
    hi: Point,
}

impl LatticeWindow {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ModelError::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Err(ModelError::Validation(format!("window lo {lo:?} exceeds hi {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// `[-half, half]^dim`.
    pub fn centered(dim: usize, half: i64) -> Self {
        Self { lo: vec![-half; dim], hi: vec![half; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.lo.len()
            && x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| l <= v && v <= h)
    }

    pub fn extent(&self, axis: usize) -> usize {
        (self.hi[axis] - self.lo[axis] + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|i| self.extent(i)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index (last axis fastest); `None` outside the box.
    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx = idx * self.extent(i) + (x[i] - self.lo[i]) as usize;
        }
        Some(idx)
    }

    pub fn point_at(&self, mut idx: usize) -> Point {
        let d = self.dim();
        let mut p = vec![0; d];
        for i in (0..d).rev() {
            let e = self.extent(i);
            p[i] = self.lo[i] + (idx % e) as i64;
            idx /= e;
        }
        p
    }

    /// The central box obtained by trimming a quarter of the width on each side.
    pub fn inner_half(&self) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                let q = (h - l) / 4;
                (l + q, h - q)
            })
            .unzip();
        Self { lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkModel {
    pub name: String,
    pub measure: JumpMeasure,
    pub cone: Cone,
}

impl WalkModel {
    /// Builds a model and checks (A1): nonzero mean and the reachability proxy
    /// on the box of radius `max(1, max step norm)`.
    pub fn new(name: impl Into<String>, measure: JumpMeasure, cone: Cone) -> Result<Self> {
        if measure.dim() != cone.dim() {
            return Err(ModelError::DimensionMismatch { expected: measure.dim(), got: cone.dim() });
        }
        let report = check_a1(&measure, measure.max_step_norm().max(1));
        if !report.mean_nonzero {
            return Err(ModelError::Validation(
                "A1(iii) violated: mean jump is zero".into(),
            ));
        }
        if !report.reachable {
            return Err(ModelError::Validation(
                "A1(i) violated: support does not generate the test box".into(),
            ));
        }
        Ok(Self { name: name.into(), measure, cone })
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub fn in_e(&self, x: &[i64]) -> bool {
        x.len() == self.dim() && self.cone.contains_point(x)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        file.into_model()
    }

    /// Canonical JSON form (pretty-printed, field order fixed).
    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            name: self.name.clone(),
            dimension: self.dim(),
            steps: self
                .measure
                .steps()
                .iter()
                .map(|s| StepFile { v: s.v.clone(), p: s.p })
                .collect(),
            cone: ConeFile { branches: self.cone.branches().to_vec() },
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepFile {
    v: Vec<i64>,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConeFile {
    branches: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    dimension: usize,
    steps: Vec<StepFile>,
    cone: ConeFile,
}

impl ModelFile {
    fn into_model(self) -> Result<WalkModel> {
        let measure = JumpMeasure::new(
            self.dimension,
            self.steps.into_iter().map(|s| Step { v: s.v, p: s.p }).collect(),
        )?;
        let cone = Cone::new(self.cone.branches)?;
        WalkModel::new(self.name, measure, cone)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<WalkModel> {
    WalkModel::from_json_str(&fs::read_to_string(path)?)
}

pub fn save_model(model: &WalkModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_json_string())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A1Report {
    pub mean: Vec<f64>,
    pub mean_nonzero: bool,
    pub reachable: bool,
    pub box_radius: i64,
    pub search_radius: i64,
    /// Always `"bfs-proxy"`: the reachability flag is a finite certificate only.
    pub method: &'static str,
}

/// (A1) report. Reachability: BFS from the origin with support steps inside
/// the box of radius `4 * box_radius` must visit every point of
/// `[-box_radius, box_radius]^d`.
pub fn check_a1(measure: &JumpMeasure, box_radius: i64) -> A1Report {
    let mean = measure.mean();
    let mean_nonzero = mean.iter().any(|&m| m.abs() > 1e-15);
    let search_radius = 4 * box_radius;
    let d = measure.dim();
    let search = LatticeWindow::centered(d, search_radius);
    let steps: Vec<&[i64]> = measure.steps().iter().map(|s| s.v.as_slice()).collect();
    let seen = bfs(&search, &vec![0; d], &steps, |_| true);
    let target = LatticeWindow::centered(d, box_radius);
    let reachable = (0..target.len())
        .all(|i| seen[search.index_of(&target.point_at(i)).expect("target inside search box")]);
    A1Report { mean, mean_nonzero, reachable, box_radius, search_radius, method: "bfs-proxy" }
}

/// (A2) proxy: every point of `E ∩ inner_half(window)` is reachable from
/// `base`, and `base` from it, along paths staying in `C ∩ window`.
pub fn check_a2(
    measure: &JumpMeasure,
    cone: &Cone,
    window: &LatticeWindow,
    base: &[i64],
) -> Result<bool> {
    if window.dim() != measure.dim() || base.len() != measure.dim() {
        return Err(ModelError::DimensionMismatch { expected: measure.dim(), got: base.len() });
    }
    if !cone.contains_point(base) || !window.contains(base) {
        return Err(ModelError::BaseOutsideE(base.to_vec()));
    }
    let fwd: Vec<&[i64]> = measure.steps().iter().map(|s| s.v.as_slice()).collect();
    let rev_steps: Vec<Point> =
        measure.steps().iter().map(|s| s.v.iter().map(|c| -c).collect()).collect();
    let rev: Vec<&[i64]> = rev_steps.iter().map(|v| v.as_slice()).collect();
    let allowed = |x: &[i64]| cone.contains_point(x);
    let forward = bfs(window, base, &fwd, allowed);
    let backward = bfs(window, base, &rev, allowed);
    let inner = window.inner_half();
    Ok((0..inner.len()).map(|i| inner.point_at(i)).all(|x| {
        if !cone.contains_point(&x) {
            return true;
        }
        let idx = window.index_of(&x).expect("inner box inside window");
        forward[idx] && backward[idx]
    }))
}

impl WalkModel {
    pub fn check_a2(&self, window: &LatticeWindow, base: &[i64]) -> Result<bool> {
        check_a2(&self.measure, &self.cone, window, base)
    }
}

fn bfs(
    window: &LatticeWindow,
    start: &[i64],
    steps: &[&[i64]],
    allowed: impl Fn(&[i64]) -> bool,
) -> Vec<bool> {
    let mut seen = vec![false; window.len()];
    let mut queue = VecDeque::new();
    if let Some(i) = window.index_of(start) {
        seen[i] = true;
        queue.push_back(start.to_vec());
    }
    let mut next = vec![0; start.len()];
    while let Some(x) = queue.pop_front() {
        for s in steps {
            for ((n, a), b) in next.iter_mut().zip(&x).zip(s.iter()) {
                *n = a + b;
            }
            if let Some(j) = window.index_of(&next) {
                if !seen[j] && allowed(&next) {
                    seen[j] = true;
                    queue.push_back(next.clone());
                }
            }
        }
    }
    seen
}

/// Reference models used throughout the tests and the README.
pub mod fixtures {
    use super::*;

    /// 1D walk, `+1` w.p. 2/3 and `-1` w.p. 1/3, on `(0, ∞)`.
    pub fn m0() -> WalkModel {
        let mu = JumpMeasure::from_pairs(1, &[(&[1], 2.0 / 3.0), (&[-1], 1.0 / 3.0)]).unwrap();
        WalkModel::new("M0", mu, Cone::positive_orthant(1)).unwrap()
    }

    /// Nearest-neighbour walk E 0.4, W 0.1, N 0.3, S 0.2.
    pub fn m1_measure() -> JumpMeasure {
        JumpMeasure::from_pairs(
            2,
            &[(&[1, 0], 0.4), (&[-1, 0], 0.1), (&[0, 1], 0.3), (&[0, -1], 0.2)],
        )
        .unwrap()
    }

    /// `m1_measure` on the open quadrant.
    pub fn m1() -> WalkModel {
        WalkModel::new("M1", m1_measure(), Cone::positive_orthant(2)).unwrap()
    }

    /// M1 with the drift reversed (E 0.1, W 0.4, N 0.2, S 0.3) on `R^2 \ closed quadrant`.
    pub fn m1_reversed_complement() -> WalkModel {
        let mu = JumpMeasure::from_pairs(
            2,
            &[(&[1, 0], 0.1), (&[-1, 0], 0.4), (&[0, 1], 0.2), (&[0, -1], 0.3)],
        )
        .unwrap();
        WalkModel::new("M1-reversed", mu, Cone::orthant_complement(2)).unwrap()
    }
}
