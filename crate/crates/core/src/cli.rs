//! Command-line front end. Single results are written as JSON, tables as CSV;
//! every float is printed with 17 significant digits.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::asym::{self, AsymError, Variant, WindowPolicy};
use crate::genfun::{self, GenfunError};
use crate::green::{self, GreenError, HarmonicMethod};
use crate::model::{self, LatticeWindow, ModelError, WalkModel};
use crate::series::{self, SeriesError, TorusGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "conewalk",
    version,
    about = "Green functions, exit laws and harmonic functions of lattice random walks killed outside a cone"
)]
pub struct Cli {
    /// Worker threads (results do not depend on it) [env: CONEWALK_THREADS]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the result here instead of standard output
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone)]
pub struct IVec(pub Vec<i64>);

#[derive(Debug, Clone)]
pub struct FVec(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct CVec(pub Vec<Complex64>);

fn parse_ivec(s: &str) -> Result<IVec, String> {
    s.split(',')
        .map(|t| t.trim().parse::<i64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()
        .map(IVec)
}

fn parse_fvec(s: &str) -> Result<FVec, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err("components must be finite".into());
    }
    Ok(FVec(v))
}

fn parse_cvec(s: &str) -> Result<CVec, String> {
    s.split(',')
        .map(|t| {
            let t = t.trim().replace(' ', "");
            t.parse::<Complex64>().map_err(|_| format!("`{t}` is not a complex number (e.g. 0.6, 0.7i, 0.3-0.2i)"))
        })
        .collect::<Result<_, _>>()
        .map(CVec)
}

#[derive(Debug, Args)]
pub struct DpArgs {
    /// Half-width W of the truncation box [-W, W]^d, in lattice units
    #[arg(long, default_value_t = 60)]
    pub window: i64,
    /// Stop when the live in-window mass falls below this
    #[arg(long, default_value_t = 1e-14)]
    pub tol: f64,
    /// Give up (exit 3) if the live mass has not decayed after this many steps
    #[arg(long, default_value_t = 1_000_000)]
    pub max_steps: usize,
}

impl DpArgs {
    fn window(&self, d: usize) -> Result<LatticeWindow, CliError> {
        if self.window < 1 {
            return Err(CliError::usage("--window must be at least 1"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(CliError::usage("--tol must lie in (0, 1)"));
        }
        Ok(LatticeWindow::centered(d, self.window))
    }

    fn echo(&self) -> Value {
        json!({ "window": self.window, "tol": self.tol, "max_steps": self.max_steps })
    }

    fn options(&self) -> green::DpOptions {
        green::DpOptions { tol: self.tol, max_steps: self.max_steps }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GreenMethod {
    Dp,
    Mc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HMethod {
    Series,
    Mc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Paper,
    Lclt,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model file and report the irreducibility checks (exit 1 if they fail)
    Validate {
        /// Model JSON file
        model: PathBuf,
        /// Search box radius for the irreducibility proxy, in lattice units
        #[arg(long, default_value_t = 8)]
        box_radius: i64,
        /// Half-width of the window used for the in-cone reachability check
        #[arg(long, default_value_t = 16)]
        window: i64,
        /// Base point of E for the in-cone check (default: first point of E found near the cone's interior)
        #[arg(long, value_parser = parse_ivec)]
        base: Option<IVec>,
    },
    /// Solve for the boundary point α(u) of D = {P ≤ 1} with outward normal u
    Alpha {
        model: PathBuf,
        /// Direction, comma-separated (normalised internally)
        #[arg(long, value_parser = parse_fvec)]
        u: FVec,
        /// Residual tolerance of the solver
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Print the twisted jump law exp(α(u)·s) μ(s)
    Twist {
        model: PathBuf,
        #[arg(long, value_parser = parse_fvec)]
        u: FVec,
    },
    /// Green function G_C(k, m): expected visits to m from k before leaving the cone
    Green {
        model: PathBuf,
        /// Start point k (comma-separated integers)
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        /// Target point m; repeat for several targets
        #[arg(long, value_parser = parse_ivec, required = true)]
        m: Vec<IVec>,
        #[arg(long, value_enum, default_value_t = GreenMethod::Dp)]
        method: GreenMethod,
        #[command(flatten)]
        dp: DpArgs,
        /// Monte Carlo trajectories
        #[arg(long, default_value_t = 100_000)]
        n_traj: u64,
        /// Monte Carlo horizon, in steps
        #[arg(long, default_value_t = 1000)]
        horizon: u64,
        /// Monte Carlo seed (required with --method mc)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Law of the exit position Z(τ) from k
    Exitlaw {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Harmonic function h_α(u)(k) of the killed walk
    Harmonic {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        /// Direction in the cone (normalised internally)
        #[arg(long, value_parser = parse_fvec)]
        u: FVec,
        #[arg(long, value_enum, default_value_t = HMethod::Series)]
        method: HMethod,
        #[command(flatten)]
        dp: DpArgs,
        /// Monte Carlo trajectories
        #[arg(long, default_value_t = 100_000)]
        n_traj: u64,
        /// Monte Carlo horizon, in steps
        #[arg(long, default_value_t = 10_000)]
        horizon: u64,
        /// Depth inside the cone at which a trajectory counts as escaped
        #[arg(long, default_value_t = 40.0)]
        escape_radius: f64,
        /// Monte Carlo seed (required with --method mc)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Asymptotic prediction for G_C(k, m) at direction m/|m|
    Predict {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        #[arg(long, value_parser = parse_ivec)]
        m: IVec,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Ray study along R·u: Green values, predictions and empirical constant (CSV)
    Study {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        #[arg(long, value_parser = parse_fvec)]
        u: FVec,
        /// Increasing radii, comma-separated
        #[arg(long, value_parser = parse_fvec)]
        radii: FVec,
        /// Fixed window half-width; default is 2·max radius + margin
        #[arg(long)]
        window: Option<i64>,
        /// Margin added to 2·max radius when --window is not given
        #[arg(long, default_value_t = 20)]
        margin: i64,
        #[arg(long, default_value_t = 1e-14)]
        tol: f64,
        /// Accepted for reproducible scripts; the study is deterministic
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Residual of H_k(x)(1 - 𝒫(x)) = x^k - F_k(x) at a complex point x
    CheckFe {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        /// Complex point, comma-separated (e.g. 0.6,0.7i); needs P(ln|x|) < 1
        #[arg(long, value_parser = parse_cvec)]
        x: CVec,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Torus quadrature of G_C(k, m) against the DP value
    CheckQuadrature {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        #[arg(long, value_parser = parse_ivec)]
        m: IVec,
        /// Nodes per axis (power of two)
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Torus radii r, comma-separated (default exp of the minimiser of P)
        #[arg(long, value_parser = parse_fvec)]
        base: Option<FVec>,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Martin kernel G(k, m)/G(k0, m) and its limit h(k)/h(k0)
    Martin {
        model: PathBuf,
        #[arg(long, value_parser = parse_ivec)]
        k: IVec,
        #[arg(long, value_parser = parse_ivec)]
        k0: IVec,
        #[arg(long, value_parser = parse_ivec)]
        m: IVec,
        #[command(flatten)]
        dp: DpArgs,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Io(_) => EXIT_USAGE,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<GenfunError> for CliError {
    fn from(e: GenfunError) -> Self {
        match e {
            GenfunError::Model(m) => m.into(),
            GenfunError::BadDirection { .. } => Self::usage(e.to_string()),
            _ => Self { code: EXIT_NONCONVERGENCE, message: e.to_string() },
        }
    }
}

impl From<GreenError> for CliError {
    fn from(e: GreenError) -> Self {
        match e {
            GreenError::Model(m) => m.into(),
            GreenError::Genfun(g) => g.into(),
            GreenError::NoDecay { .. } | GreenError::NegativeHarmonic { .. } => {
                Self { code: EXIT_NONCONVERGENCE, message: e.to_string() }
            }
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<SeriesError> for CliError {
    fn from(e: SeriesError) -> Self {
        match e {
            SeriesError::Model(m) => m.into(),
            SeriesError::Genfun(g) => g.into(),
            SeriesError::Green(g) => g.into(),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<AsymError> for CliError {
    fn from(e: AsymError) -> Self {
        match e {
            AsymError::Model(m) => m.into(),
            AsymError::Genfun(g) => g.into(),
            AsymError::Green(g) => g.into(),
            AsymError::Unstable(_) | AsymError::ZeroDenominator | AsymError::NonPositiveHarmonic(_) => {
                Self { code: EXIT_NONCONVERGENCE, message: e.to_string() }
            }
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

/// JSON formatter: pretty layout, floats with 17 significant digits.
struct Sig17(serde_json::ser::PrettyFormatter<'static>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{}", fmt_f64(value))
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_json(value: &impl Serialize) -> Result<String, CliError> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, Sig17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| CliError::usage(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

enum Output {
    Json(Value),
    Csv(String),
}

struct Outcome {
    output: Output,
    ok: bool,
}

impl Outcome {
    fn json(v: Value) -> Self {
        Self { output: Output::Json(v), ok: true }
    }
}

fn dims(model: &WalkModel, name: &str, v: &[impl Sized]) -> Result<(), CliError> {
    if v.len() != model.dim() {
        return Err(CliError::usage(format!(
            "--{name} has {} components, the model is {}-dimensional",
            v.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// Unit vector along `u`; the normalised value is what gets echoed.
fn direction(model: &WalkModel, u: &FVec) -> Result<Vec<f64>, CliError> {
    dims(model, "u", &u.0)?;
    let n = u.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(CliError::usage("--u must be non-zero"));
    }
    Ok(u.0.iter().map(|x| x / n).collect())
}

fn seed_for(seed: Option<u64>, what: &str) -> Result<u64, CliError> {
    seed.ok_or_else(|| CliError::usage(format!("--seed is required for {what}")))
}

fn points_json(map: impl IntoIterator<Item = (Vec<i64>, f64)>) -> Value {
    Value::Array(map.into_iter().map(|(p, w)| json!({ "point": p, "mass": w })).collect())
}

fn h_series(
    model: &WalkModel,
    bd: &genfun::BoundaryData,
    k: &[i64],
    dp: &DpArgs,
) -> Result<green::HarmonicEstimate, CliError> {
    Ok(green::harmonic_h(model, bd, k, HarmonicMethod::Series, &dp.window(model.dim())?, dp.options())?)
}

fn default_base(model: &WalkModel) -> Option<Vec<i64>> {
    let r = model.measure.max_step_norm().max(1) * 2;
    let w = LatticeWindow::centered(model.dim(), r);
    (0..w.len()).map(|i| w.point_at(i)).filter(|p| model.in_e(p)).max_by(|a, b| {
        model.cone.depth(a).total_cmp(&model.cone.depth(b)).then_with(|| b.cmp(a))
    })
}

fn dispatch(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Validate { model, box_radius, window, base } => {
            let m = model::load_model(&model)?;
            let a1 = model::check_a1(&m.measure, box_radius);
            let base = match base {
                Some(b) => {
                    dims(&m, "base", &b.0)?;
                    Some(b.0)
                }
                None => default_base(&m),
            };
            let a2 = match &base {
                Some(b) => m.check_a2(&LatticeWindow::centered(m.dim(), window), b)?,
                None => false,
            };
            let ok = a1.mean_nonzero && a1.reachable && a2;
            Ok(Outcome {
                output: Output::Json(json!({
                    "model": m.name,
                    "dim": m.dim(),
                    "a1": a1,
                    "a2": a2,
                    "a2_base": base,
                    "a2_window": window,
                    "valid": ok,
                })),
                ok,
            })
        }
        Command::Alpha { model, u, tol } => {
            let m = model::load_model(&model)?;
            let bd = genfun::solve_alpha(&m.measure, &direction(&m, &u)?, tol)?;
            Ok(Outcome::json(json!({
                "boundary": bd,
                "p_residual": (genfun::eval_p(&m.measure, &bd.alpha) - 1.0).abs(),
                "direction_error": bd.direction_error(),
                "tol": tol,
            })))
        }
        Command::Twist { model, u } => {
            let m = model::load_model(&model)?;
            let bd = genfun::solve_alpha(&m.measure, &direction(&m, &u)?, 1e-12)?;
            let t = genfun::twisted_measure(&m.measure, &bd.alpha)?;
            let steps: Vec<Value> = t.steps().iter().map(|s| json!({ "step": s.v, "p": s.p })).collect();
            Ok(Outcome::json(json!({
                "u": bd.u,
                "alpha": bd.alpha,
                "steps": steps,
                "mean": t.mean(),
            })))
        }
        Command::Green { model, k, m: targets, method, dp, n_traj, horizon, seed } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            for t in &targets {
                dims(&m, "m", &t.0)?;
            }
            let targets: Vec<Vec<i64>> = targets.into_iter().map(|t| t.0).collect();
            let results: Vec<Value> = match method {
                GreenMethod::Dp => {
                    let w = dp.window(m.dim())?;
                    green::green_dp(&m, &k.0, &targets, &w, dp.options())?
                        .into_iter()
                        .map(|(t, e)| json!({ "m": t, "estimate": e }))
                        .collect()
                }
                GreenMethod::Mc => {
                    let seed = seed_for(seed, "--method mc")?;
                    if n_traj < 2 {
                        return Err(CliError::usage("--n-traj must be at least 2"));
                    }
                    targets
                        .iter()
                        .map(|t| {
                            let e = green::green_mc(&m, &k.0, t, n_traj, horizon, seed)?;
                            Ok(json!({ "m": t, "estimate": e }))
                        })
                        .collect::<Result<_, CliError>>()?
                }
            };
            Ok(Outcome::json(json!({
                "k": k.0,
                "results": results,
                "params": { "dp": dp.echo(), "n_traj": n_traj, "horizon": horizon, "seed": seed },
            })))
        }
        Command::Exitlaw { model, k, dp } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            let e = green::exit_law_dp(&m, &k.0, &dp.window(m.dim())?, dp.options())?;
            Ok(Outcome::json(json!({
                "start": e.start,
                "entries": points_json(e.entries.clone()),
                "total_mass": e.total_mass,
                "truncation_bound": e.truncation_bound,
                "params": dp.echo(),
            })))
        }
        Command::Harmonic { model, k, u, method, dp, n_traj, horizon, escape_radius, seed } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            let bd = genfun::solve_alpha(&m.measure, &direction(&m, &u)?, 1e-12)?;
            let hm = match method {
                HMethod::Series => HarmonicMethod::Series,
                HMethod::Mc => HarmonicMethod::MonteCarlo {
                    n_traj,
                    horizon,
                    escape_radius,
                    seed: seed_for(seed, "--method mc")?,
                },
            };
            let h = green::harmonic_h(&m, &bd, &k.0, hm, &dp.window(m.dim())?, dp.options())?;
            Ok(Outcome::json(json!({
                "k": k.0,
                "u": bd.u,
                "alpha": bd.alpha,
                "h": h,
                "params": {
                    "dp": dp.echo(), "n_traj": n_traj, "horizon": horizon,
                    "escape_radius": escape_radius, "seed": seed,
                },
            })))
        }
        Command::Predict { model, k, m: target, variant, dp } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            dims(&m, "m", &target.0)?;
            if target.0.iter().all(|&x| x == 0) {
                return Err(CliError::usage("--m must be non-zero"));
            }
            let bd = genfun::solve_alpha(&m.measure, &asym::unit(&target.0), 1e-12)?;
            let h = h_series(&m, &bd, &k.0, &dp)?;
            let variants: Vec<Variant> = match variant {
                VariantArg::Paper => vec![Variant::Paper],
                VariantArg::Lclt => vec![Variant::Lclt],
                VariantArg::Both => Variant::ALL.to_vec(),
            };
            let preds = variants
                .into_iter()
                .map(|v| {
                    let p = asym::predict_green(&m.cone, &bd, h.value, &k.0, &target.0, v)?;
                    Ok(json!({ "variant": v, "value": p.value }))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Outcome::json(json!({
                "k": k.0,
                "m": target.0,
                "h_k": h,
                "boundary": bd,
                "predictions": preds,
                "params": dp.echo(),
            })))
        }
        Command::Study { model, k, u, radii, window, margin, tol, seed: _ } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            let u = FVec(direction(&m, &u)?);
            let policy = match window {
                Some(h) => WindowPolicy::Fixed(h),
                None => WindowPolicy::Auto { margin },
            };
            let t = asym::ray_study(&m, &k.0, &u.0, &radii.0, policy, tol)?;
            match asym::prefactor_select(&t) {
                Ok(v) => eprintln!(
                    "verdict: {} (relative error paper {:.4}, lclt {:.4})",
                    v.note, v.rel_error_paper, v.rel_error_lclt
                ),
                Err(e) => eprintln!("verdict: none ({e})"),
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(asym::StudyTable::csv_header(m.dim()))
                .and_then(|_| t.csv_records(fmt_f64).iter().try_for_each(|r| w.write_record(r)))
                .map_err(|e| CliError::usage(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| CliError::usage(e.to_string()))?;
            Ok(Outcome { output: Output::Csv(String::from_utf8(bytes).expect("CSV is UTF-8")), ok: true })
        }
        Command::CheckFe { model, k, x, dp } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            dims(&m, "x", &x.0)?;
            let r = series::functional_eq_residual(&m, &k.0, &x.0, &dp.window(m.dim())?, dp.options())?;
            Ok(Outcome::json(json!({
                "k": k.0,
                "x": x.0.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
                "check": r,
                "within_bound": r.residual <= r.bound,
            })))
        }
        Command::CheckQuadrature { model, k, m: target, n, base, dp } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            dims(&m, "m", &target.0)?;
            let grid = match base {
                Some(b) => {
                    dims(&m, "base", &b.0)?;
                    TorusGrid::new(&m.measure, n, b.0)?
                }
                None => TorusGrid::centered(&m.measure, n)?,
            };
            let w = dp.window(m.dim())?;
            let exit = green::exit_law_dp(&m, &k.0, &w, dp.options())?;
            let q = series::killed_green_quadrature(&m, &k.0, &target.0, &grid, &exit)?;
            let g = green::green_dp(&m, &k.0, &[target.0.clone()], &w, dp.options())?.remove(&target.0).unwrap();
            Ok(Outcome::json(json!({
                "k": k.0,
                "m": target.0,
                "grid": grid,
                "quadrature": q,
                "dp": g,
                "difference": (q.value - g.value).abs(),
            })))
        }
        Command::Martin { model, k, k0, m: target, dp } => {
            let m = model::load_model(&model)?;
            dims(&m, "k", &k.0)?;
            dims(&m, "k0", &k0.0)?;
            dims(&m, "m", &target.0)?;
            let w = dp.window(m.dim())?;
            let t = [target.0.clone()];
            let g = green::green_dp(&m, &k.0, &t, &w, dp.options())?.remove(&target.0).unwrap();
            let g0 = green::green_dp(&m, &k0.0, &t, &w, dp.options())?.remove(&target.0).unwrap();
            let kernel = asym::martin_kernel(&g, &g0)?;
            let um = asym::unit(&target.0);
            let limit = if m.cone.contains(&um)? {
                let bd = genfun::solve_alpha(&m.measure, &um, 1e-12)?;
                let hk = h_series(&m, &bd, &k.0, &dp)?.value;
                let h0 = h_series(&m, &bd, &k0.0, &dp)?.value;
                Some(hk / h0)
            } else {
                None
            };
            Ok(Outcome::json(json!({
                "k": k.0,
                "k0": k0.0,
                "m": target.0,
                "kernel": kernel,
                "h_ratio": limit,
                "params": dp.echo(),
            })))
        }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut s = io::stdout().lock();
            s.write_all(text.as_bytes())?;
            s.flush()?;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    let outcome = dispatch(cli.command)?;
    let text = match outcome.output {
        Output::Json(v) => to_json(&v)?,
        Output::Csv(s) => s,
    };
    emit(&cli.out, &text)?;
    Ok(outcome.ok)
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("CONEWALK_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
                CliError::usage(format!("CONEWALK_THREADS = `{s}` is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::usage("thread count must be at least 1"));
    }
    Ok(n)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = threads(cli.threads).and_then(|n| match n {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?
            .install(|| execute(cli)),
        None => execute(cli),
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VALIDATION,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
