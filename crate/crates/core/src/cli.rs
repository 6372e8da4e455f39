//! Command-line surface: configuration loading and the `plan`, `bounds`,
//! `verify`, `simulate` and `reproduce` subcommands.
//!
//! Exit statuses: 0 success, 1 usage or configuration error, 2 numerical or
//! verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::certificates::{
    certify, construct_upper_bound, decay_constants, default_terminal_tol,
    scalar_feasible_terminal, suboptimality_bound, upper_bound_from_mode,
    verify_terminal_condition, worst_case_budget, CertificateReport, SuboptimalityGap,
    TerminalConditionReport,
};
use crate::linalg::{quad_form, Matrix, Vector};
use crate::oracle::{brute_force_plan, DEFAULT_ENUMERATION_CAP};
use crate::planner::{export_tree_dot, troop_plan, PlanOptions, PlanResult};
use crate::riccati::MemoCache;
use crate::simulator::{check_decay, realized_cost, simulate_closed_loop, DecayReport, Trajectory};
use crate::system::{ModeData, SwitchedSystem};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Relative value discrepancy accepted by `verify`.
pub const VERIFY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension(_)
            | Error::InvalidParameter(_)
            | Error::ModeOutOfRange { .. }
            | Error::InvalidSystem(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// File formats

/// One mode in the system JSON: row-major arrays of arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeJson {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    pub modes: Vec<ModeJson>,
    #[serde(rename = "P_lower", default, skip_serializing_if = "Option::is_none")]
    pub p_lower: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P_upper", default, skip_serializing_if = "Option::is_none")]
    pub p_upper: Option<Vec<Vec<f64>>>,
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> CliResult<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(CliError::Usage(format!("{what} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Usage(format!("{what} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parsed system file.
#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub system: SwitchedSystem,
    pub p_lower: Option<Matrix>,
    pub p_upper: Option<Matrix>,
}

impl SystemFile {
    pub fn from_parts(
        system: &SwitchedSystem,
        p_lower: Option<&Matrix>,
        p_upper: Option<&Matrix>,
    ) -> Self {
        Self {
            modes: system
                .modes()
                .iter()
                .map(|m| ModeJson {
                    a: matrix_to_rows(&m.a),
                    b: matrix_to_rows(&m.b),
                    q: matrix_to_rows(&m.q),
                    r: matrix_to_rows(&m.r),
                })
                .collect(),
            p_lower: p_lower.map(matrix_to_rows),
            p_upper: p_upper.map(matrix_to_rows),
        }
    }

    pub fn into_loaded(self) -> CliResult<LoadedSystem> {
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let label = k + 1;
                Ok(ModeData {
                    a: matrix_from_rows(&m.a, &format!("A of mode {label}"))?,
                    b: matrix_from_rows(&m.b, &format!("B of mode {label}"))?,
                    q: matrix_from_rows(&m.q, &format!("Q of mode {label}"))?,
                    r: matrix_from_rows(&m.r, &format!("R of mode {label}"))?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let system = SwitchedSystem::new(modes)?;
        let report = system.validate(system.default_tolerance());
        if !report.valid {
            return Err(CliError::Usage(format!("system {report}")));
        }
        let square = |rows: &Option<Vec<Vec<f64>>>, what: &str| -> CliResult<Option<Matrix>> {
            let Some(rows) = rows else { return Ok(None) };
            let m = matrix_from_rows(rows, what)?;
            if m.shape() != (system.n_x(), system.n_x()) {
                return Err(CliError::Usage(format!(
                    "{what} must be {0}x{0}",
                    system.n_x()
                )));
            }
            Ok(Some(m))
        };
        let p_lower = square(&self.p_lower, "P_lower")?;
        let p_upper = square(&self.p_upper, "P_upper")?;
        Ok(LoadedSystem {
            system,
            p_lower,
            p_upper,
        })
    }
}

/// Pretty JSON for a system file. Floats are written in shortest round-trip
/// form, so re-reading yields bit-identical matrices.
pub fn emit_system_json(
    system: &SwitchedSystem,
    p_lower: Option<&Matrix>,
    p_upper: Option<&Matrix>,
) -> String {
    let mut s = serde_json::to_string_pretty(&SystemFile::from_parts(system, p_lower, p_upper))
        .expect("system file serializes");
    s.push('\n');
    s
}

pub fn parse_system_json(text: &str) -> CliResult<LoadedSystem> {
    let file: SystemFile = serde_json::from_str(text)
        .map_err(|e| CliError::Usage(format!("cannot parse system JSON: {e}")))?;
    file.into_loaded()
}

/// Where the terminal matrix `P̲` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalSource {
    /// `P̲ = 0`.
    Zero,
    /// The supplied `P_lower`, unmodified.
    Explicit,
    /// The largest multiple of the supplied `P_lower` that satisfies the
    /// terminal-cost condition (the matrix itself when it already does).
    ShrinkLower,
    /// The largest feasible multiple of `P̄`.
    ShrinkUpper,
}

/// Where the upper-bound matrix `P̄` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum UpperSource {
    Supplied,
    Construct,
}

/// Run settings, from the config file and then the command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub d: Option<usize>,
    pub x: Option<Vec<Vec<f64>>>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub terminal: Option<TerminalSource>,
    pub upper: Option<UpperSource>,
    /// 1-based mode for the constructed upper bound.
    pub upper_mode: Option<usize>,
    pub seed: Option<u64>,
    pub points: Option<usize>,
    pub random_systems: Option<usize>,
    pub enumeration_cap: Option<u128>,
}

/// Loaded configuration: the system plus run settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: LoadedSystem,
    pub settings: RunSettings,
}

/// Reads `--config`. The file is either a bare system JSON (it has `modes`)
/// or a run config whose `system` entry is a path, relative to the config,
/// or an inline system object.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("{}: expected a JSON object", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Usage(format!("{}: {e}", path.display()));

    if obj.contains_key("modes") {
        let model = serde_json::from_value::<SystemFile>(value)
            .map_err(bad)?
            .into_loaded()?;
        return Ok(RunConfig {
            model,
            settings: RunSettings::default(),
        });
    }
    let system = obj.remove("system").ok_or_else(|| {
        CliError::Usage(format!(
            "{}: missing \"system\" (path or inline object)",
            path.display()
        ))
    })?;
    let model = match system {
        Value::String(rel) => {
            let sys_path = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = fs::read_to_string(&sys_path).map_err(|e| io_err(&sys_path, e))?;
            parse_system_json(&text)?
        }
        inline @ Value::Object(_) => serde_json::from_value::<SystemFile>(inline)
            .map_err(bad)?
            .into_loaded()?,
        _ => {
            return Err(CliError::Usage(
                "\"system\" must be a path or an object".into(),
            ))
        }
    };
    let settings: RunSettings = serde_json::from_value(value).map_err(bad)?;
    Ok(RunConfig { model, settings })
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "troop",
    version,
    about = "Best-first planner for switched linear-quadratic control"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan the optimal mode sequence at one or more states.
    Plan(CommonArgs),
    /// Report the certificate constants and near-optimality gaps.
    Bounds(CommonArgs),
    /// Compare the planner against exhaustive enumeration.
    Verify(CommonArgs),
    /// Simulate the receding-horizon closed loop.
    Simulate(CommonArgs),
    /// Sweep the upper unit half circle on the benchmark system.
    Reproduce(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// System file or run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Horizon (maximum depth for `verify`).
    #[arg(long)]
    pub d: Option<usize>,
    /// State as comma-separated numbers; repeat for several states.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Vec<String>,
    /// Closed-loop steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub terminal: Option<TerminalSource>,
    #[arg(long, value_enum)]
    pub upper: Option<UpperSource>,
    /// 1-based mode used to construct the upper bound.
    #[arg(long)]
    pub upper_mode: Option<usize>,
    /// Seed for randomized verification systems.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of swept states.
    #[arg(long)]
    pub points: Option<usize>,
    /// Number of random systems for `verify`.
    #[arg(long)]
    pub random_systems: Option<usize>,
    /// Write the explored tree of the first planned state (`plan`).
    #[arg(long)]
    pub dot: Option<PathBuf>,
    /// Print the JSON report only (`bounds`).
    #[arg(long)]
    pub json: bool,
}

fn parse_state(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad state component {t:?}: {e}")))
        })
        .collect()
}

fn merged(config: RunConfig, args: &CommonArgs) -> CliResult<RunConfig> {
    let mut s = config.settings;
    if !args.x.is_empty() {
        s.x = Some(
            args.x
                .iter()
                .map(|x| parse_state(x))
                .collect::<CliResult<_>>()?,
        );
    }
    macro_rules! over {
        ($($f:ident),*) => { $( if args.$f.is_some() { s.$f = args.$f.clone(); } )* };
    }
    over!(
        d,
        steps,
        out,
        terminal,
        upper,
        upper_mode,
        seed,
        points,
        random_systems
    );
    Ok(RunConfig {
        model: config.model,
        settings: s,
    })
}

impl RunConfig {
    pub fn states(&self) -> CliResult<Option<Vec<Vector>>> {
        let Some(xs) = &self.settings.x else {
            return Ok(None);
        };
        xs.iter()
            .map(|x| {
                if x.len() != self.model.system.n_x() {
                    return Err(CliError::Usage(format!(
                        "state {x:?} has length {}, system has n_x = {}",
                        x.len(),
                        self.model.system.n_x()
                    )));
                }
                Ok(Vector::from_row_slice(x))
            })
            .collect::<CliResult<Vec<_>>>()
            .map(Some)
    }

    fn require_states(&self) -> CliResult<Vec<Vector>> {
        self.states()?.filter(|v| !v.is_empty()).ok_or_else(|| {
            CliError::Usage("no state given (use --x or \"x\" in the config)".into())
        })
    }
}

/// The terminal matrix in use and how it was obtained.
#[derive(Debug, Clone, Serialize)]
pub struct TerminalChoice {
    #[serde(serialize_with = "ser_matrix")]
    pub p: Matrix,
    pub source: TerminalSource,
    /// Multiplier applied to the source matrix.
    pub scale: f64,
    pub condition: TerminalConditionReport,
}

fn ser_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_to_rows(m).serialize(s)
}

pub fn resolve_upper(config: &RunConfig) -> CliResult<Matrix> {
    let model = &config.model;
    let source = config.settings.upper.unwrap_or(if model.p_upper.is_some() {
        UpperSource::Supplied
    } else {
        UpperSource::Construct
    });
    match source {
        UpperSource::Supplied => {
            let p = model
                .p_upper
                .clone()
                .ok_or_else(|| CliError::Usage("no P_upper supplied in the system file".into()))?;
            if nalgebra::Cholesky::new(crate::linalg::symmetrize(&p)).is_none() {
                return Err(CliError::Usage(
                    "supplied P_upper is not positive definite".into(),
                ));
            }
            Ok(p)
        }
        UpperSource::Construct => {
            let ub = match config.settings.upper_mode {
                Some(0) => return Err(CliError::Usage("--upper-mode is 1-based".into())),
                Some(label) => upper_bound_from_mode(&model.system, label - 1)?,
                None => construct_upper_bound(&model.system)?,
            };
            Ok(ub.p)
        }
    }
}

pub fn resolve_terminal(config: &RunConfig, upper: Option<&Matrix>) -> CliResult<TerminalChoice> {
    let model = &config.model;
    let n = model.system.n_x();
    let source = config
        .settings
        .terminal
        .unwrap_or(if model.p_lower.is_some() {
            TerminalSource::ShrinkLower
        } else {
            TerminalSource::Zero
        });
    let lower = || {
        model
            .p_lower
            .clone()
            .ok_or_else(|| CliError::Usage("no P_lower supplied in the system file".into()))
    };
    let (p, scale) = match source {
        TerminalSource::Zero => (Matrix::zeros(n, n), 1.0),
        TerminalSource::Explicit => (lower()?, 1.0),
        TerminalSource::ShrinkLower | TerminalSource::ShrinkUpper => {
            let candidate = if source == TerminalSource::ShrinkLower {
                lower()?
            } else {
                match upper {
                    Some(p) => p.clone(),
                    None => resolve_upper(config)?,
                }
            };
            let scaled = scalar_feasible_terminal(&model.system, &candidate, 0.0)?;
            if scaled.scale < 1.0 {
                warn!(
                    "terminal matrix fails the terminal-cost condition; shrunk by factor {:.12}",
                    scaled.scale
                );
            }
            (scaled.p, scaled.scale)
        }
    };
    let condition =
        verify_terminal_condition(&model.system, &p, default_terminal_tol(&model.system, &p))?;
    Ok(TerminalChoice {
        p,
        source,
        scale,
        condition,
    })
}

fn planning_terminal(config: &RunConfig) -> CliResult<TerminalChoice> {
    let choice = resolve_terminal(config, None)?;
    if !choice.condition.passed {
        return Err(CliError::Numerical(format!(
            "terminal matrix violates the terminal-cost condition (min block eigenvalue {:.3e}); \
             use --terminal shrink-lower or zero",
            choice.condition.min_block_eigenvalue()
        )));
    }
    Ok(choice)
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &Vector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

fn out_dir(config: &RunConfig, default: &str) -> CliResult<PathBuf> {
    let dir = config
        .settings
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// `θ_j = jπ/(N+1)`, `j = 1..N`, as `(θ, (cos θ, sin θ))`.
pub fn half_circle_states(points: usize) -> Vec<(f64, Vector)> {
    (1..=points)
        .map(|j| {
            let theta = j as f64 * std::f64::consts::PI / (points + 1) as f64;
            (theta, Vector::from_row_slice(&[theta.cos(), theta.sin()]))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// plan

pub fn cmd_plan(
    config: &RunConfig,
    dot: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<Vec<PlanResult>> {
    let system = &config.model.system;
    let d = config
        .settings
        .d
        .ok_or_else(|| CliError::Usage("missing horizon (--d)".into()))?;
    let terminal = planning_terminal(config)?;
    let mut cache = MemoCache::new(terminal.p.clone());
    let bound = worst_case_budget(system.num_modes(), d).ok();
    let mut results = Vec::new();
    for (k, x) in config.require_states()?.iter().enumerate() {
        let r = troop_plan(
            system,
            x,
            d,
            &mut cache,
            PlanOptions {
                trace: k == 0 && dot.is_some(),
            },
        )?;
        let mut line = format!(
            "x = {}  sequence = {}  value = {}  budget = {}",
            fmt_vec(x),
            r.sequence,
            fmt_f64(r.value),
            r.budget
        );
        if let Some(b) = bound {
            let _ = write!(line, " (worst case {b})");
        }
        let _ = write!(
            line,
            "  nodes = {}  riccati = {}",
            r.explored_nodes, r.riccati_evaluations
        );
        if let Some((u, i)) = &r.first_input {
            let _ = write!(line, "  first input = ({}, {})", fmt_vec(u), i + 1);
        }
        writeln!(out, "{line}").ok();
        if let (Some(path), Some(trace)) = (dot, r.trace.as_ref()) {
            write_file(path, &export_tree_dot(trace)?)?;
        }
        results.push(r);
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// bounds

#[derive(Debug, Clone, Serialize)]
pub struct StateGap {
    pub x: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub gap: SuboptimalityGap,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsOutput {
    pub terminal: TerminalChoice,
    pub report: CertificateReport,
    pub gaps: Vec<StateGap>,
}

pub fn bounds_report(config: &RunConfig) -> CliResult<BoundsOutput> {
    let system = &config.model.system;
    let upper = resolve_upper(config)?;
    // Certificates describe the matrices as supplied; shrinking is opt-in here.
    let mut settings = config.settings.clone();
    if settings.terminal.is_none() && config.model.p_lower.is_some() {
        settings.terminal = Some(TerminalSource::Explicit);
    }
    let cfg = RunConfig {
        model: config.model.clone(),
        settings,
    };
    let terminal = resolve_terminal(&cfg, Some(&upper))?;
    let report = certify(system, &upper, &terminal.p, config.settings.d)?;
    let gaps = config
        .states()?
        .unwrap_or_default()
        .iter()
        .map(|x| {
            Ok(StateGap {
                x: x.iter().copied().collect(),
                lower: quad_form(&terminal.p, x),
                upper: quad_form(&upper, x),
                gap: suboptimality_bound(
                    report.alpha,
                    report.alpha0_value(),
                    report.decay.d,
                    &upper,
                    x,
                )?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(BoundsOutput {
        terminal,
        report,
        gaps,
    })
}

pub fn cmd_bounds(
    config: &RunConfig,
    json_only: bool,
    out: &mut dyn Write,
) -> CliResult<BoundsOutput> {
    let b = bounds_report(config)?;
    let json = serde_json::to_string_pretty(&b).expect("bounds serialize") + "\n";
    if let Some(dir) = &config.settings.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("bounds.json"), &json)?;
    }
    if json_only {
        write!(out, "{json}").ok();
        return Ok(b);
    }
    let r = &b.report;
    let alpha0 = r.alpha0.map_or("inf".to_string(), |a| format!("{a:.6}"));
    let mut text = String::new();
    let _ = writeln!(
        text,
        "terminal matrix: {:?} (scale {:.12}), condition {} (min block eigenvalue {:.3e})",
        b.terminal.source,
        b.terminal.scale,
        if r.terminal_condition.passed {
            "passed"
        } else {
            "FAILED"
        },
        r.terminal_condition.min_block_eigenvalue()
    );
    let _ = writeln!(
        text,
        "alpha        = {:.6} (conservative {:.6})",
        r.alpha, r.conservative_alpha
    );
    let _ = writeln!(text, "alpha0       = {alpha0}");
    let _ = writeln!(text, "d_min        = {}", r.d_min);
    let _ = writeln!(
        text,
        "lambda_d     = {:.6} at d = {} ({})",
        r.decay.lambda_d,
        r.decay.d,
        if r.decay.certified {
            "certified"
        } else {
            "no guarantee"
        }
    );
    let _ = writeln!(text, "beta         = {:.6}", r.decay.beta);
    let _ = writeln!(text, "worst budget = {}", r.worst_case_budget);
    for g in &b.gaps {
        let _ = writeln!(
            text,
            "x = {:?}: lower {:.6}, upper {:.6}, gap {:.6e} (relative {:.6e})",
            g.x, g.lower, g.upper, g.gap.absolute, g.gap.relative
        );
    }
    write!(out, "{text}").ok();
    Ok(b)
}

// ---------------------------------------------------------------------------
// verify

pub type PlannerFn<'a> =
    dyn Fn(&SwitchedSystem, &Vector, usize, &mut MemoCache) -> crate::Result<PlanResult> + 'a;

fn default_planner(
    system: &SwitchedSystem,
    x: &Vector,
    d: usize,
    cache: &mut MemoCache,
) -> crate::Result<PlanResult> {
    troop_plan(system, x, d, cache, PlanOptions::default())
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifySummary {
    pub cases: usize,
    pub max_relative_discrepancy: f64,
    pub sequence_mismatches: usize,
    pub budget_violations: usize,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.max_relative_discrepancy < VERIFY_TOLERANCE && self.budget_violations == 0
    }

    fn merge(&mut self, other: &VerifySummary) {
        self.cases += other.cases;
        self.max_relative_discrepancy = self
            .max_relative_discrepancy
            .max(other.max_relative_discrepancy);
        self.sequence_mismatches += other.sequence_mismatches;
        self.budget_violations += other.budget_violations;
    }
}

/// Planner against enumeration on every `(x, d)` of the grid.
pub fn verify_grid(
    system: &SwitchedSystem,
    terminal: &Matrix,
    states: &[Vector],
    depths: &[usize],
    cap: u128,
    planner: &PlannerFn<'_>,
) -> crate::Result<VerifySummary> {
    let mut summary = VerifySummary::default();
    let mut plan_cache = MemoCache::new(terminal.clone());
    let mut oracle_cache = MemoCache::new(terminal.clone());
    for &d in depths {
        let bound = worst_case_budget(system.num_modes(), d)?;
        for x in states {
            let r = planner(system, x, d, &mut plan_cache)?;
            let o = brute_force_plan(system, x, d, &mut oracle_cache, cap)?;
            let scale = o.value.abs().max(f64::MIN_POSITIVE);
            let rel = (r.value - o.value).abs() / scale;
            summary.cases += 1;
            summary.max_relative_discrepancy = summary
                .max_relative_discrepancy
                .max(if rel.is_nan() { f64::INFINITY } else { rel });
            if r.sequence != o.sequence {
                summary.sequence_mismatches += 1;
            }
            if r.budget as u128 > bound {
                summary.budget_violations += 1;
            }
        }
    }
    Ok(summary)
}

/// A random well-posed instance: `n_x ≤ 3`, `n_u ≤ 2`, `M ≤ 3`, with a
/// terminal matrix shrunk from the constructed upper bound (or zero).
pub struct RandomInstance {
    pub system: SwitchedSystem,
    pub terminal: Matrix,
    pub states: Vec<Vector>,
}

pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=2);
    let count = rng.gen_range(2..=3);
    let fill = |r: usize, c: usize, s: f64, rng: &mut ChaCha8Rng| {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-s..s))
    };
    let modes = (0..count)
        .map(|_| {
            let g = fill(n, n, 1.0, &mut rng);
            let h = fill(m, m, 1.0, &mut rng);
            ModeData {
                a: fill(n, n, 1.3, &mut rng),
                b: fill(n, m, 1.0, &mut rng),
                q: &g * g.transpose() + Matrix::identity(n, n) * 0.1,
                r: &h * h.transpose() + Matrix::identity(m, m) * 0.1,
            }
        })
        .collect();
    let system = SwitchedSystem::new(modes).expect("random modes are well formed");
    let terminal = construct_upper_bound(&system)
        .and_then(|ub| scalar_feasible_terminal(&system, &ub.p, 0.0))
        .map(|s| s.p)
        .unwrap_or_else(|_| Matrix::zeros(n, n));
    let states = (0..4)
        .map(|_| Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    RandomInstance {
        system,
        terminal,
        states,
    }
}

pub fn verify_with_planner(
    config: &RunConfig,
    planner: &PlannerFn<'_>,
    out: &mut dyn Write,
) -> CliResult<VerifySummary> {
    let system = &config.model.system;
    let cap = config
        .settings
        .enumeration_cap
        .unwrap_or(DEFAULT_ENUMERATION_CAP);
    let terminal = planning_terminal(config)?;
    let states = match config.states()? {
        Some(s) => s,
        None if system.n_x() == 2 => half_circle_states(config.settings.points.unwrap_or(32))
            .into_iter()
            .map(|(_, x)| x)
            .collect(),
        None => return Err(CliError::Usage("no states given and n_x != 2".into())),
    };
    let max_d = config.settings.d.unwrap_or(12);
    let depths: Vec<usize> = (1..=max_d).collect();
    let mut total = verify_grid(system, &terminal.p, &states, &depths, cap, planner)?;
    writeln!(
        out,
        "configured system: {} cases, max relative discrepancy {:.3e}, {} sequence mismatches, {} budget violations",
        total.cases, total.max_relative_discrepancy, total.sequence_mismatches, total.budget_violations
    )
    .ok();

    let random = config.settings.random_systems.unwrap_or(0);
    let seed = config.settings.seed.unwrap_or(0);
    let random_depths: Vec<usize> = (0..=max_d.min(8)).collect();
    for k in 0..random {
        let inst = random_instance(seed.wrapping_add(k as u64));
        let s = verify_grid(
            &inst.system,
            &inst.terminal,
            &inst.states,
            &random_depths,
            cap,
            planner,
        )?;
        writeln!(
            out,
            "random system {k} (n_x = {}, n_u = {}, M = {}): {} cases, max relative discrepancy {:.3e}",
            inst.system.n_x(),
            inst.system.n_u(),
            inst.system.num_modes(),
            s.cases,
            s.max_relative_discrepancy
        )
        .ok();
        total.merge(&s);
    }
    writeln!(
        out,
        "verify {}",
        if total.passed() { "passed" } else { "FAILED" }
    )
    .ok();
    if !total.passed() {
        return Err(CliError::Numerical(format!(
            "planner disagrees with enumeration: max relative discrepancy {:.3e}",
            total.max_relative_discrepancy
        )));
    }
    Ok(total)
}

pub fn cmd_verify(config: &RunConfig, out: &mut dyn Write) -> CliResult<VerifySummary> {
    verify_with_planner(config, &default_planner, out)
}

// ---------------------------------------------------------------------------
// simulate

pub fn trajectory_csv(system: &SwitchedSystem, t: &Trajectory) -> String {
    let mut s = String::from("k");
    for j in 1..=system.n_x() {
        let _ = write!(s, ",x_{j}");
    }
    for j in 1..=system.n_u() {
        let _ = write!(s, ",u_{j}");
    }
    s.push_str(",mode,stage_cost,plan_value,budget\n");
    for k in 0..t.steps() {
        let _ = write!(s, "{k}");
        for v in t.states[k].iter() {
            let _ = write!(s, ",{}", fmt_f64(*v));
        }
        let (u, i) = &t.inputs[k];
        for v in u.iter() {
            let _ = write!(s, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{}",
            i + 1,
            fmt_f64(t.stage_costs[k]),
            fmt_f64(t.plan_values[k]),
            t.budgets[k]
        );
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub x0: Vec<f64>,
    pub final_state: Vec<f64>,
    pub final_norm: f64,
    pub realized_cost: f64,
    pub initial_plan_value: f64,
    pub max_budget: usize,
    pub decay: DecayReport,
}

pub fn cmd_simulate(config: &RunConfig, out: &mut dyn Write) -> CliResult<Vec<SimulationSummary>> {
    let system = &config.model.system;
    let d = config
        .settings
        .d
        .ok_or_else(|| CliError::Usage("missing horizon (--d)".into()))?;
    if d == 0 {
        return Err(CliError::Usage("simulate needs d >= 1".into()));
    }
    let steps = config.settings.steps.unwrap_or(60);
    let terminal = planning_terminal(config)?;
    let upper = resolve_upper(config)?;
    let report = certify(system, &upper, &terminal.p, Some(d.max(2)))?;
    let decay = decay_constants(
        system,
        &upper,
        report.alpha,
        report.alpha0_value(),
        d.max(2),
    )?;
    let dir = out_dir(config, "troop-out")?;
    let mut cache = MemoCache::new(terminal.p.clone());
    let mut summaries = Vec::new();
    for (j, x0) in config.require_states()?.iter().enumerate() {
        let t = simulate_closed_loop(system, x0, d, steps, &mut cache)?;
        write_file(
            &dir.join(format!("trajectory_{j}.csv")),
            &trajectory_csv(system, &t),
        )?;
        let decay_report = if d < 2 {
            DecayReport::Skipped {
                lambda_d: f64::INFINITY,
                reason: "d = 1 carries no stability guarantee".into(),
            }
        } else {
            check_decay(&t, &decay, &upper, system)
        };
        let summary = SimulationSummary {
            x0: x0.iter().copied().collect(),
            final_state: t.final_state().iter().copied().collect(),
            final_norm: t.final_state().norm(),
            realized_cost: realized_cost(&t),
            initial_plan_value: t.plan_values.first().copied().unwrap_or(0.0),
            max_budget: t.budgets.iter().copied().max().unwrap_or(0),
            decay: decay_report,
        };
        let decay_text = match &summary.decay {
            DecayReport::Skipped { reason, .. } => format!("no guarantee ({reason})"),
            DecayReport::Checked { passed, .. } => if *passed {
                "envelope holds"
            } else {
                "envelope VIOLATED"
            }
            .to_string(),
        };
        writeln!(
            out,
            "x0 = {}  realized cost = {}  V*_d(x0) = {}  final norm = {:.3e}  decay: {decay_text}",
            fmt_vec(x0),
            fmt_f64(summary.realized_cost),
            fmt_f64(summary.initial_plan_value),
            summary.final_norm
        )
        .ok();
        summaries.push(summary);
    }
    let json = serde_json::to_string_pretty(&summaries).expect("summary serializes") + "\n";
    write_file(&dir.join("simulate_summary.json"), &json)?;
    if summaries.iter().any(|s| s.decay.passed() == Some(false)) {
        return Err(CliError::Numerical(
            "certified decay envelope violated".into(),
        ));
    }
    Ok(summaries)
}

// ---------------------------------------------------------------------------
// reproduce

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// `V*_d(x)` plus the near-optimality gap: the guaranteed ceiling on `V*(x)`.
    pub band: f64,
    /// 1-based head mode of the optimal sequence.
    pub first_mode: usize,
    pub budget: usize,
    pub riccati_evaluations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproduceSummary {
    pub points: usize,
    pub d: usize,
    pub terminal: TerminalChoice,
    pub alpha: f64,
    pub alpha0: Option<f64>,
    pub d_min: usize,
    pub lambda_d: f64,
    pub budget_mean: f64,
    pub budget_max: usize,
    pub budget_min: usize,
    pub max_riccati_evaluations: usize,
    pub sandwich_violations: usize,
    /// Contiguous arcs of equal first mode along the sweep.
    pub first_mode_arcs: usize,
    pub tree_state: Vec<f64>,
    pub tree_depth: usize,
}

#[derive(Debug, Clone)]
pub struct ReproduceOutput {
    pub rows: Vec<SweepRow>,
    pub summary: ReproduceSummary,
    /// `V*_d` for `d = 0..=horizon` per swept state.
    pub depth_values: Vec<Vec<f64>>,
    pub tree_dot: String,
}

pub fn reproduce(config: &RunConfig) -> CliResult<ReproduceOutput> {
    let system = &config.model.system;
    if system.n_x() != 2 {
        return Err(CliError::Usage(
            "reproduce sweeps the unit half circle and needs n_x = 2".into(),
        ));
    }
    let d = config.settings.d.unwrap_or(19);
    let points = config.settings.points.unwrap_or(64);
    let upper = resolve_upper(config)?;
    let terminal = planning_terminal(config)?;
    let report = certify(system, &upper, &terminal.p, Some(d.max(2)))?;
    let alpha0 = report.alpha0_value();

    let mut cache = MemoCache::new(terminal.p.clone());
    let mut rows = Vec::with_capacity(points);
    let mut depth_values = Vec::with_capacity(points);
    for (theta, x) in half_circle_states(points) {
        // Fresh cache per state so the evaluation count reflects one plan.
        let mut own = MemoCache::new(terminal.p.clone());
        let r = troop_plan(system, &x, d, &mut own, PlanOptions::default())?;
        let gap = if d >= 2 {
            suboptimality_bound(report.alpha, alpha0, d, &upper, &x)?.absolute
        } else {
            f64::NAN
        };
        rows.push(SweepRow {
            theta,
            x: x.iter().copied().collect(),
            value: r.value,
            lower: quad_form(&terminal.p, &x),
            upper: quad_form(&upper, &x),
            band: r.value + gap,
            first_mode: r.sequence.head().map_or(0, |i| i + 1),
            budget: r.budget,
            riccati_evaluations: r.riccati_evaluations,
        });
        depth_values.push(
            (0..=d)
                .map(|k| {
                    troop_plan(system, &x, k, &mut cache, PlanOptions::default()).map(|p| p.value)
                })
                .collect::<crate::Result<Vec<_>>>()?,
        );
    }

    let tree_state = Vector::from_row_slice(&[-1.0, 0.0]);
    let tree_depth = 5.min(d);
    let tree = troop_plan(
        system,
        &tree_state,
        tree_depth,
        &mut cache,
        PlanOptions { trace: true },
    )?;
    let tree_dot = export_tree_dot(tree.trace.as_ref().expect("trace requested"))?;

    let budgets: Vec<usize> = rows.iter().map(|r| r.budget).collect();
    let sandwich_violations = rows
        .iter()
        .filter(|r| !(r.lower <= r.value + 1e-9 && r.value <= r.upper + 1e-9))
        .count();
    let first_mode_arcs = if rows.is_empty() {
        0
    } else {
        1 + rows
            .windows(2)
            .filter(|w| w[0].first_mode != w[1].first_mode)
            .count()
    };
    let summary = ReproduceSummary {
        points,
        d,
        terminal,
        alpha: report.alpha,
        alpha0: report.alpha0,
        d_min: report.d_min,
        lambda_d: report.decay.lambda_d,
        budget_mean: budgets.iter().sum::<usize>() as f64 / budgets.len().max(1) as f64,
        budget_max: budgets.iter().copied().max().unwrap_or(0),
        budget_min: budgets.iter().copied().min().unwrap_or(0),
        max_riccati_evaluations: rows
            .iter()
            .map(|r| r.riccati_evaluations)
            .max()
            .unwrap_or(0),
        sandwich_violations,
        first_mode_arcs,
        tree_state: vec![-1.0, 0.0],
        tree_depth,
    };
    Ok(ReproduceOutput {
        rows,
        summary,
        depth_values,
        tree_dot,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "theta,x_1,x_2,value,lower,upper,band,first_mode,budget,riccati_evaluations\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(r.theta),
            fmt_f64(r.x[0]),
            fmt_f64(r.x[1]),
            fmt_f64(r.value),
            fmt_f64(r.lower),
            fmt_f64(r.upper),
            fmt_f64(r.band),
            r.first_mode,
            r.budget,
            r.riccati_evaluations
        );
    }
    s
}

fn depth_values_csv(rows: &[SweepRow], values: &[Vec<f64>]) -> String {
    let mut s = String::from("theta,d,value\n");
    for (r, vs) in rows.iter().zip(values) {
        for (d, v) in vs.iter().enumerate() {
            let _ = writeln!(s, "{},{d},{}", fmt_f64(r.theta), fmt_f64(*v));
        }
    }
    s
}

pub fn cmd_reproduce(config: &RunConfig, out: &mut dyn Write) -> CliResult<ReproduceOutput> {
    let result = reproduce(config)?;
    let dir = out_dir(config, "troop-out")?;
    write_file(&dir.join("sweep.csv"), &sweep_csv(&result.rows))?;
    write_file(
        &dir.join("depth_values.csv"),
        &depth_values_csv(&result.rows, &result.depth_values),
    )?;
    write_file(&dir.join("tree.dot"), &result.tree_dot)?;
    let json = serde_json::to_string_pretty(&result.summary).expect("summary serializes") + "\n";
    write_file(&dir.join("summary.json"), &json)?;
    let s = &result.summary;
    writeln!(
        out,
        "{} states at d = {}: budget mean {:.3}, max {}, min {}; max Riccati evaluations {}; \
         sandwich violations {}; first-mode arcs {}; terminal scale {:.12}",
        s.points,
        s.d,
        s.budget_mean,
        s.budget_max,
        s.budget_min,
        s.max_riccati_evaluations,
        s.sandwich_violations,
        s.first_mode_arcs,
        s.terminal.scale
    )
    .ok();
    writeln!(out, "wrote {}", dir.display()).ok();
    if s.sandwich_violations > 0 {
        return Err(CliError::Numerical(format!(
            "{} states violate the value sandwich",
            s.sandwich_violations
        )));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// entry point

/// Parses `args` and runs the subcommand, returning the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                write!(err, "{e}").ok();
            } else {
                write!(out, "{e}").ok();
            }
            return code;
        }
    };
    let result = (|| -> CliResult<()> {
        let args = match &cli.command {
            Command::Plan(a)
            | Command::Bounds(a)
            | Command::Verify(a)
            | Command::Simulate(a)
            | Command::Reproduce(a) => a,
        };
        let config = merged(load_config(&args.config)?, args)?;
        match &cli.command {
            Command::Plan(a) => cmd_plan(&config, a.dot.as_deref(), out).map(drop),
            Command::Bounds(a) => cmd_bounds(&config, a.json, out).map(drop),
            Command::Verify(_) => cmd_verify(&config, out).map(drop),
            Command::Simulate(_) => cmd_simulate(&config, out).map(drop),
            Command::Reproduce(_) => cmd_reproduce(&config, out).map(drop),
        }
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}
