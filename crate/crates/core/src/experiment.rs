//! Experiment runner behind the `fsegrad` binary.
//!
//! Configuration comes from flat `key = value` text (one pair per line,
//! `#` starts a comment) and/or command-line flags; flags win. Keys match
//! the long flag names without the leading dashes.
//!
//! Parameters are drawn from `SplitMix64(seed ^ PARAM_STREAM)`, task data
//! from `SplitMix64(seed)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::baselines::{self, GradientMethod, MethodKind, TapeStep, TrajectoryTape};
use crate::cells::{build_cell, Cell};
use crate::diagnostics::{
    track_explosion, CrossTermAccumulator, CrossTermReport, ExplosionReport, DEFAULT_TAIL_FRACTION,
};
use crate::error::Error;
use crate::linalg::{max_rel_err, Vector};
use crate::sensitivity::{
    assemble_output_gradient, fse_step_multi, init_state, sgd_update, LossSpec, StepRecord,
};
use crate::tasks::{generate, SplitMix64, TaskSelector, TaskSpec};

pub const PARAM_STREAM: u64 = 0xA5A5_A5A5_A5A5_A5A5;
/// Floor for the oracle relative-error column.
pub const ORACLE_FLOOR: f64 = 1e-10;
pub const CSV_HEADER: &str = "step,loss,grad_rel_err_vs_oracle,delta_frobenius,per_step_micros";
pub const COMPARE_CSV_HEADER: &str =
    "method,step,loss,grad_rel_err_vs_oracle,delta_frobenius,per_step_micros,grad_maxabs";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] Error),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    pub fn exit_code(&self) -> u8 {
        1
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// `i,h[,h2],o`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Dims {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| config_err(format!("bad dims `{s}`")))?;
        if !(3..=4).contains(&parts.len()) {
            return Err(config_err(format!("dims `{s}` must be i,h[,h2],o")));
        }
        Ok(Dims {
            input: parts[0],
            hidden: parts[1..parts.len() - 1].to_vec(),
            output: parts[parts.len() - 1],
        })
    }

    fn default_for(cell: &str, task: &TaskSelector) -> Dims {
        let hidden = match cell {
            "scalar-linear" => 1,
            "two-loop-gated" => 4,
            "delay-line" => task.delay.max(1),
            _ => 8,
        };
        Dims {
            input: 1,
            hidden: vec![hidden],
            output: 1,
        }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.input)?;
        for h in &self.hidden {
            write!(f, ",{h}")?;
        }
        write!(f, ",{}", self.output)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub cell: String,
    pub dims: Dims,
    pub method: GradientMethod,
    pub task: TaskSelector,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub update_params: bool,
    pub attenuation: f64,
    pub oracle_check: bool,
    pub out_path: PathBuf,
    pub no_timing: bool,
    pub loss: LossSpec,
    pub init_params: Option<Vector>,
    pub init_state: Option<Vector>,
}

/// Raw `key -> value` pairs before parsing; later inserts override earlier.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pairs: BTreeMap<String, String>,
}

pub const CONFIG_KEYS: [&str; 15] = [
    "cell",
    "dims",
    "method",
    "task",
    "steps",
    "eta",
    "seed",
    "update-params",
    "attenuation",
    "oracle-check",
    "out",
    "no-timing",
    "loss",
    "init-params",
    "init-state",
];

impl RawConfig {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches("--").replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(config_err(format!("unknown config key `{key}`")));
        }
        self.pairs.insert(key, value.to_string());
        Ok(())
    }

    pub fn merge(&mut self, other: &RawConfig) {
        for (k, v) in &other.pairs {
            self.pairs.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        fn num<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T> {
            match raw.get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| config_err(format!("bad value `{v}` for {key}"))),
            }
        }
        fn flag(raw: &RawConfig, key: &str) -> Result<bool> {
            match raw.get(key) {
                None => Ok(false),
                Some("true" | "1" | "yes" | "") => Ok(true),
                Some("false" | "0" | "no") => Ok(false),
                Some(v) => Err(config_err(format!("bad value `{v}` for {key}"))),
            }
        }
        fn list(raw: &RawConfig, key: &str) -> Result<Option<Vector>> {
            raw.get(key)
                .map(|v| {
                    v.split(',')
                        .map(|t| t.trim().parse::<f64>())
                        .collect::<Result<Vector, _>>()
                        .map_err(|_| config_err(format!("bad value `{v}` for {key}")))
                })
                .transpose()
        }

        let cell = self.get("cell").unwrap_or("vanilla-tanh").to_string();
        let task: TaskSelector = self.get("task").unwrap_or("delayed-recall:3").parse()?;
        let method: GradientMethod = self.get("method").unwrap_or("fse").parse()?;
        let dims = match self.get("dims") {
            Some(d) => Dims::parse(d)?,
            None => Dims::default_for(&cell, &task),
        };
        let loss = match self.get("loss").unwrap_or("squared-error") {
            "squared-error" | "squared" => LossSpec::SquaredError,
            "absolute-error" | "absolute" => LossSpec::AbsoluteError,
            other => {
                return Err(ExperimentError::Engine(Error::UnknownName {
                    kind: "loss",
                    token: other.to_string(),
                }))
            }
        };
        let cfg = ExperimentConfig {
            cell,
            dims,
            method,
            task,
            steps: num(self, "steps", 100)?,
            eta: num(self, "eta", 0.0)?,
            seed: num(self, "seed", 0)?,
            update_params: flag(self, "update-params")?,
            attenuation: num(self, "attenuation", 1.0)?,
            oracle_check: flag(self, "oracle-check")?,
            out_path: PathBuf::from(self.get("out").unwrap_or("run")),
            no_timing: flag(self, "no-timing")?,
            loss,
            init_params: list(self, "init-params")?,
            init_state: list(self, "init-state")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        RawConfig::parse_text(text)?.build()
    }

    /// Checks every module precondition before anything runs.
    pub fn validate(&self) -> Result<()> {
        let cell = self.build_cell()?;
        let sig = cell.signature();
        if sig.output_dim != sig.input_dim {
            return Err(config_err(format!(
                "task targets have width {} but the cell outputs {}",
                sig.input_dim, sig.output_dim
            )));
        }
        TaskSpec::new(self.task, self.steps, sig.input_dim, self.seed).validate()?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(config_err(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(config_err(format!(
                "attenuation must lie in (0, 1], got {}",
                self.attenuation
            )));
        }
        if let Some(p) = &self.init_params {
            if p.len() != sig.param_dim {
                return Err(config_err(format!(
                    "init-params has {} values, cell needs {}",
                    p.len(),
                    sig.param_dim
                )));
            }
        }
        if let Some(r) = &self.init_state {
            if r.len() != sig.state_dim() {
                return Err(config_err(format!(
                    "init-state has {} values, cell state width is {}",
                    r.len(),
                    sig.state_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn build_cell(&self) -> Result<Arc<dyn Cell>> {
        Ok(build_cell(
            &self.cell,
            self.dims.input,
            &self.dims.hidden,
            self.dims.output,
        )?)
    }

    pub fn initial_params(&self, cell: &dyn Cell) -> Vector {
        match &self.init_params {
            Some(p) => p.clone(),
            None => cell.init_params(&mut SplitMix64::new(self.seed ^ PARAM_STREAM)),
        }
    }

    pub fn initial_state(&self, cell: &dyn Cell) -> Vec<Vector> {
        let sig = cell.signature();
        match &self.init_state {
            None => sig.zero_state(),
            Some(flat) => {
                let mut off = 0;
                sig.loop_dims
                    .iter()
                    .map(|&d| {
                        let part = flat[off..off + d].to_vec();
                        off += d;
                        part
                    })
                    .collect()
            }
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "cell": self.cell,
            "dims": self.dims.to_string(),
            "method": self.method.to_string(),
            "task": self.task.to_string(),
            "steps": self.steps,
            "eta": self.eta,
            "seed": self.seed,
            "update_params": self.update_params,
            "attenuation": self.attenuation,
            "oracle_check": self.oracle_check,
            "out": self.out_path.display().to_string(),
            "no_timing": self.no_timing,
            "loss": self.loss,
            "init_params": self.init_params,
            "init_state": self.init_state,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExitReason {
    Completed,
    Divergence { step: usize, what: String },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub records: Vec<StepRecord>,
    /// `max |dY_N/dP|` of the method's gradient at each step.
    pub grad_maxabs: Vec<f64>,
    pub final_gradient_maxabs: Option<f64>,
    pub explosion_report: Option<ExplosionReport>,
    pub cross_term_report: Option<CrossTermReport>,
    pub exit_reason: ExitReason,
}

impl RunResult {
    pub fn exit_code(&self) -> u8 {
        match self.exit_reason {
            ExitReason::Completed => 0,
            ExitReason::Divergence { .. } => 2,
        }
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "config": self.config.to_json(),
            "final_gradient_maxabs": self.final_gradient_maxabs,
            "explosion_report": self.explosion_report,
            "cross_term_report": self.cross_term_report,
            "exit_reason": self.exit_reason,
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push_str("\r\n");
        for r in &self.records {
            write_record(&mut out, None, r, self.config.no_timing, None);
        }
        out
    }
}

/// Floats use 17 significant digits, which round-trips every `f64`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Quotes a CSV field when it contains a delimiter, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\r', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_record(
    out: &mut String,
    method: Option<&str>,
    r: &StepRecord,
    no_timing: bool,
    grad_maxabs: Option<f64>,
) {
    if let Some(m) = method {
        out.push_str(&csv_field(m));
        out.push(',');
    }
    let _ = write!(
        out,
        "{},{},{},{},{}",
        r.step,
        fmt_float(r.loss),
        r.grad_rel_err_vs_oracle.map(fmt_float).unwrap_or_default(),
        fmt_float(r.delta_frobenius),
        if no_timing {
            String::new()
        } else {
            fmt_float(r.per_step_micros)
        },
    );
    if let Some(g) = grad_maxabs {
        out.push(',');
        out.push_str(&fmt_float(g));
    }
    out.push_str("\r\n");
}

/// Runs one configuration without touching the filesystem.
///
/// The carried sensitivity is advanced every step whatever the method, so
/// the Δ-norm column and explosion report are always available; for
/// non-FSE methods that bookkeeping is kept out of the timed region.
pub fn execute(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let cell = config.build_cell()?;
    let sig = cell.signature().clone();
    let (inputs, targets) = generate(&TaskSpec::new(
        config.task,
        config.steps,
        sig.input_dim,
        config.seed,
    ))?;
    let mut params = config.initial_params(cell.as_ref());
    let mut recurred = config.initial_state(cell.as_ref());
    let mut state = init_state(&sig).with_attenuation(config.attenuation)?;
    let keep_tape = config.method.kind != MethodKind::Fse || config.oracle_check;
    let mut tape = TrajectoryTape::default();
    let mut cross = (sig.loops() >= 2)
        .then(|| CrossTermAccumulator::new(sig.loops()))
        .transpose()?;

    let mut records = Vec::with_capacity(config.steps);
    let mut grad_maxabs = Vec::with_capacity(config.steps);
    let mut exit_reason = ExitReason::Completed;

    for (n, (x, target)) in inputs.iter().zip(&targets).enumerate() {
        let started = Instant::now();
        let fwd = cell.step(x, &recurred, &params)?;
        if keep_tape {
            tape.steps.push(TapeStep {
                x: x.clone(),
                r_prev: recurred.clone(),
                p_snapshot: params.clone(),
                y: fwd.output.clone(),
                r: fwd.recurred.clone(),
            });
        }
        let (loss, dc_dy) = config.loss.eval(&fwd.output, target)?;
        let (gradient, jac, elapsed) = if config.method.kind == MethodKind::Fse {
            let jac = cell.jacobians(x, &recurred, &params)?;
            let g = assemble_output_gradient(&state, &jac)?;
            state = fse_step_multi(&state, &jac)?;
            if config.update_params {
                params = sgd_update(&params, &dc_dy, &g, config.eta)?;
            }
            (g, jac, started.elapsed())
        } else {
            let g = baselines::gradient(cell.as_ref(), &tape, n, config.method)?;
            if config.update_params {
                params = sgd_update(&params, &dc_dy, &g, config.eta)?;
            }
            let elapsed = started.elapsed();
            let jac = cell.jacobians(x, &recurred, &tape.steps[n].p_snapshot)?;
            state = fse_step_multi(&state, &jac)?;
            (g, jac, elapsed)
        };
        if let Some(acc) = cross.as_mut() {
            acc.push(&jac)?;
        }
        let oracle_err = if config.oracle_check {
            let oracle = baselines::naive_bptt_gradient(cell.as_ref(), &tape, n)?;
            Some(max_rel_err(&gradient.dy_dp, &oracle.dy_dp, ORACLE_FLOOR)?)
        } else {
            None
        };
        let delta_frobenius = state.frobenius_norm();
        records.push(StepRecord {
            step: n,
            loss,
            grad_rel_err_vs_oracle: oracle_err,
            delta_frobenius,
            per_step_micros: elapsed.as_secs_f64() * 1e6,
        });
        grad_maxabs.push(gradient.dy_dp.max_abs());
        recurred = fwd.recurred;

        let what = if !loss.is_finite() {
            Some("non-finite loss")
        } else if !delta_frobenius.is_finite() {
            Some("non-finite sensitivity")
        } else if !gradient.dy_dp.is_finite() {
            Some("non-finite gradient")
        } else if !params.iter().all(|v| v.is_finite()) {
            Some("non-finite parameters")
        } else {
            None
        };
        if let Some(what) = what {
            exit_reason = ExitReason::Divergence {
                step: n,
                what: what.to_string(),
            };
            break;
        }
    }

    let norms: Vec<f64> = records.iter().map(|r| r.delta_frobenius).collect();
    let explosion_report = if norms.is_empty() {
        None
    } else {
        Some(track_explosion(&norms, DEFAULT_TAIL_FRACTION)?)
    };
    Ok(RunResult {
        config: config.clone(),
        final_gradient_maxabs: grad_maxabs.last().copied(),
        records,
        grad_maxabs,
        explosion_report,
        cross_term_report: cross.map(|c| c.report()),
        exit_reason,
    })
}

fn with_extension(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// Executes `config` and writes `<out>.csv` and `<out>.json`.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    let result = execute(config)?;
    write_file(&with_extension(&config.out_path, "csv"), &result.csv())?;
    write_file(
        &with_extension(&config.out_path, "json"),
        &pretty(&result.summary_json()),
    )?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub runs: Vec<RunResult>,
}

impl CompareResult {
    pub fn exit_code(&self) -> u8 {
        self.runs.iter().map(RunResult::exit_code).max().unwrap_or(0)
    }

    pub fn csv(&self) -> String {
        let mut out = String::new();
        out.push_str(COMPARE_CSV_HEADER);
        out.push_str("\r\n");
        for run in &self.runs {
            let method = run.config.method.to_string();
            for (r, g) in run.records.iter().zip(&run.grad_maxabs) {
                write_record(&mut out, Some(&method), r, run.config.no_timing, Some(*g));
            }
        }
        out
    }

    pub fn summary_json(&self) -> Value {
        Value::Array(self.runs.iter().map(RunResult::summary_json).collect())
    }
}

/// Runs several configurations that share cell, dims, task, seed, steps and
/// starting point, typically differing only in method. Members run on
/// parallel threads; with frozen parameters they see identical forward
/// trajectories.
pub fn execute_compare(configs: &[ExperimentConfig]) -> Result<CompareResult> {
    let first = configs
        .first()
        .ok_or_else(|| config_err("compare needs at least one configuration"))?;
    for c in &configs[1..] {
        let same = c.cell == first.cell
            && c.dims == first.dims
            && c.task == first.task
            && c.seed == first.seed
            && c.steps == first.steps
            && c.init_params == first.init_params
            && c.init_state == first.init_state;
        if !same {
            return Err(config_err(format!(
                "compare members must share cell, dims, task, seed, steps and initial values \
                 (`{}` differs from `{}`)",
                c.method, first.method
            )));
        }
    }
    let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(move || execute(c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("compare worker panicked"))
            .collect()
    });
    Ok(CompareResult {
        runs: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Compare and write `<out>.csv` / `<out>.json` using the first member's
/// output path.
pub fn compare(configs: &[ExperimentConfig]) -> Result<CompareResult> {
    let result = execute_compare(configs)?;
    let out = &configs[0].out_path;
    write_file(&with_extension(out, "csv"), &result.csv())?;
    write_file(&with_extension(out, "json"), &pretty(&result.summary_json()))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub method: String,
    pub cell: String,
    pub dims: String,
    pub checkpoints: Vec<usize>,
    pub window: usize,
    /// Median per-step wall time (µs) over the window ending at each checkpoint.
    pub median_micros: Vec<f64>,
    /// Last median over first median.
    pub ratio: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the per-step gradient cost at increasing step counts.
///
/// The window for checkpoint `c` covers 1-based steps `c - window + 1 ..= c`.
/// Parameters stay frozen. For FSE every step is timed (the recurrence must
/// run anyway); replay methods only compute gradients inside windows, with
/// forward steps in between untimed.
pub fn bench_constant_cost(
    config: &ExperimentConfig,
    checkpoints: &[usize],
    window: usize,
) -> Result<BenchReport> {
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0
    {
        return Err(config_err("checkpoints must be positive and strictly increasing"));
    }
    if window == 0 {
        return Err(config_err("bench window must be >= 1"));
    }
    let cell = config.build_cell()?;
    let sig = cell.signature().clone();
    let total = *checkpoints.last().expect("non-empty");
    let mut rng = SplitMix64::new(config.seed);
    let inputs: Vec<Vector> = (0..total)
        .map(|_| (0..sig.input_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let params = config.initial_params(cell.as_ref());
    let mut recurred = config.initial_state(cell.as_ref());
    let mut state = init_state(&sig).with_attenuation(config.attenuation)?;
    let mut tape = TrajectoryTape::default();
    let is_fse = config.method.kind == MethodKind::Fse;

    let in_window = |n: usize| -> bool {
        checkpoints
            .iter()
            .any(|&c| n < c && n + 1 + window > c)
    };
    let mut times = vec![f64::NAN; total];
    let mut sink = 0.0;
    for (n, x) in inputs.iter().enumerate() {
        let started = Instant::now();
        let fwd = cell.step(x, &recurred, &params)?;
        if is_fse {
            let jac = cell.jacobians_unchecked(x, &recurred, &params);
            let g = assemble_output_gradient(&state, &jac)?;
            state = fse_step_multi(&state, &jac)?;
            times[n] = started.elapsed().as_secs_f64() * 1e6;
            sink += g.dy_dp.as_slice()[0];
        } else {
            tape.steps.push(TapeStep {
                x: x.clone(),
                r_prev: recurred.clone(),
                p_snapshot: params.clone(),
                y: fwd.output.clone(),
                r: fwd.recurred.clone(),
            });
            if in_window(n) {
                let g = baselines::gradient(cell.as_ref(), &tape, n, config.method)?;
                times[n] = started.elapsed().as_secs_f64() * 1e6;
                sink += g.dy_dp.as_slice()[0];
            }
        }
        recurred = fwd.recurred;
    }
    std::hint::black_box(sink);

    let median_micros: Vec<f64> = checkpoints
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(window);
            median(&mut times[lo..c].to_vec())
        })
        .collect();
    let ratio = median_micros.last().expect("non-empty") / median_micros[0];
    Ok(BenchReport {
        method: config.method.to_string(),
        cell: config.cell.clone(),
        dims: config.dims.to_string(),
        checkpoints: checkpoints.to_vec(),
        window,
        median_micros,
        ratio,
    })
}

/// Benchmarks and writes `<out>.json`.
pub fn bench(config: &ExperimentConfig, checkpoints: &[usize], window: usize) -> Result<BenchReport> {
    let report = bench_constant_cost(config, checkpoints, window)?;
    let v = serde_json::to_value(&report).expect("report serializes");
    write_file(&with_extension(&config.out_path, "json"), &pretty(&v))?;
    Ok(report)
}
