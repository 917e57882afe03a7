//! Experiment configuration, seeded batch runs and report emission.
//!
//! A configuration is a flat `key = value` text file. Every run re-scores its
//! terminal designs with the thin-airfoil oracle, whatever evaluator guided it,
//! so surrogate error shows up as a residual against the target.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_surrogate, load_velocity};
use crate::dflow::{dflow_batch, DflowConfig, DflowOutcome};
use crate::diagnostics::{
    async_gap, format_number, trajectory_alignment, trajectory_uq_profile, uq_reference, write_alignment_csv,
    write_gap_csv, write_uq_csv, AsyncGapReport, UqSettings,
};
use crate::error::{Error, Result};
use crate::flowmatch::{sample_unconditional, VelocityModel};
use crate::geometry::{DesignDataset, DesignVector, DESIGN_DIM};
use crate::guidance::{energy_batch, physics_budget, FailRecord, GuidanceConfig, GuidedOutcome};
use crate::loss::{DesignLoss, PhysicalLoss};
use crate::physics::{Evaluator, OperatingPoint, PhysicalTarget, PhysicsEvaluator, ThinAirfoilOracle};
use crate::rng::batch_noise;

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "FLOWSUR_OUTPUT_DIR";

pub const SWEEP_CUTOFFS: [f64; 4] = [0.0, 0.2, 0.6, 0.8];
pub const SWEEP_STEPS: [usize; 3] = [200, 1000, 2000];
pub const SWEEP_DFLOW_STEPS: usize = 50;

pub const REPORT_COLUMNS: [&str; 13] = [
    "label",
    "strategy",
    "lambda",
    "cutoff",
    "steps",
    "physics_iterations",
    "n",
    "fails",
    "loss_mean",
    "loss_std",
    "cl_mean",
    "cl_std",
    "wall_time_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uncond,
    Conditional,
    Energy,
    Dflow,
    /// Energy grid over [`SWEEP_CUTOFFS`] × [`SWEEP_STEPS`] plus one Dflow row.
    Sweep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uncond => "uncond",
            Strategy::Conditional => "conditional",
            Strategy::Energy => "energy",
            Strategy::Dflow => "dflow",
            Strategy::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uncond" => Strategy::Uncond,
            "conditional" => Strategy::Conditional,
            "energy" => Strategy::Energy,
            "dflow" => Strategy::Dflow,
            "sweep" => Strategy::Sweep,
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy `{other}` (expected uncond, conditional, energy, dflow or sweep)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Oracle,
    Surrogate,
}

impl FromStr for EvaluatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(EvaluatorKind::Oracle),
            "surrogate" => Ok(EvaluatorKind::Surrogate),
            other => Err(Error::Config(format!("unknown evaluator `{other}` (expected oracle or surrogate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub cutoff: f64,
    /// Euler steps `T`.
    pub steps: usize,
    /// Dflow iteration cap `K`.
    pub iterations: usize,
    pub tau: f64,
    pub tol: f64,
    pub target: f64,
    pub alpha_deg: f64,
    pub n: usize,
    pub seed: u64,
    pub evaluator: EvaluatorKind,
    /// Design dimension the experiment expects from its checkpoints.
    pub dim: usize,
    pub model: PathBuf,
    pub surrogate: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub parallel: bool,
    /// Loss level treated as "reached" by the gap table.
    pub desired_loss: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Energy,
            lambda: 10.0,
            cutoff: 0.0,
            steps: 1000,
            iterations: 200,
            tau: 0.1,
            tol: 1e-8,
            target: 0.7,
            alpha_deg: 2.0,
            n: 20,
            seed: 0,
            evaluator: EvaluatorKind::Oracle,
            dim: DESIGN_DIM,
            model: PathBuf::from("flow.json"),
            surrogate: None,
            dataset: None,
            output: PathBuf::from("results"),
            parallel: false,
            desired_loss: 1e-4,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Set one key. Paths are taken verbatim.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "strategy" => self.strategy = value.parse()?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "cutoff" | "t_c" => self.cutoff = parse_value(key, value)?,
            "steps" | "T" => self.steps = parse_value(key, value)?,
            "iterations" | "K" => self.iterations = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "tol" => self.tol = parse_value(key, value)?,
            "target" => self.target = parse_value(key, value)?,
            "alpha_deg" => self.alpha_deg = parse_value(key, value)?,
            "n" => self.n = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "evaluator" => self.evaluator = value.parse()?,
            "dim" => self.dim = parse_value(key, value)?,
            "model" => self.model = PathBuf::from(value),
            "surrogate" => self.surrogate = optional_path(value),
            "dataset" => self.dataset = optional_path(value),
            "output" => self.output = PathBuf::from(value),
            "parallel" => self.parallel = parse_value(key, value)?,
            "desired_loss" => self.desired_loss = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Parse config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            config.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Flat text that [`ExperimentConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        let evaluator = match self.evaluator {
            EvaluatorKind::Oracle => "oracle",
            EvaluatorKind::Surrogate => "surrogate",
        };
        [
            format!("strategy = {}", self.strategy),
            format!("lambda = {}", self.lambda),
            format!("cutoff = {}", self.cutoff),
            format!("steps = {}", self.steps),
            format!("iterations = {}", self.iterations),
            format!("tau = {}", self.tau),
            format!("tol = {}", self.tol),
            format!("target = {}", self.target),
            format!("alpha_deg = {}", self.alpha_deg),
            format!("n = {}", self.n),
            format!("seed = {}", self.seed),
            format!("evaluator = {evaluator}"),
            format!("dim = {}", self.dim),
            format!("model = {}", self.model.display()),
            format!("surrogate = {}", path(&self.surrogate)),
            format!("dataset = {}", path(&self.dataset)),
            format!("output = {}", self.output.display()),
            format!("parallel = {}", self.parallel),
            format!("desired_loss = {}", self.desired_loss),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target.is_finite() {
            return Err(Error::Config(format!("target must be finite, got {}", self.target)));
        }
        if self.n == 0 {
            return Err(Error::Config("batch size n must be at least 1".into()));
        }
        if self.evaluator == EvaluatorKind::Surrogate && self.surrogate.is_none() {
            return Err(Error::Config("evaluator = surrogate needs a surrogate checkpoint path".into()));
        }
        match self.strategy {
            Strategy::Uncond | Strategy::Conditional => crate::flowmatch::check_steps(self.steps),
            Strategy::Energy => self.guidance(self.cutoff, self.steps).map(|_| ()),
            Strategy::Dflow => self.dflow(self.steps).validate(),
            Strategy::Sweep => {
                self.guidance(0.0, SWEEP_STEPS[0])?;
                self.dflow(SWEEP_DFLOW_STEPS).validate()
            }
        }
    }

    fn guidance(&self, cutoff: f64, steps: usize) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.lambda, cutoff, steps)
    }

    fn dflow(&self, steps: usize) -> DflowConfig {
        DflowConfig { iterations: self.iterations, tau: self.tau, steps, tol: self.tol }
    }

    /// Rows this configuration produces, in report order.
    pub fn plan(&self) -> Vec<RowSpec> {
        match self.strategy {
            Strategy::Sweep => SWEEP_CUTOFFS
                .iter()
                .flat_map(|&tc| {
                    SWEEP_STEPS.iter().map(move |&t| RowSpec { strategy: Strategy::Energy, cutoff: tc, steps: t })
                })
                .chain(std::iter::once(RowSpec { strategy: Strategy::Dflow, cutoff: 0.0, steps: SWEEP_DFLOW_STEPS }))
                .collect(),
            s => vec![RowSpec { strategy: s, cutoff: self.cutoff, steps: self.steps }],
        }
    }
}

/// One report row's strategy and grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSpec {
    pub strategy: Strategy,
    pub cutoff: f64,
    pub steps: usize,
}

impl RowSpec {
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Energy => format!("energy tc={} T={}", self.cutoff, self.steps),
            s => format!("{s} T={}", self.steps),
        }
    }
}

/// Loaded models for a run.
#[derive(Debug, Clone)]
pub struct Resources {
    pub model: VelocityModel,
    /// Drives the guidance gradient; scoring always uses `oracle`.
    pub evaluator: Evaluator,
    pub oracle: ThinAirfoilOracle,
}

impl Resources {
    pub fn new(model: VelocityModel, evaluator: Evaluator, oracle: ThinAirfoilOracle) -> Self {
        Resources { model, evaluator, oracle }
    }

    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let model = load_velocity(&config.model, Some(config.dim))?;
        if model.dim() != DESIGN_DIM {
            return Err(Error::Dimension { expected: DESIGN_DIM, found: model.dim() });
        }
        let oracle = ThinAirfoilOracle::new(OperatingPoint::from_degrees(config.alpha_deg)?);
        let evaluator = match (config.evaluator, &config.surrogate) {
            (EvaluatorKind::Surrogate, Some(path)) => Evaluator::Surrogate(load_surrogate(path)?),
            (EvaluatorKind::Surrogate, None) => {
                return Err(Error::Config("evaluator = surrogate needs a surrogate checkpoint path".into()))
            }
            (EvaluatorKind::Oracle, _) => Evaluator::Oracle(oracle.clone()),
        };
        Ok(Resources { model, evaluator, oracle })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub row: usize,
    /// Index `i` of the noise draw `batch_noise(d, seed, i)`.
    pub sample: usize,
    pub fail: Option<FailRecord>,
    /// Oracle loss `(C_L − y)²` of the terminal design.
    pub loss: Option<f64>,
    pub cl: Option<f64>,
    pub design: Option<Vec<f64>>,
}

/// One per-step (energy) or per-iteration (Dflow) entry of a run's loss history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub row: usize,
    pub sample: usize,
    /// Euler step for energy runs, iteration (from 1) for Dflow.
    pub index: usize,
    pub t: Option<f64>,
    /// Loss under the guiding evaluator.
    pub loss: f64,
    pub grad_norm: Option<f64>,
    pub active: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Strategy,
    pub lambda: Option<f64>,
    pub cutoff: Option<f64>,
    pub steps: usize,
    /// Energy: active steps `K`. Dflow: mean iterations taken.
    pub physics_iterations: f64,
    pub n: usize,
    pub fails: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub cl_mean: f64,
    pub cl_std: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub target: f64,
    pub seed: u64,
    pub evaluator: EvaluatorKind,
    pub rows: Vec<ReportRow>,
    /// File names of tables written next to the report.
    pub artifacts: Vec<String>,
}

/// Mean and sample standard deviation; NaN for an empty set, zero spread for one value.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn inadmissible(design: &[f64]) -> Option<String> {
    if design.iter().any(|v| !v.is_finite()) {
        return Some("non-finite terminal design".into());
    }
    design.iter().any(|v| v.abs() > 1.5).then(|| "terminal coefficient magnitude above 1.5".into())
}

enum Terminal {
    Design(Vec<f64>),
    Fail(FailRecord),
}

fn score(oracle: &ThinAirfoilOracle, target: f64, row: usize, sample: usize, t: Terminal) -> Result<SampleRecord> {
    let design = match t {
        Terminal::Design(d) => d,
        Terminal::Fail(f) => {
            return Ok(SampleRecord { row, sample, fail: Some(f), loss: None, cl: None, design: None })
        }
    };
    if let Some(reason) = inadmissible(&design) {
        let fail = FailRecord { step: 0, reason };
        return Ok(SampleRecord { row, sample, fail: Some(fail), loss: None, cl: None, design: None });
    }
    let cl = oracle.lift(&DesignVector::from_slice(&design)?)?;
    Ok(SampleRecord { row, sample, fail: None, loss: Some((cl - target).powi(2)), cl: Some(cl), design: Some(design) })
}

fn unconditional_terminals(
    model: &VelocityModel,
    steps: usize,
    n: usize,
    seed: u64,
    condition: Option<f64>,
    parallel: bool,
) -> Result<Vec<Terminal>> {
    let run = |i: usize| match sample_unconditional(model, steps, &batch_noise(model.dim(), seed, i), condition) {
        Ok(tr) => Ok(Terminal::Design(tr.terminal)),
        Err(Error::Numeric(reason)) => Ok(Terminal::Fail(FailRecord { step: steps, reason })),
        Err(e) => Err(e),
    };
    if parallel {
        (0..n).into_par_iter().map(run).collect()
    } else {
        (0..n).map(run).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub samples: Vec<SampleRecord>,
    pub traces: Vec<TraceRecord>,
}

/// Run one row of the plan. Wall time covers generation only.
pub fn run_row(
    config: &ExperimentConfig,
    resources: &Resources,
    spec: &RowSpec,
    row: usize,
) -> Result<(ReportRow, Vec<SampleRecord>, Vec<TraceRecord>)> {
    let model = &resources.model;
    let target = PhysicalTarget::new(config.target)?;
    let loss = PhysicalLoss::new(&resources.evaluator, target);
    let mut traces = Vec::new();
    let start = Instant::now();
    let (terminals, physics_iterations, lambda, cutoff): (Vec<Terminal>, f64, Option<f64>, Option<f64>) = match spec
        .strategy
    {
        Strategy::Uncond => {
            (unconditional_terminals(model, spec.steps, config.n, config.seed, None, config.parallel)?, 0.0, None, None)
        }
        Strategy::Conditional => {
            if !model.is_conditional() {
                return Err(Error::Config("strategy = conditional needs a conditional flow checkpoint".into()));
            }
            let t = unconditional_terminals(
                model,
                spec.steps,
                config.n,
                config.seed,
                Some(config.target),
                config.parallel,
            )?;
            (t, 0.0, None, None)
        }
        Strategy::Energy => {
            let g = config.guidance(spec.cutoff, spec.steps)?;
            let runs = energy_batch(model, &loss, &g, config.n, config.seed, config.parallel)?;
            for (i, r) in runs.iter().enumerate() {
                let Some(s) = r.success() else { continue };
                traces.extend(s.records.iter().map(|rec| TraceRecord {
                    row,
                    sample: i,
                    index: rec.step,
                    t: Some(rec.t),
                    loss: rec.loss,
                    grad_norm: Some(rec.grad_norm),
                    active: Some(rec.active),
                }));
            }
            let t = runs
                .into_iter()
                .map(|r| match r {
                    GuidedOutcome::Success(s) => Terminal::Design(s.trajectory.terminal),
                    GuidedOutcome::Fail(f) => Terminal::Fail(f),
                })
                .collect();
            (t, physics_budget(&g).k as f64, Some(config.lambda), Some(spec.cutoff))
        }
        Strategy::Dflow => {
            let runs = dflow_batch(model, &loss, config.n, &config.dflow(spec.steps), config.seed, config.parallel)?;
            let iters: Vec<f64> = runs.iter().filter_map(|r| r.success()).map(|r| r.iterations as f64).collect();
            for (i, r) in runs.iter().enumerate() {
                let Some(s) = r.success() else { continue };
                traces.extend(s.loss_history.iter().enumerate().map(|(k, &l)| TraceRecord {
                    row,
                    sample: i,
                    index: k + 1,
                    t: None,
                    loss: l,
                    grad_norm: None,
                    active: None,
                }));
            }
            let t = runs
                .into_iter()
                .map(|r| match r {
                    DflowOutcome::Success(s) => Terminal::Design(s.terminal),
                    DflowOutcome::Fail(f) => Terminal::Fail(f),
                })
                .collect();
            (t, mean_std(&iters).0, None, None)
        }
        Strategy::Sweep => return Err(Error::Contract("sweep is expanded by ExperimentConfig::plan".into())),
    };
    let wall_time = start.elapsed().as_secs_f64();
    let records = terminals
        .into_iter()
        .enumerate()
        .map(|(i, t)| score(&resources.oracle, config.target, row, i, t))
        .collect::<Result<Vec<_>>>()?;
    let label = spec.label();
    for r in &records {
        if let Some(f) = &r.fail {
            log::warn!("{label}: sample {} (seed {}) failed at step {}: {}", r.sample, config.seed, f.step, f.reason);
        }
    }
    let losses: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    let cls: Vec<f64> = records.iter().filter_map(|r| r.cl).collect();
    let (loss_mean, loss_std) = mean_std(&losses);
    let (cl_mean, cl_std) = mean_std(&cls);
    let report = ReportRow {
        label,
        strategy: spec.strategy,
        lambda,
        cutoff,
        steps: spec.steps,
        physics_iterations,
        n: config.n,
        fails: records.iter().filter(|r| r.fail.is_some()).count(),
        loss_mean,
        loss_std,
        cl_mean,
        cl_std,
        wall_time,
    };
    Ok((report, records, traces))
}

/// Run every row of the plan against already-loaded resources.
pub fn run_with(config: &ExperimentConfig, resources: &Resources) -> Result<RunOutput> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    let mut traces = Vec::new();
    for (i, spec) in config.plan().iter().enumerate() {
        let (row, recs, trace) = run_row(config, resources, spec, i)?;
        log::info!(
            "{}: {} fails, mean C_L {}, {:.3} s",
            row.label,
            row.fails,
            format_number(row.cl_mean),
            row.wall_time
        );
        rows.push(row);
        samples.extend(recs);
        traces.extend(trace);
    }
    let report = ExperimentReport {
        target: config.target,
        seed: config.seed,
        evaluator: config.evaluator,
        rows,
        artifacts: vec![],
    };
    Ok(RunOutput { report, samples, traces })
}

/// Load models, run the plan, and write `report.csv`, `report.json`,
/// `samples.csv`, `trace.csv` and `config.txt` into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let resources = Resources::load(config)?;
    let RunOutput { mut report, samples, traces } = run_with(config, &resources)?;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    write_samples_csv(&config.output.join("samples.csv"), &samples)?;
    write_trace_csv(&config.output.join("trace.csv"), &traces)?;
    let cfg_path = config.output.join("config.txt");
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    report.artifacts = vec!["samples.csv".into(), "trace.csv".into(), "config.txt".into()];
    emit_report(&report, &config.output)?;
    Ok(report)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| crate::geometry::csv_error(path, e))
}

fn opt_number(x: Option<f64>) -> String {
    x.map(format_number).unwrap_or_default()
}

fn row_fields(r: &ReportRow) -> Vec<String> {
    vec![
        r.label.clone(),
        r.strategy.to_string(),
        opt_number(r.lambda),
        opt_number(r.cutoff),
        r.steps.to_string(),
        format_number(r.physics_iterations),
        r.n.to_string(),
        r.fails.to_string(),
        format_number(r.loss_mean),
        format_number(r.loss_std),
        format_number(r.cl_mean),
        format_number(r.cl_std),
        format_number(r.wall_time),
    ]
}

/// JSON value of a 6-significant-digit field: number, string, or null for NaN.
fn json_field(column: &str, text: &str) -> Value {
    match column {
        "label" | "strategy" => Value::String(text.into()),
        _ if text.is_empty() => Value::Null,
        _ => text.parse::<f64>().ok().and_then(serde_json::Number::from_f64).map(Value::Number).unwrap_or(Value::Null),
    }
}

/// Write `report.csv` and `report.json` with identical content and fixed
/// column order. Re-emitting the same report gives byte-identical files.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    let err = |e| crate::geometry::csv_error(&csv_path, e);
    w.write_record(REPORT_COLUMNS).map_err(err)?;
    let mut rows = Vec::with_capacity(report.rows.len());
    for r in &report.rows {
        let fields = row_fields(r);
        w.write_record(&fields).map_err(err)?;
        let obj: serde_json::Map<String, Value> =
            REPORT_COLUMNS.iter().zip(&fields).map(|(c, f)| (c.to_string(), json_field(c, f))).collect();
        rows.push(Value::Object(obj));
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join("report.json");
    let doc = json!({
        "schema_version": crate::checkpoint::SCHEMA_VERSION,
        "target": json_field("target", &format_number(report.target)),
        "seed": report.seed,
        "evaluator": report.evaluator,
        "columns": REPORT_COLUMNS,
        "rows": rows,
        "artifacts": report.artifacts,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(vec![csv_path, json_path])
}

/// Tidy table: `row,sample,status,loss,cl,fail_step,reason,c0..c15`.
pub fn write_samples_csv(path: &Path, samples: &[SampleRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| crate::geometry::csv_error(path, e);
    let mut header: Vec<String> =
        ["row", "sample", "status", "loss", "cl", "fail_step", "reason"].iter().map(|s| s.to_string()).collect();
    header.extend((0..DESIGN_DIM).map(|i| format!("c{i}")));
    w.write_record(&header).map_err(err)?;
    for s in samples {
        let mut rec = vec![
            s.row.to_string(),
            s.sample.to_string(),
            if s.fail.is_some() { "Fail".into() } else { "ok".into() },
            opt_number(s.loss),
            opt_number(s.cl),
            s.fail.as_ref().map(|f| f.step.to_string()).unwrap_or_default(),
            s.fail.as_ref().map(|f| f.reason.clone()).unwrap_or_default(),
        ];
        match &s.design {
            // Full precision so the designs can be reloaded exactly.
            Some(d) => rec.extend(d.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), DESIGN_DIM)),
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tidy table: `row,sample,index,t,loss,grad_norm,active`.
pub fn write_trace_csv(path: &Path, traces: &[TraceRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| crate::geometry::csv_error(path, e);
    w.write_record(["row", "sample", "index", "t", "loss", "grad_norm", "active"]).map_err(err)?;
    for r in traces {
        w.write_record([
            r.row.to_string(),
            r.sample.to_string(),
            r.index.to_string(),
            opt_number(r.t),
            format_number(r.loss),
            opt_number(r.grad_norm),
            r.active.map(|a| a.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsSummary {
    /// Share of negative alignment scores for `t > 0.2` over the energy runs.
    pub negative_fraction: Option<f64>,
    pub gaps: Vec<(String, AsyncGapReport)>,
    /// Mean σ at `t ≤ 0.3` over the reference mean, when a surrogate and dataset are configured.
    pub uq_early_ratio: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Alignment of energy-guided runs, loss-gap table for energy and Dflow against
/// unconditional sampling, and (with a surrogate and dataset) the MC-dropout
/// profile of unconditional trajectories.
pub fn diagnose(config: &ExperimentConfig, resources: &Resources) -> Result<DiagnosticsSummary> {
    config.validate()?;
    let dir = &config.output;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &resources.model;
    let target = PhysicalTarget::new(config.target)?;
    let loss = PhysicalLoss::new(&resources.evaluator, target);
    let oracle_loss = PhysicalLoss::new(&resources.oracle, target);
    let mut files = Vec::new();

    let g = config.guidance(config.cutoff, config.steps)?;
    let energy = energy_batch(model, &loss, &g, config.n, config.seed, config.parallel)?;
    let mut series = Vec::new();
    for (i, run) in energy.iter().enumerate() {
        if let Some(s) = run.success() {
            series.push((i, trajectory_alignment(model, &loss, &s.trajectory, None)?));
        }
    }
    let (neg, total) = series
        .iter()
        .flat_map(|(_, s)| s.defined())
        .filter(|(t, _)| *t > 0.2)
        .fold((0, 0), |(n, c), (_, v)| (n + usize::from(v < 0.0), c + 1));
    let negative_fraction = (total > 0).then(|| neg as f64 / total as f64);
    let path = dir.join("alignment.csv");
    write_alignment_csv(&path, &series)?;
    files.push(path);

    let terminal_loss = |design: &[f64]| -> Option<f64> {
        inadmissible(design).is_none().then(|| oracle_loss.loss(design).ok()).flatten()
    };
    let uncon_traj: Vec<Option<crate::flowmatch::Trajectory>> = (0..config.n)
        .map(|i| sample_unconditional(model, config.steps, &batch_noise(model.dim(), config.seed, i), None).ok())
        .collect();
    let uncon: Vec<Option<f64>> =
        uncon_traj.iter().map(|t| t.as_ref().and_then(|t| terminal_loss(&t.terminal))).collect();
    let energy_losses: Vec<Option<f64>> =
        energy.iter().map(|r| r.success().and_then(|s| terminal_loss(&s.trajectory.terminal))).collect();
    let dflow = dflow_batch(model, &loss, config.n, &config.dflow(SWEEP_DFLOW_STEPS), config.seed, config.parallel)?;
    let dflow_losses: Vec<Option<f64>> =
        dflow.iter().map(|r| r.success().and_then(|s| terminal_loss(&s.terminal))).collect();
    let gaps = vec![
        ("energy".to_string(), async_gap(&energy_losses, &uncon, config.desired_loss)?),
        ("dflow".to_string(), async_gap(&dflow_losses, &uncon, config.desired_loss)?),
    ];
    let path = dir.join("gap.csv");
    write_gap_csv(&path, &gaps)?;
    files.push(path);

    let mut uq_early_ratio = None;
    if let (Evaluator::Surrogate(sur), Some(ds_path)) = (&resources.evaluator, &config.dataset) {
        let ds = DesignDataset::load(ds_path)?;
        let settings = UqSettings::default();
        let reference = uq_reference(sur, ds.designs(), &settings, config.seed)?;
        let trajectories: Vec<_> = uncon_traj.into_iter().flatten().collect();
        let profile = trajectory_uq_profile(
            sur,
            &model.stats,
            &trajectories,
            &settings,
            crate::rng::split_seed(config.seed, 1),
            reference,
        )?;
        let early: Vec<f64> = profile.steps.iter().filter(|s| s.t <= 0.3).map(|s| s.mean()).collect();
        uq_early_ratio = Some(mean_std(&early).0 / reference);
        let path = dir.join("uq.csv");
        write_uq_csv(&path, &profile)?;
        files.push(path);
    }
    Ok(DiagnosticsSummary { negative_fraction, gaps, uq_early_ratio, files })
}
