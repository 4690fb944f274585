//! Flat `key=value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! problem=quad-10d
//! search.estimator=neumann_k
//! search.K=2
//! search.T=4
//! search.gamma=0.25
//! search.gamma_alpha=0.01
//! search.rounds=100
//! sweep.K=0,1,2,3
//! ```
//!
//! Everything that can be checked without building the problem is checked
//! here; problem-dependent checks (such as `γ·λ_max ≤ 1`) happen per run so a
//! bad sweep point does not sink its siblings.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use bihyper::derivatives::EpsilonRule;
use bihyper::estimators::{BatchMode, EstimatorKind, EstimatorSpec};
use bihyper::numerics::{RealMatrix, RealVector};
use bihyper::problems::{BilevelProblem, Preset, QuadraticBilevel};
use bihyper::search::{Schedule, SearchConfig};

use crate::error::{CliError, ConfigIssue};

/// Upper bound on the number of runs a sweep may expand to.
pub const MAX_PLAN_SIZE: u128 = 100_000;

const KNOWN_KEYS: &[&str] = &[
    "problem",
    "problem.A",
    "problem.B",
    "problem.c",
    "problem.lambda",
    "search.estimator",
    "search.K",
    "search.T",
    "search.S",
    "search.gamma",
    "search.gamma_alpha",
    "search.schedule",
    "search.gamma_alpha_floor",
    "search.rounds",
    "search.seed",
    "search.epsilon",
    "search.batch_train",
    "search.batch_val",
    "search.record_oracle_error",
    "sweep.T",
    "sweep.K",
    "sweep.gamma",
    "sweep.gamma_alpha",
    "sweep.seed",
    "output",
    "format",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "both" => Ok(Format::Both),
            _ => Err(format!("unknown format '{s}' (valid: csv, json, both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemDef {
    Preset(Preset),
    /// Inline quadratic, matrices given row by row with `;` between rows.
    Quadratic {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        lambda: f64,
    },
}

impl ProblemDef {
    pub fn label(&self) -> String {
        match self {
            ProblemDef::Preset(p) => p.as_str().to_string(),
            ProblemDef::Quadratic { a, b, .. } => format!("quadratic-{}x{}", a.len(), b.first().map_or(0, Vec::len)),
        }
    }

    pub fn build(&self) -> bihyper::Result<Arc<dyn BilevelProblem>> {
        match self {
            ProblemDef::Preset(p) => Ok(p.build()),
            ProblemDef::Quadratic { a, b, c, lambda } => Ok(Arc::new(QuadraticBilevel::new(
                RealMatrix::from_rows(a)?,
                RealMatrix::from_rows(b)?,
                RealVector::from_slice(c)?,
                *lambda,
            )?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchParams {
    pub estimator: EstimatorKind,
    pub k: Option<usize>,
    pub t: usize,
    pub s: Option<usize>,
    pub gamma: f64,
    pub gamma_alpha: f64,
    pub schedule: Schedule,
    pub rounds: usize,
    pub seed: u64,
    pub epsilon: EpsilonRule,
    pub batch: Option<(usize, usize)>,
    /// `None` means "on for quadratic problems".
    pub record_oracle_error: Option<bool>,
}

/// Optional value lists per axis; a present axis is never empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sweep {
    pub t: Option<Vec<usize>>,
    pub k: Option<Vec<usize>>,
    pub gamma: Option<Vec<f64>>,
    pub gamma_alpha: Option<Vec<f64>>,
    pub seed: Option<Vec<u64>>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.t.is_none() && self.k.is_none() && self.gamma.is_none() && self.gamma_alpha.is_none() && self.seed.is_none()
    }

    /// Names of the axes that are present.
    pub fn axes(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.t.is_some() {
            out.push("T");
        }
        if self.k.is_some() {
            out.push("K");
        }
        if self.gamma.is_some() {
            out.push("gamma");
        }
        if self.gamma_alpha.is_some() {
            out.push("gamma_alpha");
        }
        if self.seed.is_some() {
            out.push("seed");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemDef,
    pub search: SearchParams,
    pub sweep: Sweep,
    pub output: Option<PathBuf>,
    pub format: Format,
}

/// One point of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub run_id: String,
    pub k: Option<usize>,
    pub t: usize,
    pub s: Option<usize>,
    pub gamma: f64,
    pub gamma_alpha: f64,
    pub seed: u64,
    pub config: SearchConfig,
}

struct Entry {
    line: usize,
    value: String,
}

struct Reader {
    entries: BTreeMap<String, Entry>,
    issues: Vec<ConfigIssue>,
}

impl Reader {
    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|e| (e.line, e.value.as_str()))
    }

    fn parse<T: FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let (line, value) = self.raw(key)?;
        match value.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                let message = format!("{key}: expected {what}, got '{value}'");
                self.issues.push(ConfigIssue::at(line, message));
                None
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, what: &str) -> Option<Vec<T>> {
        let (line, value) = self.raw(key)?;
        let mut out = Vec::new();
        for item in value.split(',') {
            let item = item.trim();
            match item.parse::<T>() {
                Ok(v) if !item.is_empty() => out.push(v),
                _ => {
                    let message = format!("{key}: expected a comma-separated list of {what}, got '{item}'");
                    self.issues.push(ConfigIssue::at(line, message));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn matrix(&mut self, key: &str) -> Option<Vec<Vec<f64>>> {
        let (line, value) = self.raw(key)?;
        let rows: Option<Vec<Vec<f64>>> = value
            .split(';')
            .map(|row| row.split(',').map(|x| x.trim().parse::<f64>().ok()).collect())
            .collect();
        match rows {
            Some(rows) if rows.iter().all(|r| r.len() == rows[0].len()) => Some(rows),
            _ => {
                let message = format!("{key}: expected rows of equal length, e.g. '1,0;0,2'");
                self.issues.push(ConfigIssue::at(line, message));
                None
            }
        }
    }

    fn require(&mut self, key: &str) -> bool {
        if self.has(key) {
            true
        } else {
            self.issues.push(ConfigIssue::at(0, format!("missing required key '{key}'")));
            false
        }
    }

    fn issue(&mut self, key: &str, message: impl Into<String>) {
        let line = self.line(key);
        self.issues.push(ConfigIssue::at(line, message));
    }
}

fn tokenize(text: &str) -> Reader {
    let mut reader = Reader {
        entries: BTreeMap::new(),
        issues: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            reader.issues.push(ConfigIssue::at(line, "expected key=value"));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            reader.issues.push(ConfigIssue::at(line, format!("unknown key '{key}'")));
            continue;
        }
        if value.is_empty() {
            reader.issues.push(ConfigIssue::at(line, format!("{key}: empty value")));
            continue;
        }
        if let Some(first) = reader.entries.get(key) {
            let message = format!("duplicate key '{key}' (first set on line {})", first.line);
            reader.issues.push(ConfigIssue::at(line, message));
            continue;
        }
        reader.entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }
    reader
}

fn parse_problem(r: &mut Reader) -> Option<ProblemDef> {
    let inline_keys = ["problem.A", "problem.B", "problem.c", "problem.lambda"];
    if !r.require("problem") {
        return None;
    }
    let (line, name) = r.raw("problem").map(|(l, v)| (l, v.to_string()))?;
    if name == "quadratic" {
        let mut ok = true;
        for key in inline_keys {
            ok &= r.require(key);
        }
        let a = r.matrix("problem.A");
        let b = r.matrix("problem.B");
        let c = r.list::<f64>("problem.c", "numbers");
        let lambda = r.parse::<f64>("problem.lambda", "a number");
        if !ok {
            return None;
        }
        let (a, b, c, lambda) = (a?, b?, c?, lambda?);
        if a.len() != a[0].len() || b.len() != a.len() || c.len() != a.len() {
            r.issue(
                "problem.A",
                "inline quadratic needs A n×n, B n×m and c of length n",
            );
            return None;
        }
        return Some(ProblemDef::Quadratic { a, b, c, lambda });
    }
    for key in inline_keys {
        if r.has(key) {
            r.issue(key, format!("{key} is only valid with problem=quadratic"));
        }
    }
    match name.parse::<Preset>() {
        Ok(p) => Some(ProblemDef::Preset(p)),
        Err(e) => {
            r.issues.push(ConfigIssue::at(line, format!("{e}; or 'quadratic' with problem.A/B/c/lambda")));
            None
        }
    }
}

fn check_gamma(r: &mut Reader, key: &str, values: &[f64], name: &str, strict: bool) {
    for &g in values {
        let ok = g.is_finite() && if strict { g > 0.0 } else { g >= 0.0 };
        if !ok {
            let relation = if strict { ">" } else { "≥" };
            r.issue(key, format!("{name} must be {relation} 0"));
            return;
        }
    }
}

fn parse_search(r: &mut Reader) -> Option<SearchParams> {
    let mut ok = true;
    for key in ["search.estimator", "search.gamma", "search.gamma_alpha", "search.rounds"] {
        ok &= r.require(key);
    }
    let estimator = match r.raw("search.estimator").map(|(l, v)| (l, v.parse::<EstimatorKind>())) {
        Some((_, Ok(kind))) => Some(kind),
        Some((line, Err(e))) => {
            r.issues.push(ConfigIssue::at(line, e.to_string()));
            None
        }
        None => None,
    };
    let k = r.parse::<usize>("search.K", "a non-negative integer");
    let t = r.parse::<usize>("search.T", "a positive integer").unwrap_or(1);
    let s = r.parse::<usize>("search.S", "a positive integer");
    let gamma = r.parse::<f64>("search.gamma", "a number");
    let gamma_alpha = r.parse::<f64>("search.gamma_alpha", "a number");
    let rounds = r.parse::<usize>("search.rounds", "a positive integer");
    let seed = r.parse::<u64>("search.seed", "a non-negative integer").unwrap_or(0);
    let numerator = r.parse::<f64>("search.epsilon", "a number");
    let floor = r.parse::<f64>("search.gamma_alpha_floor", "a number");
    let train = r.parse::<usize>("search.batch_train", "a positive integer");
    let val = r.parse::<usize>("search.batch_val", "a positive integer");
    let record = r.parse::<bool>("search.record_oracle_error", "true or false");

    if let Some(g) = gamma {
        check_gamma(r, "search.gamma", &[g], "gamma", true);
    }
    if let Some(g) = gamma_alpha {
        check_gamma(r, "search.gamma_alpha", &[g], "gamma_alpha", false);
    }
    if r.has("search.T") && t == 0 {
        r.issue("search.T", "T must be ≥ 1");
    }
    if rounds == Some(0) {
        r.issue("search.rounds", "rounds must be ≥ 1");
    }
    let epsilon = match numerator {
        Some(n) if !(n > 0.0 && n.is_finite()) => {
            r.issue("search.epsilon", "epsilon must be > 0");
            EpsilonRule::default()
        }
        Some(n) => EpsilonRule::Scaled { numerator: n },
        None => EpsilonRule::default(),
    };
    let schedule = match r.raw("search.schedule").map(|(_, v)| v.to_string()) {
        None => {
            if r.has("search.gamma_alpha_floor") {
                r.issue("search.gamma_alpha_floor", "gamma_alpha_floor needs search.schedule=cosine");
            }
            Schedule::Constant
        }
        Some(v) if v == "constant" => Schedule::Constant,
        Some(v) if v == "cosine" => Schedule::Cosine {
            floor: floor.unwrap_or(0.0),
        },
        Some(v) => {
            r.issue("search.schedule", format!("unknown schedule '{v}' (valid: constant, cosine)"));
            Schedule::Constant
        }
    };
    let batch = match (train, val) {
        (Some(t), Some(v)) => Some((t, v)),
        (None, None) => None,
        _ => {
            let key = if train.is_some() { "search.batch_train" } else { "search.batch_val" };
            r.issue(key, "search.batch_train and search.batch_val must be given together");
            None
        }
    };

    if let Some(kind) = estimator {
        let fields = [("search.K", "K", kind.uses_k(), k.is_some()), ("search.S", "S", kind.uses_s(), s.is_some())];
        for (key, name, used, present) in fields {
            let swept = key == "search.K" && r.has("sweep.K");
            if present && !used {
                r.issue(key, format!("{name} is not a parameter of {kind}"));
            } else if used && !present && !swept {
                r.issue("search.estimator", format!("{kind} requires {key}"));
            }
        }
        if r.has("sweep.K") && !kind.uses_k() {
            r.issue("sweep.K", format!("K is not a parameter of {kind}"));
        }
        if kind == EstimatorKind::StochasticNeumann && batch.is_none() {
            r.issue("search.estimator", "stochastic_neumann requires search.batch_train and search.batch_val");
        }
    }
    if !ok {
        return None;
    }
    Some(SearchParams {
        estimator: estimator?,
        k,
        t,
        s,
        gamma: gamma?,
        gamma_alpha: gamma_alpha?,
        schedule,
        rounds: rounds?,
        seed,
        epsilon,
        batch,
        record_oracle_error: record,
    })
}

fn parse_sweep(r: &mut Reader) -> Sweep {
    let sweep = Sweep {
        t: r.list::<usize>("sweep.T", "positive integers"),
        k: r.list::<usize>("sweep.K", "non-negative integers"),
        gamma: r.list::<f64>("sweep.gamma", "numbers"),
        gamma_alpha: r.list::<f64>("sweep.gamma_alpha", "numbers"),
        seed: r.list::<u64>("sweep.seed", "non-negative integers"),
    };
    if let Some(g) = &sweep.gamma {
        check_gamma(r, "sweep.gamma", g, "gamma", true);
    }
    if let Some(g) = &sweep.gamma_alpha {
        check_gamma(r, "sweep.gamma_alpha", g, "gamma_alpha", false);
    }
    if sweep.t.as_ref().is_some_and(|t| t.contains(&0)) {
        r.issue("sweep.T", "T must be ≥ 1");
    }
    sweep
}

/// Parses and validates a config; every issue found is reported, not just the first.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let mut r = tokenize(text);
    let problem = parse_problem(&mut r);
    let search = parse_search(&mut r);
    let sweep = parse_sweep(&mut r);
    let output = r.raw("output").map(|(_, v)| PathBuf::from(v));
    let format = match r.raw("format").map(|(l, v)| (l, v.parse::<Format>())) {
        Some((_, Ok(f))) => f,
        Some((line, Err(e))) => {
            r.issues.push(ConfigIssue::at(line, e));
            Format::default()
        }
        None => Format::default(),
    };

    let size = plan_size(&sweep);
    if size > MAX_PLAN_SIZE {
        r.issues.push(ConfigIssue::at(0, format!("sweep expands to {size} runs; the limit is {MAX_PLAN_SIZE}")));
    }
    let (Some(problem), Some(search)) = (problem, search) else {
        return Err(CliError::Config(finish_issues(r.issues)));
    };
    if !r.issues.is_empty() {
        return Err(CliError::Config(finish_issues(r.issues)));
    }

    let config = RunConfig {
        problem,
        search,
        sweep,
        output,
        format,
    };
    // remaining structural checks, e.g. truncated_reverse needing K ≤ T
    let mut issues = Vec::new();
    for run in config.plan() {
        if let Err(e) = run.config.validate() {
            let issue = ConfigIssue::at(r.entries.get("search.estimator").map_or(0, |e| e.line), e.to_string());
            if !issues.contains(&issue) {
                issues.push(issue);
            }
        }
    }
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Config(issues))
    }
}

fn finish_issues(mut issues: Vec<ConfigIssue>) -> Vec<ConfigIssue> {
    issues.sort_by_key(|i| i.line);
    issues.dedup();
    issues
}

/// Number of runs the sweep expands to, computed without overflow.
pub fn plan_size(sweep: &Sweep) -> u128 {
    [
        sweep.t.as_ref().map(Vec::len),
        sweep.k.as_ref().map(Vec::len),
        sweep.gamma.as_ref().map(Vec::len),
        sweep.gamma_alpha.as_ref().map(Vec::len),
        sweep.seed.as_ref().map(Vec::len),
    ]
    .into_iter()
    .map(|n| n.unwrap_or(1) as u128)
    .product()
}

impl RunConfig {
    /// Replaces the seed and any seed axis with a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.search.seed = seed;
        self.sweep.seed = None;
    }

    /// Cartesian product of the sweep axes in the order T, K, gamma,
    /// gamma_alpha, seed, with seed varying fastest.
    pub fn plan(&self) -> Vec<PlannedRun> {
        let p = &self.search;
        let ts = self.sweep.t.clone().unwrap_or_else(|| vec![p.t]);
        let ks: Vec<Option<usize>> = match &self.sweep.k {
            Some(ks) => ks.iter().copied().map(Some).collect(),
            None => vec![p.k],
        };
        let gammas = self.sweep.gamma.clone().unwrap_or_else(|| vec![p.gamma]);
        let gamma_alphas = self.sweep.gamma_alpha.clone().unwrap_or_else(|| vec![p.gamma_alpha]);
        let seeds = self.sweep.seed.clone().unwrap_or_else(|| vec![p.seed]);
        let record = p
            .record_oracle_error
            .unwrap_or(matches!(self.problem, ProblemDef::Quadratic { .. } | ProblemDef::Preset(Preset::QuadScalar | Preset::Quad10d)));

        let mut out = Vec::new();
        for &t in &ts {
            for &k in &ks {
                for &gamma in &gammas {
                    for &gamma_alpha in &gamma_alphas {
                        for &seed in &seeds {
                            let spec = EstimatorSpec {
                                kind: p.estimator,
                                k,
                                t: p.estimator.uses_t().then_some(t),
                                s: p.s,
                                gamma,
                                epsilon_rule: p.epsilon,
                                batch_mode: match p.batch {
                                    Some((train, val)) => BatchMode::Minibatch { train, val },
                                    None => BatchMode::Full,
                                },
                            };
                            let mut config = SearchConfig::new(spec, t, gamma_alpha, p.rounds, seed);
                            config.schedule = p.schedule;
                            config.record_oracle_error = record;
                            out.push(PlannedRun {
                                run_id: format!("run{:05}", out.len()),
                                k,
                                t,
                                s: p.s,
                                gamma,
                                gamma_alpha,
                                seed,
                                config,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}
