//! Synthetic one-dimensional benchmark: a fixed nonstationary mean function
//! observed with Gaussian noise, split into training and test sets either at
//! random or by holding out the points nearest the centre.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{Dataset, RawTable};
use crate::error::{Result, SagpError};
use crate::inference::{coverage, mean_interval_score, mse, quantile};
use crate::linalg::Points;
use crate::model::{Fit, FittedModel, ModelSpec};
use crate::rng::seeded;

pub fn true_mean(x: f64) -> f64 {
    use std::f64::consts::PI;
    -5.0 - 6.0 * x.powi(3)
        + 30.0 * (x - 0.5).powi(2)
        + 3.0 * (2.0 * x - 1.0).exp()
        + 3.0 * x * x * (12.0 * PI * x).sin()
        + (6.0 * PI * x).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Random,
    /// Test set is the block of points closest to 0.5.
    Interval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Random => "random",
            Split::Interval => "interval",
        })
    }
}

impl FromStr for Split {
    type Err = SagpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Split::Random),
            "interval" => Ok(Split::Interval),
            other => Err(SagpError::InvalidInput(format!(
                "unknown scenario `{other}` (expected random or interval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub n: usize,
    pub noise_var: f64,
    pub split: Split,
    pub train_size: usize,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            n: 200,
            noise_var: 0.1,
            split: Split::Random,
            train_size: 150,
            seed: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.train_size >= self.n {
            problems.push(format!("train_size ({}) must be below n ({})", self.train_size, self.n));
        }
        if self.train_size < 2 {
            problems.push("train_size must be at least 2".into());
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            problems.push("noise_var must be nonnegative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SagpError::Config(problems))
        }
    }
}

/// `(train, test)` for the scenario's own seed.
pub fn generate(scenario: &SimScenario) -> Result<(RawTable, RawTable)> {
    generate_with_rng(scenario, &mut seeded(scenario.seed, 0))
}

pub fn generate_with_rng(scenario: &SimScenario, rng: &mut ChaCha8Rng) -> Result<(RawTable, RawTable)> {
    scenario.validate()?;
    let n = scenario.n;
    let noise = Normal::new(0.0, scenario.noise_var.sqrt()).map_err(|e| SagpError::InvalidInput(e.to_string()))?;
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| true_mean(x) + noise.sample(rng)).collect();
    let n_test = n - scenario.train_size;
    let mut order: Vec<usize> = (0..n).collect();
    match scenario.split {
        Split::Random => order.shuffle(rng),
        Split::Interval => order.sort_by(|&a, &b| (xs[a] - 0.5).abs().total_cmp(&(xs[b] - 0.5).abs())),
    }
    let (test, train) = order.split_at(n_test);
    let table = |idx: &[usize]| RawTable {
        x: Points::from_scalars(&idx.iter().map(|&i| xs[i]).collect::<Vec<_>>()),
        y: Some(idx.iter().map(|&i| ys[i]).collect()),
    };
    Ok((table(train), table(test)))
}

/// Layer count and pseudo-input count of one study configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyConfig {
    pub m: usize,
    pub n_layers: usize,
}

impl StudyConfig {
    pub fn standard() -> Vec<StudyConfig> {
        [(5, 4), (10, 3), (15, 3)]
            .into_iter()
            .map(|(m, n_layers)| StudyConfig { m, n_layers })
            .collect()
    }
}

impl fmt::Display for StudyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={};L={}", self.m, self.n_layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub batch: usize,
    pub config: StudyConfig,
    pub split: Split,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyFailure {
    pub batch: usize,
    pub config: StudyConfig,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config: StudyConfig,
    pub metric: &'static str,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub failures: Vec<StudyFailure>,
}

pub const METRICS: [&str; 3] = ["mse", "coverage", "interval_score"];

impl StudyResult {
    pub fn values(&self, config: StudyConfig, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.config == config && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut configs: Vec<StudyConfig> = Vec::new();
        for r in &self.rows {
            if !configs.contains(&r.config) {
                configs.push(r.config);
            }
        }
        let mut out = Vec::new();
        for c in configs {
            for metric in METRICS {
                let mut v = self.values(c, metric);
                if v.is_empty() {
                    continue;
                }
                v.sort_by(f64::total_cmp);
                out.push(SummaryRow {
                    config: c,
                    metric,
                    q1: quantile(&v, 0.25),
                    median: quantile(&v, 0.5),
                    q3: quantile(&v, 0.75),
                    count: v.len(),
                });
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("batch,config,scenario,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.batch, r.config, r.split, r.metric, r.value);
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::from("config,metric,count,q1,median,q3\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.config, r.metric, r.count, r.q1, r.median, r.q3);
        }
        s
    }

    pub fn failures_table(&self) -> String {
        let mut s = String::from("batch,config,error\n");
        for f in &self.failures {
            let _ = writeln!(s, "{},{},\"{}\"", f.batch, f.config, f.message.replace('"', "'"));
        }
        s
    }
}

/// Held-out metrics of one fit on one batch, in original units.
pub fn evaluate(model: &FittedModel, test: &RawTable, alpha: f64, seed: u64) -> Result<[f64; 3]> {
    let pred = model.predict(&test.x, alpha, seed)?;
    let y = test.y()?;
    Ok([
        mse(y, &pred.mean)?,
        coverage(&pred.lower, &pred.upper, y)?,
        mean_interval_score(&pred.lower, &pred.upper, y, alpha)?,
    ])
}

const FIT_STREAM_BASE: u64 = 1 << 32;

/// Fit every configuration on every batch and score it on the held-out points.
/// Batch `b` draws its data from stream `b` of the scenario seed; failures are
/// recorded and the study carries on.
pub fn run_study(
    batches: usize,
    configs: &[StudyConfig],
    scenario: &SimScenario,
    base: &ModelSpec,
    alpha: f64,
    jobs: usize,
) -> Result<StudyResult> {
    if batches == 0 {
        return Err(SagpError::InvalidInput("at least one batch required".into()));
    }
    if configs.is_empty() {
        return Err(SagpError::Empty("study configurations"));
    }
    scenario.validate()?;
    let tasks: Vec<(usize, usize)> = (0..batches)
        .flat_map(|b| (0..configs.len()).map(move |c| (b, c)))
        .collect();
    let run = |&(b, c): &(usize, usize)| -> Result<[f64; 3]> {
        let (train, test) = generate_with_rng(scenario, &mut seeded(scenario.seed, b as u64))?;
        let data = Dataset::standardize(&train)?;
        let spec = ModelSpec {
            m: configs[c].m,
            n_layers: configs[c].n_layers,
            ..base.clone()
        };
        let stream = FIT_STREAM_BASE + (b * configs.len() + c) as u64;
        let fit = Fit::with_rng(&data.x, &data.y, &spec, seeded(scenario.seed, stream))?;
        let model = FittedModel {
            fit,
            transform: data.transform,
        };
        evaluate(&model, &test, alpha, scenario.seed ^ stream)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SagpError::InvalidInput(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<[f64; 3]>> = pool.install(|| tasks.par_iter().map(run).collect());
    let mut result = StudyResult {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (&(b, c), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok(values) => {
                for (metric, value) in METRICS.into_iter().zip(values) {
                    result.rows.push(StudyRow {
                        batch: b,
                        config: configs[c],
                        split: scenario.split,
                        metric,
                        value,
                    });
                }
            }
            Err(e) => {
                log::warn!("batch {b}, {}: {e}", configs[c]);
                result.failures.push(StudyFailure {
                    batch: b,
                    config: configs[c],
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(result)
}
