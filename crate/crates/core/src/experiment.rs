//! Synthetic domain-skewed regression, the SGD training loop and the five
//! ablation presets.
//!
//! Every seed owns three independent random streams: one for the task
//! (domain means and per-domain maps), one for parameter initialization and
//! one for batches. All presets of a suite therefore see the same data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gradients::{evaluate, gradient_at, GradientBundle};
use crate::losses::LossWeights;
use crate::math::{gaussian_sample, Matrix, Rng};
use crate::metrics::{
    expert_overlap, maxvio, rmse, routing_variance, score_variance, silhouette, MetricsRecord,
    DEFAULT_OVERLAP_K,
};
use crate::moe::{ExpertOutputs, MoeParams, RoutingState};

const TASK_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

/// Trailing window used for "final" values.
pub const FINAL_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    WithoutAll,
    OnlyAux,
    WithoutLv,
    WithoutLo,
    Ours,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::WithoutAll,
        Ablation::OnlyAux,
        Ablation::WithoutLv,
        Ablation::WithoutLo,
        Ablation::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::WithoutAll => "without_all",
            Self::OnlyAux => "only_aux",
            Self::WithoutLv => "without_lv",
            Self::WithoutLo => "without_lo",
            Self::Ours => "ours",
        }
    }

    /// Zeroes the weights this preset switches off.
    pub fn apply(self, base: &LossWeights) -> LossWeights {
        let mut w = *base;
        match self {
            Self::WithoutAll => {
                w.alpha = 0.0;
                w.beta = 0.0;
                w.gamma = 0.0;
            }
            Self::OnlyAux => {
                w.beta = 0.0;
                w.gamma = 0.0;
            }
            Self::WithoutLv => w.gamma = 0.0,
            Self::WithoutLo => w.beta = 0.0,
            Self::Ours => {}
        }
        w
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Ablation::ALL
            .into_iter()
            .find(|a| {
                a.name() == key || format!("{a:?}").to_ascii_lowercase() == key.replace('_', "")
            })
            .ok_or_else(|| LabError::Unknown {
                kind: "ablation",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub d_out: usize,
    pub n: usize,
    pub k: usize,
    #[serde(rename = "N_batch")]
    pub n_batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub n_domains: usize,
    /// Distance between any two domain means.
    pub domain_spread: f64,
    pub noise_std: f64,
    pub seeds: Vec<u64>,
    /// Base weights; the ablation zeroes some of them.
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Reuse the first batch at every step.
    pub fixed_batch: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 16,
            d_out: 8,
            n: 8,
            k: 2,
            n_batch: 256,
            steps: 500,
            lr: 1e-2,
            n_domains: 8,
            domain_spread: 6.0,
            noise_std: 0.05,
            seeds: vec![7, 8, 9],
            weights: LossWeights::default(),
            ablation: Ablation::Ours,
            fixed_batch: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_out", self.d_out),
            ("n", self.n),
            ("k", self.k),
            ("N_batch", self.n_batch),
            ("n_domains", self.n_domains),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LabError::Config(format!("{name} must be positive")));
            }
        }
        if self.k > self.n {
            return Err(LabError::Config(format!(
                "k = {} exceeds n = {}",
                self.k, self.n
            )));
        }
        if self.n_domains > self.d {
            return Err(LabError::Config(format!(
                "n_domains = {} needs as many orthogonal directions in d = {}",
                self.n_domains, self.d
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LabError::Config("lr must be finite and >= 0".into()));
        }
        if !(self.domain_spread.is_finite() && self.domain_spread >= 0.0) {
            return Err(LabError::Config(
                "domain_spread must be finite and >= 0".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(LabError::Config("noise_std must be finite and >= 0".into()));
        }
        self.weights
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))
    }

    /// Weights after the ablation has been applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.weights)
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }
}

/// Fixed per-seed structure of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    /// n_domains × d
    pub means: Matrix,
    /// One d × d_out map per domain.
    pub maps: Vec<Matrix>,
    /// Sampling probabilities, ∝ 1/rank.
    pub domain_probs: Vec<f64>,
}

/// Orthonormal rows via Gram–Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a near-degenerate draw is simply redrawn
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl SyntheticTask {
    pub fn new(config: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        // orthonormal directions scaled so that means sit domain_spread apart
        let scale = config.domain_spread / 2f64.sqrt();
        let dirs = orthonormal_rows(rng, config.n_domains, config.d);
        let means = Matrix::from_vec(
            config.n_domains,
            config.d,
            dirs.concat().into_iter().map(|v| v * scale).collect(),
        )?;
        let map_std = 1.0 / (config.d as f64).sqrt();
        let maps = (0..config.n_domains)
            .map(|_| gaussian_sample(rng, config.d, config.d_out, 0.0, map_std))
            .collect();
        let raw: Vec<f64> = (1..=config.n_domains).map(|r| 1.0 / r as f64).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            means,
            maps,
            domain_probs: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    /// `(X, targets, domain labels)` for one batch.
    pub fn sample(&self, config: &ExperimentConfig, rng: &mut Rng) -> Result<Batch> {
        let (tokens, d, d_out) = (config.n_batch, config.d, config.d_out);
        let mut x = Vec::with_capacity(tokens * d);
        let mut y = Vec::with_capacity(tokens * d_out);
        let mut domains = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let c = rng.weighted_index(&self.domain_probs);
            let start = x.len();
            x.extend(self.means.row(c).iter().map(|m| m + rng.standard_normal()));
            let xi = ndarray::ArrayView1::from(&x[start..]);
            let yi = xi.dot(self.maps[c].as_array());
            y.extend(yi.iter().map(|v| v + rng.normal(0.0, config.noise_std)));
            domains.push(c);
        }
        Ok(Batch {
            x: Matrix::from_vec(tokens, d, x)?,
            targets: Matrix::from_vec(tokens, d_out, y)?,
            domains,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub targets: Matrix,
    pub domains: Vec<usize>,
}

/// Draws the task for `seed` and one batch from its batch stream.
pub fn generate_batch(config: &ExperimentConfig, seed: u64) -> Result<Batch> {
    let root = Rng::new(seed);
    let task = SyntheticTask::new(config, &mut root.derive(TASK_STREAM))?;
    task.sample(config, &mut root.derive(BATCH_STREAM))
}

pub fn init_params(config: &ExperimentConfig, rng: &mut Rng) -> Result<MoeParams> {
    let std = 1.0 / (config.d as f64).sqrt();
    let router = gaussian_sample(rng, config.d, config.n, 0.0, std);
    let experts = (0..config.n)
        .map(|_| gaussian_sample(rng, config.d, config.d_out, 0.0, std))
        .collect();
    MoeParams::new(router, experts, config.k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub final_params: MoeParams,
}

impl TrainLog {
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.value(name)).collect()
    }

    /// Mean of a column over the last `FINAL_WINDOW` steps (or all of them).
    pub fn final_mean(&self, name: &str) -> Option<f64> {
        trailing_mean(&self.column(name), FINAL_WINDOW)
    }
}

fn trailing_mean(values: &[f64], window: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let tail = &values[values.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Diagnostics for one step; the embeddings are each token's top-1 expert
/// output, labelled by that expert.
pub fn step_metrics(
    step: usize,
    eval_state: &RoutingState,
    outputs: &ExpertOutputs,
    losses: &crate::losses::LossBreakdown,
) -> Result<MetricsRecord> {
    let tokens = eval_state.num_tokens();
    let mut record = MetricsRecord::with_losses(step, losses);
    let loads: Vec<f64> = eval_state
        .loads_f
        .iter()
        .map(|f| f * tokens as f64)
        .collect();
    record.maxvio = maxvio(&loads)?;

    let top1 = eval_state.top1();
    let d_out = outputs.combined.cols();
    let mut values = Vec::with_capacity(tokens * d_out);
    for (i, &j) in top1.iter().enumerate() {
        match outputs.output(i, j) {
            Some(v) => values.extend(v.iter()),
            None => values.extend(std::iter::repeat_n(0.0, d_out)),
        }
    }
    let embeddings = Matrix::from_vec(tokens, d_out, values)?;
    record.expert_overlap = expert_overlap(&embeddings, &top1, DEFAULT_OVERLAP_K)?;
    // a batch routed entirely to one expert has no second cluster
    let distinct = top1.iter().collect::<std::collections::BTreeSet<_>>().len();
    record.silhouette = if distinct < 2 {
        0.0
    } else {
        silhouette(&embeddings, &top1)?
    };
    record.routing_variance = routing_variance(&eval_state.probs)?;
    record.score_variance = score_variance(eval_state);
    Ok(record)
}

fn sgd_step(params: &mut MoeParams, grads: &GradientBundle, lr: f64) -> Result<()> {
    let router = params.router.as_array() - &(grads.d_router.as_array() * lr);
    params.router = Matrix::from_array(router)?;
    for (e, g) in params.experts.iter_mut().zip(&grads.d_experts) {
        *e = Matrix::from_array(e.as_array() - &(g.as_array() * lr))?;
    }
    Ok(())
}

/// Trains one seed. On a non-finite loss the error carries the step index.
pub fn train_seed(config: &ExperimentConfig, seed: u64) -> Result<TrainLog> {
    train_seed_with(config, seed, |_| Ok(()))
}

/// Like [`train_seed`], handing every record to `sink` as soon as it exists.
pub fn train_seed_with<F>(config: &ExperimentConfig, seed: u64, mut sink: F) -> Result<TrainLog>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    config.validate()?;
    let root = Rng::new(seed);
    let task = SyntheticTask::new(config, &mut root.derive(TASK_STREAM))?;
    let mut params = init_params(config, &mut root.derive(INIT_STREAM))?;
    let mut batch_rng = root.derive(BATCH_STREAM);
    let weights = config.effective_weights();
    let fixed = if config.fixed_batch {
        Some(task.sample(config, &mut batch_rng)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(config.steps);
    let mut prev_scales = None;
    for step in 0..config.steps {
        let drawn;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                drawn = task.sample(config, &mut batch_rng)?;
                &drawn
            }
        };
        let eval = evaluate(&params, &batch.x, &batch.targets, &weights, prev_scales)
            .map_err(|e| diverged(step, e))?;
        if !eval.breakdown.total.is_finite() {
            return Err(LabError::Diverged {
                step,
                what: format!("total loss {}", eval.breakdown.total),
            });
        }
        let record = step_metrics(step, &eval.state, &eval.outputs, &eval.breakdown)?;
        sink(&record)?;
        records.push(record);
        let grads = gradient_at(&params, &batch.x, &batch.targets, &weights, &eval)?;
        sgd_step(&mut params, &grads, config.lr).map_err(|e| diverged(step, e))?;
        if weights.dynamic_scaling {
            prev_scales = Some(eval.breakdown.scales());
        }
    }
    Ok(TrainLog {
        config: config.clone(),
        seed,
        records,
        final_params: params,
    })
}

fn diverged(step: usize, err: LabError) -> LabError {
    match err {
        LabError::NonFinite(what) => LabError::Diverged { step, what },
        other => other,
    }
}

/// One log per configured seed, in seed order.
pub fn train(config: &ExperimentConfig) -> Result<Vec<TrainLog>> {
    config
        .seeds
        .par_iter()
        .map(|&s| train_seed(config, s))
        .collect()
}

/// Seed-averaged finals and curve distances for one preset.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub ablation: Ablation,
    /// Column name → seed-averaged trailing mean.
    pub finals: BTreeMap<&'static str, f64>,
    /// Seed-averaged RMSE between this preset's maxvio curve and OnlyAux's.
    pub rmse_maxvio_vs_onlyaux: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSuite {
    pub logs: BTreeMap<Ablation, Vec<TrainLog>>,
    pub summaries: BTreeMap<Ablation, AblationSummary>,
}

impl AblationSuite {
    pub fn final_of(&self, ablation: Ablation, column: &str) -> f64 {
        self.summaries[&ablation].finals[column]
    }
}

/// Runs all five presets over the configured seeds (the config's own
/// ablation field is ignored).
pub fn run_ablation_suite(base: &ExperimentConfig) -> Result<AblationSuite> {
    if base.seeds.len() < 3 {
        return Err(LabError::Config(format!(
            "an ablation suite needs at least 3 seeds, got {}",
            base.seeds.len()
        )));
    }
    base.validate()?;
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .iter()
        .flat_map(|&a| base.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<TrainLog> = jobs
        .par_iter()
        .map(|&(a, s)| train_seed(&base.with_ablation(a), s))
        .collect::<Result<_>>()?;
    let mut logs: BTreeMap<Ablation, Vec<TrainLog>> = BTreeMap::new();
    for ((a, _), log) in jobs.into_iter().zip(results) {
        logs.entry(a).or_default().push(log);
    }
    let summaries = summarize(&logs)?;
    Ok(AblationSuite { logs, summaries })
}

pub fn summarize(
    logs: &BTreeMap<Ablation, Vec<TrainLog>>,
) -> Result<BTreeMap<Ablation, AblationSummary>> {
    let reference = logs
        .get(&Ablation::OnlyAux)
        .ok_or_else(|| LabError::Config("summary needs the only_aux preset".into()))?;
    let mut out = BTreeMap::new();
    for (&ablation, runs) in logs {
        let mut finals = BTreeMap::new();
        for column in &crate::metrics::LOG_COLUMNS[1..] {
            let per_seed: Vec<f64> = runs.iter().filter_map(|l| l.final_mean(column)).collect();
            let mean = if per_seed.is_empty() {
                f64::NAN
            } else {
                per_seed.iter().sum::<f64>() / per_seed.len() as f64
            };
            finals.insert(*column, mean);
        }
        let mut distances = Vec::with_capacity(runs.len());
        for (run, base) in runs.iter().zip(reference) {
            let (a, b) = (run.column("maxvio"), base.column("maxvio"));
            if !a.is_empty() {
                distances.push(rmse(&a, &b)?);
            }
        }
        let rmse_maxvio_vs_onlyaux = if distances.is_empty() {
            f64::NAN
        } else {
            distances.iter().sum::<f64>() / distances.len() as f64
        };
        out.insert(
            ablation,
            AblationSummary {
                ablation,
                finals,
                rmse_maxvio_vs_onlyaux,
            },
        );
    }
    Ok(out)
}
