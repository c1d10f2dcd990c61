//! Specialist, fused-baseline and distillation training loops.
//!
//! Every loop draws batches from its own seeded sampler, takes one Adam step
//! per batch and evaluates validation Recall@1 every `checkpoint_every`
//! iterations. The returned model is the checkpoint with the best mean
//! validation Recall@1 over the evaluated sources.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::encoder::{forward_traced, init_params, Embedder, EncoderConfig, EncoderParams};
use crate::evaluation::evaluate_sources;
use crate::losses::{rkd_loss, BatchDistances, LossValue, MetricLoss};
use crate::numerics::{adam_step, AdamState, RngSeed};
use crate::sampling::{source_probabilities, BatchSampler, BatchSpec, MiniBatch, SamplingPolicy};
use crate::{Error, Result, SourceId};

const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;

/// Seed used when none is configured.
pub const DEFAULT_SEED: u64 = 20_210_613;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub lr: f64,
    pub batch: BatchSpec,
    pub loss: MetricLoss,
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub normalized_rkd: bool,
    /// Sources trained with `loss` during distillation instead of matching a
    /// specialist.
    pub mixed_direct_sources: BTreeSet<SourceId>,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            checkpoint_every: 250,
            lr: 1e-5,
            batch: BatchSpec::default(),
            loss: MetricLoss::default(),
            policy: SamplingPolicy::SourceSpecific,
            seed: DEFAULT_SEED,
            normalized_rkd: false,
            mixed_direct_sources: BTreeSet::new(),
            encoder: EncoderConfig::default(),
        }
    }
}

/// Step size for distillation runs of the synthetic benchmark.
pub const BENCHMARK_DISTILL_LR: f64 = 2e-3;

impl TrainConfig {
    /// Budget and step size used for the synthetic benchmark. The small
    /// encoder trains from scratch, so it needs a much larger step than the
    /// default.
    pub fn benchmark() -> Self {
        TrainConfig {
            iterations: 2000,
            checkpoint_every: 100,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.iterations % self.checkpoint_every != 0 {
            return Err(Error::Config(format!(
                "iterations ({}) must be a multiple of checkpoint_every ({})",
                self.iterations, self.checkpoint_every
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.batch.validate()?;
        self.policy.validate()?;
        self.encoder.validate()
    }

    pub fn rng_seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }
}

/// Frozen per-source teachers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecialistSet {
    models: BTreeMap<SourceId, EncoderParams>,
}

impl SpecialistSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: SourceId, params: EncoderParams) -> Result<()> {
        if let Some((_, other)) = self.models.iter().next() {
            if other.input_dim() != params.input_dim() {
                return Err(Error::Dimension(format!(
                    "specialist for source {source} expects {} features, others expect {}",
                    params.input_dim(),
                    other.input_dim()
                )));
            }
        }
        self.models.insert(source, params);
        Ok(())
    }

    pub fn get(&self, source: SourceId) -> Result<&EncoderParams> {
        self.models.get(&source).ok_or(Error::MissingSpecialist(source))
    }

    pub fn contains(&self, source: SourceId) -> bool {
        self.models.contains_key(&source)
    }

    pub fn ids(&self) -> Vec<SourceId> {
        self.models.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Specialists in ascending source order.
    pub fn iter(&self) -> impl Iterator<Item = (SourceId, &EncoderParams)> {
        self.models.iter().map(|(k, v)| (*k, v))
    }

    /// Input dimension shared by all specialists (0 when empty).
    pub fn input_dim(&self) -> usize {
        self.models.values().next().map_or(0, |p| p.input_dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub source_id: SourceId,
    pub val_recall1: f64,
    /// Mean training loss over the iterations since the previous checkpoint.
    pub loss_avg: f64,
}

/// One row per (checkpoint, evaluated source), in iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Checkpoint iterations in order, without repeats.
    pub fn iterations(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self.records.iter().map(|r| r.iteration).collect();
        out.dedup();
        out
    }

    /// Validation Recall@1 curve of one source.
    pub fn curve(&self, source: SourceId) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.source_id == source)
            .map(|r| (r.iteration, r.val_recall1))
            .collect()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        if self.records.is_empty() {
            out.write_record(["iteration", "source_id", "val_recall1", "loss_avg"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: io::Read>(r: R) -> csv::Result<Self> {
        let records = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<csv::Result<Vec<LogRecord>>>()?;
        Ok(TrainLog { records })
    }
}

/// Hooks into a running training loop.
pub trait TrainObserver {
    /// Called before the update for each batch; `teacher` is the specialist
    /// used for that batch during distillation.
    fn on_batch(&mut self, _iteration: u64, _batch: &MiniBatch, _teacher: Option<SourceId>) {}

    /// Called after each checkpoint evaluation.
    fn on_checkpoint(&mut self, _iteration: u64, _params: &EncoderParams, _records: &[LogRecord]) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights at `best_iteration` (the initial weights if no checkpoint ran).
    pub params: EncoderParams,
    pub best_iteration: u64,
    pub final_params: EncoderParams,
    pub log: TrainLog,
}

enum Objective<'a> {
    Direct,
    Distill {
        specialists: &'a SpecialistSet,
        /// Teacher embedding of every train sample of a distilled source,
        /// indexed by dataset position.
        teacher: Vec<Vec<f64>>,
    },
}

struct Run<'a, R> {
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    sampler: BatchSampler<'a, R>,
    eval_sources: Vec<SourceId>,
    objective: Objective<'a>,
}

fn check_dims(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if config.encoder.input_dim != dataset.input_dim {
        return Err(Error::Dimension(format!(
            "encoder expects {} features, dataset has {}",
            config.encoder.input_dim, dataset.input_dim
        )));
    }
    Ok(())
}

fn diverged(iteration: u64, loss: f64) -> Error {
    Error::Divergence { iteration, loss }
}

impl<R: rand::Rng> Run<'_, R> {
    fn loss(&self, batch: &MiniBatch, embeddings: &[Vec<f64>], observer: &mut dyn TrainObserver, it: u64) -> Result<LossValue> {
        let source = batch.source_id;
        match &self.objective {
            Objective::Distill { specialists, teacher }
                if !source.is_some_and(|s| self.config.mixed_direct_sources.contains(&s)) =>
            {
                let source = source.ok_or_else(|| Error::Sampling("distillation batch mixes sources".into()))?;
                specialists.get(source)?;
                observer.on_batch(it, batch, Some(source));
                let rows: Vec<&[f64]> = batch.indices.iter().map(|&i| teacher[i].as_slice()).collect();
                let t = BatchDistances::from_embeddings(&rows)?;
                rkd_loss(&t, embeddings, self.config.normalized_rkd)
            }
            _ => {
                observer.on_batch(it, batch, None);
                self.config.loss.compute(embeddings, &batch.labels)
            }
        }
    }

    fn execute(mut self, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let config = self.config;
        let seed = config.rng_seed();
        let mut params = init_params(&config.encoder, seed.derive(STREAM_INIT))?;
        let mut adam = AdamState::new(params.as_slice().len(), config.lr)?;
        let mut log = TrainLog::default();
        let mut best = (params.clone(), 0u64, f64::NEG_INFINITY);
        let (mut window_sum, mut window_n) = (0.0, 0u64);

        for it in 1..=config.iterations {
            let batch = self.sampler.next_batch()?;
            let features = self.dataset.features(&batch.indices);
            let trace = forward_traced(&params, &features).map_err(|e| match e {
                Error::NonFinite(_) | Error::Degenerate(_) => diverged(it, f64::NAN),
                other => other,
            })?;
            let embeddings: Vec<Vec<f64>> = trace.embeddings().into_iter().map(|e| e.into_inner()).collect();
            let lv = self.loss(&batch, &embeddings, observer, it).map_err(|e| match e {
                Error::NonFinite(_) => diverged(it, f64::NAN),
                other => other,
            })?;
            if !lv.value.is_finite() || lv.value < 0.0 {
                return Err(diverged(it, lv.value));
            }
            let grad = trace.backward(&params, &lv.grad_embeddings)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(it, lv.value));
            }
            adam_step(params.as_mut_slice(), &grad, &mut adam)?;
            window_sum += lv.value;
            window_n += 1;

            if it % config.checkpoint_every == 0 {
                let report = evaluate_sources(&params, self.dataset, Split::Val, &[1], &self.eval_sources)?;
                let loss_avg = window_sum / window_n as f64;
                let records: Vec<LogRecord> = report
                    .sources
                    .iter()
                    .map(|s| LogRecord {
                        iteration: it,
                        source_id: s.source_id,
                        val_recall1: s.recall[0],
                        loss_avg,
                    })
                    .collect();
                let score = report.average(1).expect("at least one source");
                if score > best.2 {
                    best = (params.clone(), it, score);
                }
                observer.on_checkpoint(it, &params, &records)?;
                log.records.extend(records);
                window_sum = 0.0;
                window_n = 0;
            }
        }
        Ok(TrainOutcome {
            params: best.0,
            best_iteration: best.1,
            final_params: params,
            log,
        })
    }
}

/// Trains one model on one source with the direct metric loss.
pub fn train_specialist(dataset: &Dataset, source: SourceId, config: &TrainConfig) -> Result<TrainOutcome> {
    train_specialist_with(dataset, source, config, &mut Silent)
}

pub fn train_specialist_with(
    dataset: &Dataset,
    source: SourceId,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    check_dims(dataset, config)?;
    let rng = config.rng_seed().derive(STREAM_BATCHES).rng();
    Run {
        dataset,
        config,
        sampler: BatchSampler::single_source(dataset, config.batch, source, rng)?,
        eval_sources: vec![source],
        objective: Objective::Direct,
    }
    .execute(observer)
}

/// Trains one model on all sources together under `config.policy` with the
/// direct metric loss.
pub fn train_fused(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_fused_with(dataset, config, &mut Silent)
}

pub fn train_fused_with(dataset: &Dataset, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    check_dims(dataset, config)?;
    let rng = config.rng_seed().derive(STREAM_BATCHES).rng();
    Run {
        dataset,
        config,
        sampler: BatchSampler::new(dataset, config.batch, config.policy.clone(), rng)?,
        eval_sources: dataset.registry.source_ids(),
        objective: Objective::Direct,
    }
    .execute(observer)
}

/// Trains a fresh student to reproduce each specialist's pairwise distances
/// on single-source batches of that specialist's source. Sources listed in
/// `mixed_direct_sources` use the direct metric loss instead.
pub fn distill(dataset: &Dataset, specialists: &SpecialistSet, config: &TrainConfig) -> Result<TrainOutcome> {
    distill_with(dataset, specialists, config, &mut Silent)
}

pub fn distill_with(
    dataset: &Dataset,
    specialists: &SpecialistSet,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    check_dims(dataset, config)?;
    if matches!(config.policy, SamplingPolicy::Naive) {
        return Err(Error::Config("distillation needs single-source batches; naive sampling is not allowed".into()));
    }
    let probs = source_probabilities(&dataset.registry, &config.policy)?;
    let mut teacher = vec![Vec::new(); dataset.samples.len()];
    for &(id, p) in &probs {
        if p == 0.0 || config.mixed_direct_sources.contains(&id) {
            continue;
        }
        let specialist = specialists.get(id)?;
        if specialist.input_dim() != dataset.input_dim {
            return Err(Error::Dimension(format!(
                "specialist for source {id} expects {} features, dataset has {}",
                specialist.input_dim(),
                dataset.input_dim
            )));
        }
        let train = dataset.registry.indices(id, Split::Train)?;
        for (&i, e) in train.iter().zip(specialist.embed_all(&dataset.features(train))?) {
            teacher[i] = e;
        }
    }
    let rng = config.rng_seed().derive(STREAM_BATCHES).rng();
    Run {
        dataset,
        config,
        sampler: BatchSampler::new(dataset, config.batch, config.policy.clone(), rng)?,
        eval_sources: dataset.registry.source_ids(),
        objective: Objective::Distill { specialists, teacher },
    }
    .execute(observer)
}
