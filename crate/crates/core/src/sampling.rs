//! Mini-batch construction: `c` classes with `k` samples each, drawn from the
//! train split under one of four source policies.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SourceRegistry};
use crate::{ClassId, Error, Result, SourceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Classes per batch.
    pub c: usize,
    /// Samples per class.
    pub k: usize,
}

impl Default for BatchSpec {
    /// 26 x 5 = 130
    fn default() -> Self {
        BatchSpec { c: 26, k: 5 }
    }
}

impl BatchSpec {
    pub fn from_batch_size(batch_size: usize, k: usize) -> Result<Self> {
        if k == 0 || batch_size % k != 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} is not a multiple of k = {k}"
            )));
        }
        let spec = BatchSpec { c: batch_size / k, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn batch_size(&self) -> usize {
        self.c * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "batch needs c >= 2 and k >= 2, got c = {}, k = {}",
                self.c, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Classes drawn from the union of all sources; batches mix sources.
    Naive,
    /// Single-source batches, source chosen proportionally to its train size.
    SourceSpecific,
    /// Single-source batches, sources chosen uniformly.
    SourceBalanced,
    /// Proportional, with the listed sources' weights multiplied by `factor`.
    Boosted {
        factor: f64,
        boosted: BTreeSet<SourceId>,
    },
}

impl SamplingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingPolicy::Naive => "naive",
            SamplingPolicy::SourceSpecific => "ss",
            SamplingPolicy::SourceBalanced => "bal",
            SamplingPolicy::Boosted { .. } => "boosted",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplingPolicy::Boosted { factor, .. } = self {
            if !(*factor > 0.0 && factor.is_finite()) {
                return Err(Error::Config(format!("boost factor must be positive, got {factor}")));
            }
        }
        Ok(())
    }
}

/// One training batch, as indices into [`Dataset::samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    /// Class identity of each sample. For single-source batches this is the
    /// class id; for mixed batches it encodes the (source, class) pair.
    pub labels: Vec<u32>,
    /// Set when every sample comes from one source.
    pub source_id: Option<SourceId>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Label of a class in the fused (disjoint-union) label space.
pub fn fused_label(source: SourceId, class: ClassId) -> u32 {
    ((source as u32) << 16) | class as u32
}

/// Selection probability of every source under a single-source policy.
pub fn source_probabilities(
    registry: &SourceRegistry,
    policy: &SamplingPolicy,
) -> Result<Vec<(SourceId, f64)>> {
    policy.validate()?;
    if registry.m() == 0 {
        return Err(Error::Sampling("registry has no sources".into()));
    }
    let weights: Vec<(SourceId, f64)> = registry
        .sources
        .iter()
        .map(|s| {
            let id = s.source_id;
            let n = registry.train_size(id) as f64;
            let w = match policy {
                SamplingPolicy::SourceSpecific => n,
                SamplingPolicy::SourceBalanced => 1.0,
                SamplingPolicy::Boosted { factor, boosted } => {
                    if boosted.contains(&id) {
                        n * factor
                    } else {
                        n
                    }
                }
                SamplingPolicy::Naive => f64::NAN,
            };
            (id, w)
        })
        .collect();
    if matches!(policy, SamplingPolicy::Naive) {
        return Err(Error::Config(
            "naive sampling does not choose a source per batch".into(),
        ));
    }
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return Err(Error::Sampling("all sources have empty train splits".into()));
    }
    Ok(weights.into_iter().map(|(id, w)| (id, w / total)).collect())
}

fn draw<R: Rng + ?Sized>(probs: &[(SourceId, f64)], rng: &mut R) -> SourceId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in probs {
        acc += p;
        if u < acc {
            return id;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rev().find(|p| p.1 > 0.0).map(|p| p.0).unwrap_or(probs[0].0)
}

/// Picks the source of the next single-source batch.
pub fn choose_source<R: Rng + ?Sized>(
    registry: &SourceRegistry,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<SourceId> {
    let probs = source_probabilities(registry, policy)?;
    Ok(draw(&probs, rng))
}

/// Train indices grouped by source and class.
#[derive(Debug, Clone)]
pub struct TrainPools {
    by_source: BTreeMap<SourceId, Vec<(ClassId, Vec<usize>)>>,
}

impl TrainPools {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        let mut by_source = BTreeMap::new();
        for id in dataset.registry.source_ids() {
            let classes = dataset.train_classes(id)?.into_iter().collect();
            by_source.insert(id, classes);
        }
        Ok(TrainPools { by_source })
    }

    fn eligible(&self, source: SourceId, k: usize) -> Result<Vec<&(ClassId, Vec<usize>)>> {
        let classes = self
            .by_source
            .get(&source)
            .ok_or_else(|| Error::Sampling(format!("unknown source {source}")))?;
        Ok(classes.iter().filter(|(_, v)| v.len() >= k).collect())
    }
}

fn fill<R: Rng + ?Sized>(
    chosen: &[(SourceId, &(ClassId, Vec<usize>))],
    spec: &BatchSpec,
    fused: bool,
    rng: &mut R,
) -> MiniBatch {
    let mut indices = Vec::with_capacity(spec.batch_size());
    let mut labels = Vec::with_capacity(spec.batch_size());
    for (source, (class, pool)) in chosen {
        let label = if fused {
            fused_label(*source, *class)
        } else {
            *class as u32
        };
        for j in index::sample(rng, pool.len(), spec.k) {
            indices.push(pool[j]);
            labels.push(label);
        }
    }
    let first = chosen[0].0;
    let source_id = chosen.iter().all(|c| c.0 == first).then_some(first);
    MiniBatch {
        indices,
        labels,
        source_id,
    }
}

/// `c` distinct classes of one source, `k` train samples each, all without
/// replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    pools: &TrainPools,
    spec: &BatchSpec,
    source: SourceId,
    rng: &mut R,
) -> Result<MiniBatch> {
    spec.validate()?;
    let eligible = pools.eligible(source, spec.k)?;
    if eligible.len() < spec.c {
        return Err(Error::Sampling(format!(
            "source {source} has {} classes with >= {} train samples, batch needs {}",
            eligible.len(),
            spec.k,
            spec.c
        )));
    }
    let chosen: Vec<_> = index::sample(rng, eligible.len(), spec.c)
        .into_iter()
        .map(|i| (source, eligible[i]))
        .collect();
    Ok(fill(&chosen, spec, false, rng))
}

/// `c` distinct classes from the fused label space of every source, `k`
/// samples each.
pub fn sample_naive_batch<R: Rng + ?Sized>(
    pools: &TrainPools,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<MiniBatch> {
    spec.validate()?;
    let mut eligible = Vec::new();
    for &source in pools.by_source.keys() {
        eligible.extend(pools.eligible(source, spec.k)?.into_iter().map(|c| (source, c)));
    }
    if eligible.len() < spec.c {
        return Err(Error::Sampling(format!(
            "fused pool has {} classes with >= {} train samples, batch needs {}",
            eligible.len(),
            spec.k,
            spec.c
        )));
    }
    let chosen: Vec<_> = index::sample(rng, eligible.len(), spec.c)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    Ok(fill(&chosen, spec, true, rng))
}

/// Infinite batch stream for one training run under one policy.
pub struct BatchSampler<'a, R> {
    dataset: &'a Dataset,
    pools: TrainPools,
    spec: BatchSpec,
    policy: SamplingPolicy,
    probs: Vec<(SourceId, f64)>,
    rng: R,
}

impl<'a, R: Rng> BatchSampler<'a, R> {
    pub fn new(dataset: &'a Dataset, spec: BatchSpec, policy: SamplingPolicy, rng: R) -> Result<Self> {
        spec.validate()?;
        policy.validate()?;
        let probs = match policy {
            SamplingPolicy::Naive => Vec::new(),
            _ => source_probabilities(&dataset.registry, &policy)?,
        };
        Ok(BatchSampler {
            dataset,
            pools: TrainPools::build(dataset)?,
            spec,
            policy,
            probs,
            rng,
        })
    }

    /// Sampler restricted to a single source.
    pub fn single_source(dataset: &'a Dataset, spec: BatchSpec, source: SourceId, rng: R) -> Result<Self> {
        if dataset.registry.spec(source).is_none() {
            return Err(Error::Sampling(format!("unknown source {source}")));
        }
        let mut s = Self::new(dataset, spec, SamplingPolicy::SourceSpecific, rng)?;
        s.probs = vec![(source, 1.0)];
        Ok(s)
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn next_batch(&mut self) -> Result<MiniBatch> {
        match self.policy {
            SamplingPolicy::Naive => sample_naive_batch(&self.pools, &self.spec, &mut self.rng),
            _ => {
                let source = draw(&self.probs, &mut self.rng);
                sample_batch(&self.pools, &self.spec, source, &mut self.rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_sources, generate_synthetic, SourceSpec, SourceSplits, SplitRatios};
    use crate::numerics::RngSeed;

    fn registry_with_sizes(sizes: &[usize]) -> SourceRegistry {
        let mut reg = SourceRegistry::default();
        for (i, &n) in sizes.iter().enumerate() {
            reg.sources.push(SourceSpec {
                source_id: i as SourceId,
                n_classes: 2,
                samples_per_class: 4,
                cluster_spread: 1.0,
                inter_class_separation: 1.0,
                difficulty_drift: 0.0,
            });
            reg.splits.insert(
                i as SourceId,
                SourceSplits {
                    train: (0..n).collect(),
                    ..Default::default()
                },
            );
        }
        reg
    }

    fn default_dataset() -> Dataset {
        generate_synthetic(&default_sources(), 32, RngSeed(0))
            .unwrap()
            .split(SplitRatios::default(), RngSeed(1))
            .unwrap()
    }

    #[test]
    fn proportional_probabilities() {
        let reg = registry_with_sizes(&[10292, 7304, 14923]);
        let p = source_probabilities(&reg, &SamplingPolicy::SourceSpecific).unwrap();
        let total = (10292 + 7304 + 14923) as f64;
        let want = [10292.0 / total, 7304.0 / total, 14923.0 / total];
        for ((_, got), w) in p.iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
        assert!((p[0].1 - 0.3165).abs() < 5e-5);
        assert!((p[1].1 - 0.2246).abs() < 5e-5);
        assert!((p[2].1 - 0.4589).abs() < 5e-5);
        let b = source_probabilities(&reg, &SamplingPolicy::SourceBalanced).unwrap();
        assert!(b.iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn boosted_equalizes_large_source() {
        let reg = registry_with_sizes(&[100, 100, 100, 10_000]);
        let policy = SamplingPolicy::Boosted {
            factor: 100.0,
            boosted: [0, 1, 2].into_iter().collect(),
        };
        let p = source_probabilities(&reg, &policy).unwrap();
        assert!(p.iter().all(|(_, v)| (v - 0.25).abs() < 1e-12));
        let mut rng = RngSeed(4).rng();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| choose_source(&reg, &policy, &mut rng).unwrap() == 3)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.25).abs() < 0.02, "{freq}");
    }

    #[test]
    fn choose_source_errors() {
        let reg = SourceRegistry::default();
        let mut rng = RngSeed(0).rng();
        assert!(choose_source(&reg, &SamplingPolicy::SourceSpecific, &mut rng).is_err());
        let reg = registry_with_sizes(&[5]);
        assert!(choose_source(&reg, &SamplingPolicy::Naive, &mut rng).is_err());
        let bad = SamplingPolicy::Boosted {
            factor: 0.0,
            boosted: BTreeSet::new(),
        };
        assert!(choose_source(&reg, &bad, &mut rng).is_err());
    }

    #[test]
    fn tiny_source_full_permutation() {
        let spec = SourceSpec {
            source_id: 0,
            n_classes: 2,
            samples_per_class: 4,
            cluster_spread: 0.1,
            inter_class_separation: 1.0,
            difficulty_drift: 0.0,
        };
        let d = generate_synthetic(&[spec], 8, RngSeed(0))
            .unwrap()
            .split(SplitRatios::default(), RngSeed(0))
            .unwrap();
        let pools = TrainPools::build(&d).unwrap();
        let mut rng = RngSeed(3).rng();
        let b = sample_batch(&pools, &BatchSpec { c: 2, k: 2 }, 0, &mut rng).unwrap();
        let mut got = b.indices.clone();
        got.sort_unstable();
        assert_eq!(got, d.registry.splits[&0].train);
        assert_eq!(b.source_id, Some(0));
    }

    fn check_structure(b: &MiniBatch, spec: &BatchSpec) {
        assert_eq!(b.len(), spec.batch_size());
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for l in &b.labels {
            *counts.entry(*l).or_default() += 1;
        }
        assert_eq!(counts.len(), spec.c);
        assert!(counts.values().all(|&n| n == spec.k));
        let distinct: BTreeSet<_> = b.indices.iter().collect();
        assert_eq!(distinct.len(), b.len());
    }

    #[test]
    fn batches_have_c_by_k_structure() {
        let d = default_dataset();
        let spec = BatchSpec::default();
        let pools = TrainPools::build(&d).unwrap();
        let mut rng = RngSeed(5).rng();
        for source in 0..3 {
            let b = sample_batch(&pools, &spec, source, &mut rng).unwrap();
            check_structure(&b, &spec);
            assert_eq!(b.source_id, Some(source));
            let train: BTreeSet<_> = d.registry.splits[&source].train.iter().collect();
            assert!(b.indices.iter().all(|i| train.contains(i) && d.samples[*i].source_id == source));
            assert!(b
                .indices
                .iter()
                .zip(&b.labels)
                .all(|(i, l)| d.samples[*i].class_id as u32 == *l));
        }
        let b = sample_naive_batch(&pools, &spec, &mut rng).unwrap();
        check_structure(&b, &spec);
    }

    #[test]
    fn insufficient_classes() {
        let d = default_dataset();
        let pools = TrainPools::build(&d).unwrap();
        let mut rng = RngSeed(5).rng();
        let too_many = BatchSpec { c: 51, k: 5 };
        assert!(matches!(sample_batch(&pools, &too_many, 0, &mut rng), Err(Error::Sampling(_))));
        let too_deep = BatchSpec { c: 2, k: 100 };
        assert!(matches!(sample_naive_batch(&pools, &too_deep, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn naive_matches_single_source_batch() {
        let d = generate_synthetic(&default_sources()[..1], 32, RngSeed(0))
            .unwrap()
            .split(SplitRatios::default(), RngSeed(1))
            .unwrap();
        let pools = TrainPools::build(&d).unwrap();
        let spec = BatchSpec { c: 8, k: 4 };
        for seed in 0..5 {
            let a = sample_batch(&pools, &spec, 0, &mut RngSeed(seed).rng()).unwrap();
            let b = sample_naive_batch(&pools, &spec, &mut RngSeed(seed).rng()).unwrap();
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn naive_batches_mix_sources() {
        let d = default_dataset();
        let pools = TrainPools::build(&d).unwrap();
        let mut rng = RngSeed(8).rng();
        let spec = BatchSpec::default();
        let mixed = (0..1000)
            .filter(|_| {
                let b = sample_naive_batch(&pools, &spec, &mut rng).unwrap();
                let s: BTreeSet<_> = b.indices.iter().map(|&i| d.samples[i].source_id).collect();
                s.len() >= 2
            })
            .count();
        assert!(mixed >= 990);
    }

    #[test]
    fn class_selection_is_uniform() {
        let d = default_dataset();
        let pools = TrainPools::build(&d).unwrap();
        let mut rng = RngSeed(21).rng();
        let spec = BatchSpec { c: 10, k: 5 };
        let n = 10_000;
        let classes = d.registry.spec(0).unwrap().n_classes;
        let mut counts = vec![0usize; classes];
        for _ in 0..n {
            let b = sample_batch(&pools, &spec, 0, &mut rng).unwrap();
            for l in b.labels.iter().step_by(spec.k) {
                counts[*l as usize] += 1;
            }
        }
        // each class appears with probability c / n_classes per batch
        let p = 10.0 / classes as f64;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn sampler_is_deterministic_and_single_source() {
        let d = default_dataset();
        let run = |seed| {
            let mut s = BatchSampler::new(&d, BatchSpec::default(), SamplingPolicy::SourceBalanced, RngSeed(seed).rng()).unwrap();
            (0..20).map(|_| s.next_batch().unwrap()).collect::<Vec<_>>()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.iter().all(|b| b.source_id.is_some()));
        let mut s = BatchSampler::single_source(&d, BatchSpec::default(), 2, RngSeed(0).rng()).unwrap();
        assert!((0..10).all(|_| s.next_batch().unwrap().source_id == Some(2)));
    }
}
