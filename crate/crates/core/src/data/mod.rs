//! Synthetic multi-source datasets.
//!
//! Each source lives in its own region of input space (a random offset) and
//! encodes its classes in a private low-dimensional subspace, buried under
//! isotropic nuisance noise. A per-source `difficulty_drift` fraction of
//! samples is drawn from a jittered copy of a *different* class's cluster
//! while keeping its own label: these overlapping points are what a model
//! memorizes when it overfits, and sources with more of them overfit sooner.

mod format;
mod split;

pub use format::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use split::{split, SplitRatios};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::RngSeed;
use crate::{ClassId, Error, Result, SourceId};

/// Number of informative dimensions per source.
pub const SIGNAL_DIMS: usize = 8;
/// Per-coordinate std of the per-source offset in input space.
pub const DOMAIN_SCALE: f64 = 3.0;
/// Std of the per-sample mean jitter applied to overlapping samples, as a
/// fraction of the class separation.
pub const OVERLAP_JITTER: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source_id: SourceId,
    pub class_id: ClassId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: SourceId,
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Per-coordinate std of the isotropic noise added to every sample.
    pub cluster_spread: f64,
    /// Typical distance between two class means of this source.
    pub inter_class_separation: f64,
    /// Fraction of samples drawn around another class's mean.
    pub difficulty_drift: f64,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("source {}: {m}", self.source_id)));
        if self.n_classes < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.n_classes));
        }
        if self.n_classes > ClassId::MAX as usize + 1 {
            return bad(format!("too many classes ({})", self.n_classes));
        }
        if self.samples_per_class < 4 {
            return bad(format!(
                "needs at least 4 samples per class, got {}",
                self.samples_per_class
            ));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!("cluster_spread must be >= 0, got {}", self.cluster_spread));
        }
        if !(self.inter_class_separation > 0.0 && self.inter_class_separation.is_finite()) {
            return bad(format!(
                "inter_class_separation must be > 0, got {}",
                self.inter_class_separation
            ));
        }
        if !(0.0..1.0).contains(&self.difficulty_drift) {
            return bad(format!(
                "difficulty_drift must lie in [0, 1), got {}",
                self.difficulty_drift
            ));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }
}

/// Index lists into [`Dataset::samples`], ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl SourceSplits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// The sources of a dataset and, once assigned, their splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceRegistry {
    pub sources: Vec<SourceSpec>,
    pub splits: BTreeMap<SourceId, SourceSplits>,
}

impl SourceRegistry {
    /// Number of sources.
    pub fn m(&self) -> usize {
        self.sources.len()
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(|s| s.source_id).collect()
    }

    pub fn spec(&self, id: SourceId) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.source_id == id)
    }

    pub fn is_split(&self) -> bool {
        !self.splits.is_empty()
    }

    pub fn indices(&self, id: SourceId, split: Split) -> Result<&[usize]> {
        self.splits
            .get(&id)
            .map(|s| s.get(split))
            .ok_or_else(|| Error::Config(format!("source {id} has no split assignment")))
    }

    pub fn train_size(&self, id: SourceId) -> usize {
        self.splits.get(&id).map_or(0, |s| s.train.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub samples: Vec<Sample>,
    pub registry: SourceRegistry,
}

impl Dataset {
    pub fn sample(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    /// Replaces the split assignment with a fresh stratified split.
    pub fn split(mut self, ratios: SplitRatios, seed: RngSeed) -> Result<Self> {
        self.registry = split(&self, ratios, seed)?;
        Ok(self)
    }

    /// Train-split indices grouped by class, for one source.
    pub fn train_classes(&self, id: SourceId) -> Result<BTreeMap<ClassId, Vec<usize>>> {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for &i in self.registry.indices(id, Split::Train)? {
            by_class.entry(self.samples[i].class_id).or_default().push(i);
        }
        Ok(by_class)
    }

    pub fn features(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.samples[i].features.as_slice()).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.samples[i].class_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for s in &self.registry.sources {
            s.validate()?;
            if seen.insert(s.source_id, s.n_classes).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate source id {}", s.source_id)));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            let n_classes = seen
                .get(&s.source_id)
                .ok_or_else(|| Error::InvalidSpec(format!("sample {i} has unknown source {}", s.source_id)))?;
            if s.class_id as usize >= *n_classes {
                return Err(Error::InvalidSpec(format!("sample {i} has class {} out of range", s.class_id)));
            }
            if s.features.len() != self.input_dim {
                return Err(Error::Dimension(format!("sample {i} has {} features", s.features.len())));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {i}")));
            }
        }
        Ok(())
    }
}

/// Default three-source benchmark.
///
/// Sources differ in size (train shares ≈ 0.26 / 0.20 / 0.54), in samples
/// per class and in label noise, so they overfit at different rates.
pub fn default_sources() -> Vec<SourceSpec> {
    vec![
        SourceSpec {
            source_id: 0,
            n_classes: 50,
            samples_per_class: 40,
            cluster_spread: 0.5,
            inter_class_separation: 6.0,
            difficulty_drift: 0.15,
        },
        SourceSpec {
            source_id: 1,
            n_classes: 30,
            samples_per_class: 50,
            cluster_spread: 0.5,
            inter_class_separation: 6.0,
            difficulty_drift: 0.25,
        },
        SourceSpec {
            source_id: 2,
            n_classes: 26,
            samples_per_class: 160,
            cluster_spread: 0.5,
            inter_class_separation: 3.0,
            difficulty_drift: 0.05,
        },
    ]
}

/// Large out-of-domain source used by the boosted mixed-training experiment.
pub fn out_of_domain_source(source_id: SourceId) -> SourceSpec {
    SourceSpec {
        source_id,
        n_classes: 100,
        samples_per_class: 100,
        cluster_spread: 0.5,
        inter_class_separation: 4.0,
        difficulty_drift: 0.0,
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal `k x dim` basis by Gram-Schmidt on Gaussian draws.
fn random_subspace<R: Rng>(rng: &mut R, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for b in &basis {
            let p = crate::numerics::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = crate::numerics::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Generates every source's samples; splits are left unassigned.
pub fn generate_synthetic(specs: &[SourceSpec], input_dim: usize, seed: RngSeed) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no sources".into()));
    }
    if input_dim < SIGNAL_DIMS {
        return Err(Error::InvalidSpec(format!(
            "input_dim must be at least {SIGNAL_DIMS}, got {input_dim}"
        )));
    }
    let mut ids = std::collections::BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.source_id) {
            return Err(Error::InvalidSpec(format!("duplicate source id {}", s.source_id)));
        }
    }

    let mut samples = Vec::with_capacity(specs.iter().map(SourceSpec::num_samples).sum());
    for spec in specs {
        // each source has its own stream so adding a source leaves the others intact
        let mut rng = seed.derive(spec.source_id as u64).rng();
        let offset = gaussian_vec(&mut rng, input_dim, DOMAIN_SCALE);
        let basis = random_subspace(&mut rng, SIGNAL_DIMS, input_dim);
        // E‖a − b‖ ≈ separation for two class means
        let coord_std = spec.inter_class_separation / (2.0 * SIGNAL_DIMS as f64).sqrt();
        let means: Vec<Vec<f64>> = (0..spec.n_classes)
            .map(|_| {
                let z = gaussian_vec(&mut rng, SIGNAL_DIMS, coord_std);
                let mut m = offset.clone();
                for (zk, b) in z.iter().zip(&basis) {
                    m.iter_mut().zip(b).for_each(|(x, y)| *x += zk * y);
                }
                m
            })
            .collect();
        let jitter = OVERLAP_JITTER * spec.inter_class_separation / (input_dim as f64).sqrt();

        for class in 0..spec.n_classes {
            for _ in 0..spec.samples_per_class {
                let overlap = rng.random::<f64>() < spec.difficulty_drift;
                let mut x = if overlap {
                    let other = (class + rng.random_range(1..spec.n_classes)) % spec.n_classes;
                    let j = gaussian_vec(&mut rng, input_dim, jitter);
                    means[other].iter().zip(&j).map(|(m, e)| m + e).collect()
                } else {
                    means[class].clone()
                };
                let noise = gaussian_vec(&mut rng, input_dim, spec.cluster_spread);
                x.iter_mut().zip(&noise).for_each(|(a, b)| *a += b);
                samples.push(Sample {
                    source_id: spec.source_id,
                    class_id: class as ClassId,
                    features: x,
                });
            }
        }
    }

    Ok(Dataset {
        input_dim,
        samples,
        registry: SourceRegistry {
            sources: specs.to_vec(),
            splits: BTreeMap::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_distance;

    fn one_nn_accuracy(data: &Dataset, source: SourceId) -> f64 {
        let idx: Vec<usize> = (0..data.samples.len())
            .filter(|&i| data.samples[i].source_id == source)
            .collect();
        let mut hits = 0;
        for &q in &idx {
            let mut best = (f64::INFINITY, usize::MAX);
            for &g in &idx {
                if g == q {
                    continue;
                }
                let d = l2_distance(&data.samples[q].features, &data.samples[g].features).unwrap();
                if d < best.0 {
                    best = (d, g);
                }
            }
            if data.samples[best.1].class_id == data.samples[q].class_id {
                hits += 1;
            }
        }
        hits as f64 / idx.len() as f64
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&default_sources(), 32, RngSeed(3)).unwrap();
        let b = generate_synthetic(&default_sources(), 32, RngSeed(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&default_sources(), 32, RngSeed(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn point_clusters_are_separable() {
        let specs = vec![SourceSpec {
            source_id: 0,
            n_classes: 12,
            samples_per_class: 10,
            cluster_spread: 0.0,
            inter_class_separation: 3.0,
            difficulty_drift: 0.0,
        }];
        let d = generate_synthetic(&specs, 16, RngSeed(1)).unwrap();
        assert_eq!(one_nn_accuracy(&d, 0), 1.0);
    }

    #[test]
    fn default_sources_differ_in_difficulty() {
        let d = generate_synthetic(&default_sources(), 32, RngSeed(0)).unwrap();
        let acc: Vec<f64> = (0..3).map(|s| one_nn_accuracy(&d, s)).collect();
        let spread = acc.iter().cloned().fold(f64::MIN, f64::max) - acc.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread >= 0.10, "raw 1-NN accuracies {acc:?}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = default_sources();
        s[0].n_classes = 1;
        assert!(matches!(generate_synthetic(&s, 32, RngSeed(0)), Err(Error::InvalidSpec(_))));
        let mut s = default_sources();
        s[1].source_id = 0;
        assert!(generate_synthetic(&s, 32, RngSeed(0)).is_err());
        assert!(generate_synthetic(&default_sources(), 4, RngSeed(0)).is_err());
        assert!(generate_synthetic(&[], 32, RngSeed(0)).is_err());
    }

    #[test]
    fn every_source_class_present() {
        let d = generate_synthetic(&default_sources(), 32, RngSeed(0)).unwrap();
        d.validate().unwrap();
        for spec in &d.registry.sources {
            for c in 0..spec.n_classes {
                let n = d
                    .samples
                    .iter()
                    .filter(|s| s.source_id == spec.source_id && s.class_id as usize == c)
                    .count();
                assert_eq!(n, spec.samples_per_class);
            }
        }
    }
}
