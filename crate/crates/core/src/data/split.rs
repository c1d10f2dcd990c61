use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, SourceRegistry, SourceSplits};
use crate::numerics::RngSeed;
use crate::{ClassId, Error, Result, SourceId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 2:1:1
    fn default() -> Self {
        SplitRatios {
            train: 2.0,
            val: 1.0,
            test: 1.0,
        }
    }
}

impl SplitRatios {
    /// Largest-remainder allocation of `n` items; every part must be nonempty.
    fn allocate(&self, n: usize) -> Result<[usize; 3]> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Stratification(format!(
                "split ratios must all be positive, got {r:?}"
            )));
        }
        let total: f64 = r.iter().sum();
        let exact: Vec<f64> = r.iter().map(|x| x / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        // stable: ties go to the earlier split
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa)
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        if counts.contains(&0) {
            return Err(Error::Stratification(format!(
                "{n} samples cannot fill train/val/test at ratios {r:?}"
            )));
        }
        Ok([counts[0], counts[1], counts[2]])
    }
}

/// Stratified split per (source, class): disjoint, exhaustive, deterministic.
pub fn split(dataset: &Dataset, ratios: SplitRatios, seed: RngSeed) -> Result<SourceRegistry> {
    let mut groups: BTreeMap<(SourceId, ClassId), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        groups.entry((s.source_id, s.class_id)).or_default().push(i);
    }
    let mut rng = seed.rng();
    let mut splits: BTreeMap<SourceId, SourceSplits> = dataset
        .registry
        .sources
        .iter()
        .map(|s| (s.source_id, SourceSplits::default()))
        .collect();
    for ((source, class), mut idx) in groups {
        let [n_train, n_val, _] = ratios.allocate(idx.len()).map_err(|e| match e {
            Error::Stratification(m) => {
                Error::Stratification(format!("source {source} class {class}: {m}"))
            }
            other => other,
        })?;
        idx.shuffle(&mut rng);
        let entry = splits
            .get_mut(&source)
            .ok_or_else(|| Error::InvalidSpec(format!("samples reference unknown source {source}")))?;
        entry.train.extend_from_slice(&idx[..n_train]);
        entry.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        entry.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in splits.values_mut() {
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
    }
    Ok(SourceRegistry {
        sources: dataset.registry.sources.clone(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_sources, generate_synthetic, SourceSpec};
    use std::collections::BTreeSet;

    fn tiny(samples_per_class: usize) -> Dataset {
        let spec = SourceSpec {
            source_id: 0,
            n_classes: 3,
            samples_per_class,
            cluster_spread: 0.3,
            inter_class_separation: 2.0,
            difficulty_drift: 0.0,
        };
        generate_synthetic(&[spec], 8, RngSeed(0)).unwrap()
    }

    #[test]
    fn two_one_one_on_eight() {
        let d = tiny(8);
        let reg = split(&d, SplitRatios::default(), RngSeed(1)).unwrap();
        let s = &reg.splits[&0];
        for class in 0..3u16 {
            let count = |v: &[usize]| v.iter().filter(|&&i| d.samples[i].class_id == class).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (4, 2, 2));
        }
    }

    #[test]
    fn empty_split_rejected() {
        let d = tiny(8);
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(matches!(split(&d, r, RngSeed(1)), Err(Error::Stratification(_))));
        // 4 samples at 8:1:1 leaves val or test empty
        let d = tiny(4);
        let r = SplitRatios {
            train: 8.0,
            val: 1.0,
            test: 1.0,
        };
        assert!(matches!(split(&d, r, RngSeed(1)), Err(Error::Stratification(_))));
    }

    #[test]
    fn disjoint_exhaustive_and_proportional() {
        let d = generate_synthetic(&default_sources(), 32, RngSeed(2)).unwrap();
        let reg = split(&d, SplitRatios::default(), RngSeed(5)).unwrap();
        for spec in &reg.sources {
            let s = &reg.splits[&spec.source_id];
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                s.train.iter().copied().collect(),
                s.val.iter().copied().collect(),
                s.test.iter().copied().collect(),
            );
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            let all: BTreeSet<usize> = (0..d.samples.len())
                .filter(|&i| d.samples[i].source_id == spec.source_id)
                .collect();
            let union: BTreeSet<usize> = tr.union(&va).chain(te.iter()).copied().collect();
            assert_eq!(union, all);
            let per_class = spec.samples_per_class as f64;
            for c in 0..spec.n_classes as u16 {
                let count = |v: &[usize]| v.iter().filter(|&&i| d.samples[i].class_id == c).count() as f64;
                assert!((count(&s.train) - per_class * 0.5).abs() <= 1.0);
                assert!((count(&s.val) - per_class * 0.25).abs() <= 1.0);
                assert!((count(&s.test) - per_class * 0.25).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let d = tiny(10);
        assert_eq!(
            split(&d, SplitRatios::default(), RngSeed(9)).unwrap(),
            split(&d, SplitRatios::default(), RngSeed(9)).unwrap()
        );
    }
}
