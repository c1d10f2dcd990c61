//! Retrieval evaluation and the analyses built on it.
//!
//! Recall@k uses leave-one-out retrieval inside one source's split: every
//! sample is a query against all other samples of that source and split.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::encoder::Embedder;
use crate::numerics::{pca_fit, sq_dist_unchecked, Pca};
use crate::training::{SpecialistSet, TrainLog};
use crate::{Error, Result, SourceId};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 2, 4];

/// Specialist distances at or below this are left out of ratio statistics.
pub const MIN_RATIO_DISTANCE: f64 = 1e-9;

/// Recall@k for every `k` in `ks`.
///
/// A query succeeds at `k` when one of its `k` nearest other samples shares
/// its label. Distances are Euclidean; equal distances rank the lower index
/// first.
pub fn recall_at_k<V: AsRef<[f64]>, L: PartialEq>(embeddings: &[V], labels: &[L], ks: &[usize]) -> Result<Vec<f64>> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} embeddings but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::EmptyInput(format!("recall needs at least 2 samples, got {n}")));
    }
    if ks.is_empty() {
        return Err(Error::Config("no recall cutoffs given".into()));
    }
    for &k in ks {
        if k == 0 || k > n - 1 {
            return Err(Error::Config(format!("k = {k} is outside 1..={} (gallery size)", n - 1)));
        }
    }
    let dim = embeddings[0].as_ref().len();
    if embeddings.iter().any(|e| e.as_ref().len() != dim) {
        return Err(Error::Dimension("embeddings of unequal length".into()));
    }

    let mut hits = vec![0usize; ks.len()];
    let mut dist = vec![0.0; n];
    for q in 0..n {
        let eq = embeddings[q].as_ref();
        for (j, d) in dist.iter_mut().enumerate() {
            *d = sq_dist_unchecked(eq, embeddings[j].as_ref()).sqrt();
        }
        // nearest same-label neighbor under (distance, index) order
        let best = (0..n)
            .filter(|&j| j != q && labels[j] == labels[q])
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let Some(p) = best else { continue };
        let ahead = (0..n)
            .filter(|&j| j != q && (dist[j] < dist[p] || (dist[j] == dist[p] && j < p)))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if ahead < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecall {
    pub source_id: SourceId,
    pub queries: usize,
    /// Gallery size seen by each query (`queries - 1`).
    pub gallery: usize,
    /// Aligned with [`RecallReport::ks`].
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub split: Split,
    pub ks: Vec<usize>,
    pub sources: Vec<SourceRecall>,
}

impl RecallReport {
    pub fn source(&self, id: SourceId) -> Option<&SourceRecall> {
        self.sources.iter().find(|s| s.source_id == id)
    }

    /// Recall at cutoff `k` for one source.
    pub fn recall(&self, id: SourceId, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        self.source(id).map(|s| s.recall[pos])
    }

    /// Unweighted mean over sources at cutoff `k`.
    pub fn average(&self, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        if self.sources.is_empty() {
            return None;
        }
        Some(self.sources.iter().map(|s| s.recall[pos]).sum::<f64>() / self.sources.len() as f64)
    }

    /// Checks ranges and that recall does not decrease with k.
    pub fn check(&self) -> Result<()> {
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("cutoffs {:?} are not increasing", self.ks)));
        }
        for s in &self.sources {
            if s.recall.len() != self.ks.len() {
                return Err(Error::Dimension(format!("source {} has {} recalls", s.source_id, s.recall.len())));
            }
            if s.recall.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Degenerate(format!("source {} recall outside [0, 1]", s.source_id)));
            }
            if s.recall.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Degenerate(format!("source {} recall decreases with k", s.source_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn embed_split<E: Embedder + ?Sized>(model: &E, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    if model.input_dim() != dataset.input_dim {
        return Err(Error::Dimension(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            dataset.input_dim
        )));
    }
    model.embed_all(&dataset.features(indices))
}

/// Per-source recall of `model` on the chosen sources; queries never
/// retrieve across sources.
pub fn evaluate_sources<E: Embedder + ?Sized>(
    model: &E,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    sources: &[SourceId],
) -> Result<RecallReport> {
    let mut out = Vec::with_capacity(sources.len());
    for &id in sources {
        let indices = dataset.registry.indices(id, split)?;
        if indices.is_empty() {
            return Err(Error::EmptyInput(format!("source {id} has an empty {} split", split.name())));
        }
        let embeddings = embed_split(model, dataset, indices)?;
        let labels = dataset.labels(indices);
        out.push(SourceRecall {
            source_id: id,
            queries: indices.len(),
            gallery: indices.len() - 1,
            recall: recall_at_k(&embeddings, &labels, ks)?,
        });
    }
    let report = RecallReport {
        split,
        ks: ks.to_vec(),
        sources: out,
    };
    report.check()?;
    Ok(report)
}

/// Per-source recall of `model` over every source of the dataset.
pub fn evaluate_model<E: Embedder + ?Sized>(model: &E, dataset: &Dataset, split: Split, ks: &[usize]) -> Result<RecallReport> {
    evaluate_sources(model, dataset, split, ks, &dataset.registry.source_ids())
}

/// Concatenated specialist embeddings reduced by PCA.
#[derive(Debug, Clone)]
pub struct ConcatPca<'a> {
    specialists: &'a SpecialistSet,
    pca: Pca,
}

impl<'a> ConcatPca<'a> {
    /// Fits the projection on the train split of every source in `dataset`.
    pub fn fit(specialists: &'a SpecialistSet, dataset: &Dataset, out_dim: usize) -> Result<Self> {
        if specialists.is_empty() {
            return Err(Error::EmptyInput("concatenation needs at least one specialist".into()));
        }
        let mut train = Vec::new();
        for id in dataset.registry.source_ids() {
            train.extend_from_slice(dataset.registry.indices(id, Split::Train)?);
        }
        let concat = Concat(specialists);
        let fused = embed_split(&concat, dataset, &train)?;
        let pca = pca_fit(&fused, out_dim)?;
        Ok(ConcatPca { specialists, pca })
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }
}

struct Concat<'a>(&'a SpecialistSet);

impl Embedder for Concat<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.0.iter().map(|(_, p)| p.output_dim()).sum()
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.output_dim());
        for (_, p) in self.0.iter() {
            out.extend(p.embed(x)?);
        }
        Ok(out)
    }
}

impl Embedder for ConcatPca<'_> {
    fn input_dim(&self) -> usize {
        self.specialists.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.pca.out_dim()
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.pca.project(&Concat(self.specialists).embed(x)?)
    }
}

/// Ensemble baseline: specialists concatenated in source order, projected
/// to `out_dim` by PCA fitted on the fused train split, then evaluated.
pub fn concat_pca_baseline(
    specialists: &SpecialistSet,
    dataset: &Dataset,
    out_dim: usize,
    split: Split,
    ks: &[usize],
) -> Result<RecallReport> {
    let model = ConcatPca::fit(specialists, dataset, out_dim)?;
    evaluate_model(&model, dataset, split, ks)
}

/// Fixed-range histogram with overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins],
            below: 0,
            above: 0,
        }
    }

    pub fn add(&mut self, x: f64) {
        if x < self.lo {
            self.below += 1;
        } else if x >= self.hi {
            self.above += 1;
        } else {
            let w = (self.hi - self.lo) / self.counts.len() as f64;
            let b = (((x - self.lo) / w) as usize).min(self.counts.len() - 1);
            self.counts[b] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub count: u64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub histogram: Histogram,
}

impl RatioSummary {
    fn from_ratios(ratios: &[f64], hist: Histogram) -> Self {
        let mut h = hist;
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &r) in ratios.iter().enumerate() {
            let d = r - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (r - mean);
            h.add(r);
        }
        let count = ratios.len() as u64;
        RatioSummary {
            count,
            mean: if count == 0 { f64::NAN } else { mean },
            variance: if count == 0 { f64::NAN } else { m2 / count as f64 },
            histogram: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRatios {
    pub source_id: SourceId,
    pub intra: RatioSummary,
    pub inter: RatioSummary,
    /// Pairs skipped because the specialist distance was near zero.
    pub excluded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub split: Split,
    pub sources: Vec<SourceRatios>,
}

impl RatioStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ratio stats serialize")
    }
}

/// Histogram range and resolution used by [`distance_ratio_stats`].
pub const RATIO_HIST: (f64, f64, usize) = (0.0, 3.0, 60);

/// Distribution of `d_universal / d_specialist` over all within-source
/// pairs, split by whether the pair shares a class.
pub fn distance_ratio_stats<U: Embedder + ?Sized>(
    universal: &U,
    specialists: &SpecialistSet,
    dataset: &Dataset,
    split: Split,
) -> Result<RatioStats> {
    let mut sources = Vec::new();
    for (id, specialist) in specialists.iter() {
        let indices = dataset.registry.indices(id, split)?;
        if indices.len() < 2 {
            return Err(Error::EmptyInput(format!("source {id} has fewer than 2 {} samples", split.name())));
        }
        let u = embed_split(universal, dataset, indices)?;
        let t = embed_split(specialist, dataset, indices)?;
        let labels = dataset.labels(indices);
        let (mut intra, mut inter, mut excluded) = (Vec::new(), Vec::new(), 0u64);
        for i in 0..indices.len() {
            for j in (i + 1)..indices.len() {
                let dt = sq_dist_unchecked(&t[i], &t[j]).sqrt();
                if dt <= MIN_RATIO_DISTANCE {
                    excluded += 1;
                    continue;
                }
                let r = sq_dist_unchecked(&u[i], &u[j]).sqrt() / dt;
                if labels[i] == labels[j] {
                    intra.push(r);
                } else {
                    inter.push(r);
                }
            }
        }
        let (lo, hi, bins) = RATIO_HIST;
        sources.push(SourceRatios {
            source_id: id,
            intra: RatioSummary::from_ratios(&intra, Histogram::new(lo, hi, bins)),
            inter: RatioSummary::from_ratios(&inter, Histogram::new(lo, hi, bins)),
            excluded,
        });
    }
    Ok(RatioStats { split, sources })
}

/// Where one source's validation curve peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub source_id: SourceId,
    pub peak_iteration: u64,
    pub peak_recall1: f64,
    pub final_iteration: u64,
    pub final_recall1: f64,
}

/// Peak and final validation Recall@1 per source; the earliest checkpoint
/// wins ties.
pub fn overfit_curves(log: &TrainLog) -> Result<Vec<CurveSummary>> {
    if log.records.is_empty() {
        return Err(Error::EmptyInput("training log has no checkpoints".into()));
    }
    let mut by_source: BTreeMap<SourceId, Vec<(u64, f64)>> = BTreeMap::new();
    for r in &log.records {
        by_source.entry(r.source_id).or_default().push((r.iteration, r.val_recall1));
    }
    by_source
        .into_iter()
        .map(|(id, curve)| {
            if curve.len() < 2 {
                return Err(Error::EmptyInput(format!("source {id} has only {} checkpoint(s)", curve.len())));
            }
            let mut peak = curve[0];
            for &p in &curve[1..] {
                if p.1 > peak.1 {
                    peak = p;
                }
            }
            let last = *curve.last().expect("nonempty");
            Ok(CurveSummary {
                source_id: id,
                peak_iteration: peak.0,
                peak_recall1: peak.1,
                final_iteration: last.0,
                final_recall1: last.1,
            })
        })
        .collect()
}

/// Long-format curve data: `iteration,source_id,metric,value`.
pub fn curves_csv(log: &TrainLog) -> String {
    let mut out = String::from("iteration,source_id,metric,value\n");
    for r in &log.records {
        writeln!(out, "{},{},val_recall1,{}", r.iteration, r.source_id, r.val_recall1).expect("write to string");
        writeln!(out, "{},{},loss_avg,{}", r.iteration, r.source_id, r.loss_avg).expect("write to string");
    }
    out
}

/// Methods as rows, sources as column groups of R@k, plus an average group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub ks: Vec<usize>,
    pub sources: Vec<SourceId>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    /// `cells[s][k]`, aligned with the table's sources and ks.
    pub cells: Vec<Vec<f64>>,
    pub average: Vec<f64>,
}

impl ResultsTable {
    /// Builds a table from named reports. Sources are the union over all
    /// reports; a report missing a source gets NaN cells there and its
    /// average covers only the sources it has.
    pub fn assemble(runs: &[(String, RecallReport)]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::EmptyInput("no reports to tabulate".into()))?;
        let ks = first.1.ks.clone();
        let mut sources: Vec<SourceId> = Vec::new();
        for (name, r) in runs {
            if r.ks != ks {
                return Err(Error::Config(format!("report {name} uses cutoffs {:?}, expected {ks:?}", r.ks)));
            }
            r.check()?;
            sources.extend(r.sources.iter().map(|s| s.source_id));
        }
        sources.sort_unstable();
        sources.dedup();
        let rows = runs
            .iter()
            .map(|(name, r)| {
                let cells: Vec<Vec<f64>> = sources
                    .iter()
                    .map(|&id| r.source(id).map_or(vec![f64::NAN; ks.len()], |s| s.recall.clone()))
                    .collect();
                let average = (0..ks.len()).map(|p| mean_present(cells.iter().map(|c| c[p]))).collect();
                TableRow {
                    method: name.clone(),
                    cells,
                    average,
                }
            })
            .collect();
        Ok(ResultsTable { ks, sources, rows })
    }

    /// CSV with one header row, values in percent with one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        let groups: Vec<String> = self
            .sources
            .iter()
            .map(|s| format!("source{s}"))
            .chain(std::iter::once("average".to_string()))
            .collect();
        for g in &groups {
            for k in &self.ks {
                write!(out, ",{g}_R{k}").expect("write to string");
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.method);
            for cell in row.cells.iter().chain(std::iter::once(&row.average)) {
                for v in cell {
                    if v.is_nan() {
                        out.push_str(",-");
                    } else {
                        write!(out, ",{:.1}", 100.0 * v).expect("write to string");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mean_present(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_sources, generate_synthetic, SplitRatios};
    use crate::encoder::{init_params, EncoderConfig};
    use crate::numerics::{l2_distance, RngSeed};
    use crate::training::{LogRecord, SpecialistSet};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Full sort of every query's gallery.
    fn oracle(emb: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let n = emb.len();
        let mut hits = 0;
        for q in 0..n {
            let mut g: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (l2_distance(&emb[q], &emb[j]).unwrap(), j))
                .collect();
            g.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if g[..k].iter().any(|&(_, j)| labels[j] == labels[q]) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    fn random_instance(rng: &mut impl Rng, n: usize, classes: usize, dim: usize, grid: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
        let emb = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let v: f64 = rng.sample(StandardNormal);
                        // coarse grid forces exact distance ties
                        if grid {
                            v.round()
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (emb, labels)
    }

    #[test]
    fn two_sample_cases() {
        let e = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(recall_at_k(&e, &[3, 3], &[1]).unwrap(), vec![1.0]);
        assert_eq!(recall_at_k(&e, &[3, 4], &[1]).unwrap(), vec![0.0]);
        assert!(matches!(recall_at_k(&e, &[3, 3], &[2]), Err(Error::Config(_))));
        assert!(matches!(recall_at_k(&e[..1], &[3], &[1]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn matches_sort_oracle() {
        let mut rng = RngSeed(11).rng();
        for case in 0..60 {
            let n = if case == 0 { 50 } else { rng.random_range(5..120) };
            let classes = rng.random_range(2..8);
            let (emb, labels) = random_instance(&mut rng, n, classes, 3, case % 3 == 0);
            let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
            let got = recall_at_k(&emb, &labels, &ks).unwrap();
            for (g, &k) in got.iter().zip(&ks) {
                assert_eq!(*g, oracle(&emb, &labels, k), "case {case} k {k}");
            }
        }
    }

    #[test]
    fn tie_goes_to_lower_index() {
        // gallery of query 0: items 1 and 2 both at distance 1
        let e = vec![vec![0.0], vec![1.0], vec![-1.0]];
        assert_eq!(recall_at_k(&e, &[0, 1, 0], &[1]).unwrap()[0], 1.0 / 3.0);
        assert_eq!(recall_at_k(&e, &[0, 0, 1], &[1]).unwrap()[0], 1.0 / 3.0 + 1.0 / 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rotation_preserves_recall(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = RngSeed(seed).rng();
            let (emb, labels) = random_instance(&mut rng, 30, 4, 2, false);
            let (c, s) = (angle.cos(), angle.sin());
            let rot: Vec<Vec<f64>> = emb.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
            let a = recall_at_k(&emb, &labels, &[1, 2, 4]).unwrap();
            let b = recall_at_k(&rot, &labels, &[1, 2, 4]).unwrap();
            // rotation perturbs distances in the last bits; exact ties are
            // measure-zero for Gaussian data
            prop_assert_eq!(a, b);
        }
    }

    fn bench() -> Dataset {
        generate_synthetic(&default_sources(), 32, RngSeed(0))
            .unwrap()
            .split(SplitRatios::default(), RngSeed(1))
            .unwrap()
    }

    /// Embeds a sample as a one-hot of its (source, class): perfect clustering.
    struct Oracle<'a>(&'a Dataset);

    impl Embedder for Oracle<'_> {
        fn input_dim(&self) -> usize {
            self.0.input_dim
        }
        fn output_dim(&self) -> usize {
            64
        }
        fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
            let s = self.0.samples.iter().find(|s| s.features == x).unwrap();
            let mut v = vec![0.0; 64];
            v[s.class_id as usize] = 1.0;
            Ok(v)
        }
    }

    #[test]
    fn perfect_clustering_scores_one() {
        let d = bench();
        let r = evaluate_model(&Oracle(&d), &d, Split::Test, &DEFAULT_KS).unwrap();
        assert_eq!(r.sources.len(), 3);
        for s in &r.sources {
            assert_eq!(s.recall, vec![1.0; 3]);
            assert_eq!(s.gallery + 1, s.queries);
        }
        let json = r.to_json();
        let back: RecallReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn random_model_near_permutation_null() {
        let d = bench();
        let model = init_params(&EncoderConfig::default(), RngSeed(3)).unwrap();
        let r = evaluate_model(&model, &d, Split::Test, &[1]).unwrap();
        let mut rng = RngSeed(4).rng();
        for s in &r.sources {
            let idx = d.registry.indices(s.source_id, Split::Test).unwrap();
            let emb = embed_split(&model, &d, idx).unwrap();
            let mut labels = d.labels(idx);
            let null: Vec<f64> = (0..30)
                .map(|_| {
                    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
                    recall_at_k(&emb, &labels, &[1]).unwrap()[0]
                })
                .collect();
            let mean = null.iter().sum::<f64>() / null.len() as f64;
            let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
            // the random network keeps some input geometry, so only bound
            // from below and well under a trained model
            assert!(s.recall[0] >= mean - 3.0 * sd, "{} vs null {mean} ± {sd}", s.recall[0]);
            assert!(s.recall[0] < 0.9);
        }
    }

    fn specialists(d: &Dataset, ids: &[SourceId]) -> SpecialistSet {
        let mut set = SpecialistSet::new();
        for &id in ids {
            set.insert(id, init_params(&EncoderConfig::default(), RngSeed(100 + id as u64)).unwrap()).unwrap();
        }
        assert_eq!(set.input_dim(), d.input_dim);
        set
    }

    #[test]
    fn concat_of_one_specialist_is_a_rotation() {
        let d = bench();
        let set = specialists(&d, &[0]);
        let model = set.get(0).unwrap();
        let own = evaluate_sources(model, &d, Split::Test, &DEFAULT_KS, &[0]).unwrap();
        let cat = ConcatPca::fit(&set, &d, 128).unwrap();
        let rep = evaluate_sources(&cat, &d, Split::Test, &DEFAULT_KS, &[0]).unwrap();
        for (a, b) in own.sources[0].recall.iter().zip(&rep.sources[0].recall) {
            assert!((a - b).abs() <= 1e-9);
        }
        let set3 = specialists(&d, &[0, 1, 2]);
        assert_eq!(Concat(&set3).output_dim(), 384);
        let rep = concat_pca_baseline(&set3, &d, 128, Split::Test, &DEFAULT_KS).unwrap();
        rep.check().unwrap();
    }

    #[test]
    fn ratios_of_identical_and_isometric_models() {
        let d = bench();
        let set = specialists(&d, &[1]);
        let model = set.get(1).unwrap().clone();
        let stats = distance_ratio_stats(&model, &set, &d, Split::Test).unwrap();
        let s = &stats.sources[0];
        for part in [&s.intra, &s.inter] {
            assert!(part.count > 0);
            assert!((part.mean - 1.0).abs() < 1e-12);
            assert!(part.variance < 1e-24);
            assert_eq!(part.histogram.total(), part.count);
        }
        let n = d.registry.indices(1, Split::Test).unwrap().len() as u64;
        assert_eq!(s.intra.count + s.inter.count + s.excluded, n * (n - 1) / 2);

        // a signed coordinate permutation is an exact isometry
        struct Flipped(crate::encoder::EncoderParams);
        impl Embedder for Flipped {
            fn input_dim(&self) -> usize {
                self.0.input_dim()
            }
            fn output_dim(&self) -> usize {
                self.0.output_dim()
            }
            fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
                let mut v = self.0.embed(x)?;
                v.reverse();
                v[0] = -v[0];
                Ok(v)
            }
        }
        let stats = distance_ratio_stats(&Flipped(model), &set, &d, Split::Test).unwrap();
        assert!((stats.sources[0].inter.mean - 1.0).abs() < 1e-12);
        let back: RatioStats = serde_json::from_str(&stats.to_json()).unwrap();
        assert_eq!(back.sources[0].excluded, stats.sources[0].excluded);
    }

    fn log_of(curves: &[(SourceId, &[f64])]) -> TrainLog {
        let mut records = Vec::new();
        let len = curves[0].1.len();
        for c in 0..len {
            for (id, vals) in curves {
                records.push(LogRecord {
                    iteration: 10 * (c as u64 + 1),
                    source_id: *id,
                    val_recall1: vals[c],
                    loss_avg: 1.0,
                });
            }
        }
        TrainLog { records }
    }

    #[test]
    fn curve_peaks() {
        let log = log_of(&[(0, &[0.1, 0.2, 0.3]), (1, &[0.5, 0.5, 0.5]), (2, &[0.2, 0.6, 0.4])]);
        let c = overfit_curves(&log).unwrap();
        assert_eq!(c[0].peak_iteration, 30);
        assert_eq!(c[1].peak_iteration, 10);
        assert_eq!(c[2].peak_iteration, 20);
        assert_eq!(c[2].final_recall1, 0.4);
        assert!(overfit_curves(&TrainLog::default()).is_err());
        assert!(overfit_curves(&log_of(&[(0, &[0.1])])).is_err());
        let csv = curves_csv(&log);
        assert_eq!(csv.lines().count(), 1 + 2 * 9);
        assert!(csv.starts_with("iteration,source_id,metric,value\n10,0,val_recall1,0.1\n"));
    }

    #[test]
    fn table_layout() {
        let rep = |vals: &[(SourceId, [f64; 3])]| RecallReport {
            split: Split::Test,
            ks: DEFAULT_KS.to_vec(),
            sources: vals
                .iter()
                .map(|(id, r)| SourceRecall {
                    source_id: *id,
                    queries: 10,
                    gallery: 9,
                    recall: r.to_vec(),
                })
                .collect(),
        };
        let runs = vec![
            ("specialist".to_string(), rep(&[(0, [0.5, 0.6, 0.7])])),
            ("ours".to_string(), rep(&[(0, [0.4, 0.5, 0.6]), (1, [0.2, 0.3, 0.4])])),
        ];
        let t = ResultsTable::assemble(&runs).unwrap();
        assert_eq!(t.sources, vec![0, 1]);
        assert!((t.rows[1].average[0] - 0.3).abs() < 1e-15);
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,source0_R1,source0_R2,source0_R4,source1_R1,source1_R2,source1_R4,average_R1,average_R2,average_R4"
        );
        assert_eq!(lines.next().unwrap(), "specialist,50.0,60.0,70.0,-,-,-,50.0,60.0,70.0");
        assert_eq!(lines.next().unwrap(), "ours,40.0,50.0,60.0,20.0,30.0,40.0,30.0,40.0,50.0");
    }
}
