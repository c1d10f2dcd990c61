//! Label-supervised metric-learning losses.

use serde::{Deserialize, Serialize};

use super::LossValue;
use crate::numerics::{dot, sq_dist_unchecked};
use crate::{Error, Result};

fn check_dims(vs: &[&[f64]]) -> Result<usize> {
    let d = vs[0].len();
    if vs.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension(format!(
            "embedding lengths differ: {:?}",
            vs.iter().map(|v| v.len()).collect::<Vec<_>>()
        )));
    }
    Ok(d)
}

/// `(a − b) / ‖a − b‖`, or zeros when the points coincide.
fn unit_diff(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d = sq_dist_unchecked(a, b).sqrt();
    if d == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    (d, a.iter().zip(b).map(|(x, y)| (x - y) / d).collect())
}

/// `max(0, d(a,p) − d(a,n) + margin)`; gradients ordered (anchor, positive, negative).
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<LossValue> {
    let dim = check_dims(&[anchor, positive, negative])?;
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("triplet margin must be nonnegative, got {margin}")));
    }
    let (d_ap, u_ap) = unit_diff(anchor, positive);
    let (d_an, u_an) = unit_diff(anchor, negative);
    let raw = d_ap - d_an + margin;
    if raw <= 0.0 {
        return Ok(LossValue {
            value: 0.0,
            grad_embeddings: vec![vec![0.0; dim]; 3],
        });
    }
    let ga: Vec<f64> = u_ap.iter().zip(&u_an).map(|(p, n)| p - n).collect();
    let gp: Vec<f64> = u_ap.iter().map(|v| -v).collect();
    Ok(LossValue {
        value: raw,
        grad_embeddings: vec![ga, gp, u_an],
    })
}

/// Same class: `d²`; different class: `max(0, margin − d)²`.
pub fn contrastive_loss(a: &[f64], b: &[f64], same_class: bool, margin: f64) -> Result<LossValue> {
    let dim = check_dims(&[a, b])?;
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("contrastive margin must be nonnegative, got {margin}")));
    }
    if same_class {
        let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
        let gb = ga.iter().map(|v| -v).collect();
        return Ok(LossValue {
            value: sq_dist_unchecked(a, b),
            grad_embeddings: vec![ga, gb],
        });
    }
    let (d, u) = unit_diff(a, b);
    let gap = margin - d;
    if gap <= 0.0 || d == 0.0 {
        // d == 0 with a positive margin: the push direction is undefined
        return Ok(LossValue {
            value: gap.max(0.0).powi(2),
            grad_embeddings: vec![vec![0.0; dim]; 2],
        });
    }
    let ga: Vec<f64> = u.iter().map(|v| -2.0 * gap * v).collect();
    let gb = ga.iter().map(|v| -v).collect();
    Ok(LossValue {
        value: gap * gap,
        grad_embeddings: vec![ga, gb],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSimilarityParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mining_margin: f64,
}

impl Default for MultiSimilarityParams {
    fn default() -> Self {
        MultiSimilarityParams {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            mining_margin: 0.1,
        }
    }
}

/// Multi-similarity loss over a labelled batch.
///
/// Similarity is the dot product, which equals cosine similarity on
/// unit-length embeddings. For anchor `i`, negatives are kept when
/// `S_in + margin > min_p S_ip` and positives when `S_ip − margin < max_n S_in`
/// (extrema over all of the anchor's positives/negatives). Per anchor:
///
/// ```text
/// (1/α)·ln(1 + Σ_p exp(−α(S_ip − λ))) + (1/β)·ln(1 + Σ_n exp(β(S_in − λ)))
/// ```
///
/// averaged over anchors whose mined positive and negative sets are both
/// nonempty (0 when there are none).
pub fn multi_similarity_loss<V: AsRef<[f64]>, L: PartialEq>(
    embeddings: &[V],
    labels: &[L],
    params: &MultiSimilarityParams,
) -> Result<LossValue> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::EmptyInput(format!(
            "multi-similarity needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} embeddings but {} labels", labels.len())));
    }
    let views: Vec<&[f64]> = embeddings.iter().map(|v| v.as_ref()).collect();
    let dim = check_dims(&views)?;
    let MultiSimilarityParams {
        alpha,
        beta,
        lambda,
        mining_margin,
    } = *params;

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = dot(views[i], views[j]);
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    // dL/dS accumulated per ordered pair (anchor row)
    let mut dsim = vec![0.0; n * n];
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                min_pos = min_pos.min(row[j]);
            } else {
                max_neg = max_neg.max(row[j]);
            }
        }
        if !min_pos.is_finite() || !max_neg.is_finite() {
            continue;
        }
        pos.clear();
        neg.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if row[j] - mining_margin < max_neg {
                    pos.push(j);
                }
            } else if row[j] + mining_margin > min_pos {
                neg.push(j);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        anchors += 1;

        let pos_w: Vec<f64> = pos.iter().map(|&j| (-alpha * (row[j] - lambda)).exp()).collect();
        let neg_w: Vec<f64> = neg.iter().map(|&j| (beta * (row[j] - lambda)).exp()).collect();
        let pos_sum: f64 = pos_w.iter().sum();
        let neg_sum: f64 = neg_w.iter().sum();
        total += pos_sum.ln_1p() / alpha + neg_sum.ln_1p() / beta;
        for (&j, w) in pos.iter().zip(&pos_w) {
            dsim[i * n + j] -= w / (1.0 + pos_sum);
        }
        for (&j, w) in neg.iter().zip(&neg_w) {
            dsim[i * n + j] += w / (1.0 + neg_sum);
        }
    }

    if anchors == 0 {
        return Ok(LossValue::zero(embeddings));
    }
    let scale = 1.0 / anchors as f64;
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j];
            if g == 0.0 {
                continue;
            }
            // S_ij = e_i · e_j
            let g = g * scale;
            for k in 0..dim {
                grads[i][k] += g * views[j][k];
                grads[j][k] += g * views[i][k];
            }
        }
    }
    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFinite("multi-similarity loss".into()));
    }
    Ok(LossValue {
        value,
        grad_embeddings: grads,
    })
}

/// Batch-level direct metric objective used by specialist and fused training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricLoss {
    MultiSimilarity(MultiSimilarityParams),
    /// Mean over every (anchor, positive, negative) triplet in the batch.
    Triplet { margin: f64 },
    /// Mean over every unordered pair in the batch.
    Contrastive { margin: f64 },
}

impl Default for MetricLoss {
    fn default() -> Self {
        MetricLoss::MultiSimilarity(MultiSimilarityParams::default())
    }
}

impl MetricLoss {
    pub fn compute<V: AsRef<[f64]>, L: PartialEq>(&self, embeddings: &[V], labels: &[L]) -> Result<LossValue> {
        match self {
            MetricLoss::MultiSimilarity(p) => multi_similarity_loss(embeddings, labels, p),
            MetricLoss::Triplet { margin } => batch_triplet(embeddings, labels, *margin),
            MetricLoss::Contrastive { margin } => batch_contrastive(embeddings, labels, *margin),
        }
    }
}

fn accumulate(grads: &mut [Vec<f64>], idx: &[usize], lv: &LossValue) {
    for (&i, g) in idx.iter().zip(&lv.grad_embeddings) {
        for (a, b) in grads[i].iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn batch_triplet<V: AsRef<[f64]>, L: PartialEq>(embeddings: &[V], labels: &[L], margin: f64) -> Result<LossValue> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} embeddings but {} labels", labels.len())));
    }
    let dim = embeddings.first().map(|v| v.as_ref().len()).unwrap_or(0);
    let mut grads = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let lv = triplet_loss(embeddings[a].as_ref(), embeddings[p].as_ref(), embeddings[q].as_ref(), margin)?;
                total += lv.value;
                count += 1;
                if lv.value > 0.0 {
                    accumulate(&mut grads, &[a, p, q], &lv);
                }
            }
        }
    }
    finish_mean(total, count, grads)
}

fn batch_contrastive<V: AsRef<[f64]>, L: PartialEq>(embeddings: &[V], labels: &[L], margin: f64) -> Result<LossValue> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} embeddings but {} labels", labels.len())));
    }
    let dim = embeddings.first().map(|v| v.as_ref().len()).unwrap_or(0);
    let mut grads = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let lv = contrastive_loss(embeddings[i].as_ref(), embeddings[j].as_ref(), labels[i] == labels[j], margin)?;
            total += lv.value;
            count += 1;
            accumulate(&mut grads, &[i, j], &lv);
        }
    }
    finish_mean(total, count, grads)
}

fn finish_mean(total: f64, count: usize, mut grads: Vec<Vec<f64>>) -> Result<LossValue> {
    if count == 0 {
        return Ok(LossValue {
            value: 0.0,
            grad_embeddings: grads,
        });
    }
    let s = 1.0 / count as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= s);
    Ok(LossValue {
        value: total * s,
        grad_embeddings: grads,
    })
}
