//! Training objectives with analytic gradients on the embeddings.
//!
//! Every loss returns a [`LossValue`]: the scalar and `dL/d(embedding i)` for
//! each input embedding. Chaining into the encoder is the caller's job.

mod metric;

pub use metric::{
    contrastive_loss, multi_similarity_loss, triplet_loss, MetricLoss, MultiSimilarityParams,
};

use crate::numerics::{pairwise_distances, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
}

impl LossValue {
    fn zero<V: AsRef<[f64]>>(inputs: &[V]) -> Self {
        LossValue {
            value: 0.0,
            grad_embeddings: inputs.iter().map(|v| vec![0.0; v.as_ref().len()]).collect(),
        }
    }
}

/// Huber penalty with unit threshold.
pub fn huber(x: f64, y: f64) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite(format!("huber({x}, {y})")));
    }
    Ok(huber_residual(x - y))
}

#[inline]
fn huber_residual(r: f64) -> f64 {
    if r.abs() <= 1.0 {
        huber_quadratic(r)
    } else {
        huber_linear(r)
    }
}

#[inline]
fn huber_quadratic(r: f64) -> f64 {
    0.5 * r * r
}

#[inline]
fn huber_linear(r: f64) -> f64 {
    r.abs() - 0.5
}

/// Derivative of the Huber penalty with respect to its residual.
#[inline]
fn huber_slope(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

/// Pairwise distances of one batch together with their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDistances {
    pub dist: Mat,
    /// Mean over the strictly off-diagonal entries; 0 for a single point.
    pub mu: f64,
}

impl BatchDistances {
    pub fn new(dist: Mat) -> Result<Self> {
        let n = dist.rows();
        if n != dist.cols() {
            return Err(Error::Dimension("distance matrix must be square".into()));
        }
        if n == 0 {
            return Err(Error::EmptyInput("empty distance matrix".into()));
        }
        for i in 0..n {
            if dist[(i, i)] != 0.0 {
                return Err(Error::Dimension("distance matrix diagonal must be zero".into()));
            }
            for j in 0..i {
                if dist[(i, j)] != dist[(j, i)] {
                    return Err(Error::Dimension("distance matrix must be symmetric".into()));
                }
                if !(dist[(i, j)] >= 0.0 && dist[(i, j)].is_finite()) {
                    return Err(Error::NonFinite("distance matrix entry".into()));
                }
            }
        }
        let mu = off_diagonal_mean(&dist);
        Ok(BatchDistances { dist, mu })
    }

    pub fn from_embeddings<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<Self> {
        let dist = pairwise_distances(embeddings)?;
        let mu = off_diagonal_mean(&dist);
        Ok(BatchDistances { dist, mu })
    }

    pub fn len(&self) -> usize {
        self.dist.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.rows() == 0
    }
}

fn off_diagonal_mean(dist: &Mat) -> f64 {
    let n = dist.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += dist[(i, j)];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Relational distillation loss: the mean Huber penalty between teacher and
/// student distances over all unordered pairs.
///
/// With `normalized`, both distance sets are first divided by their batch
/// mean, which makes the loss invariant to a global rescaling of either
/// embedding space. The teacher is treated as a constant.
pub fn rkd_loss<V: AsRef<[f64]>>(
    teacher: &BatchDistances,
    student: &[V],
    normalized: bool,
) -> Result<LossValue> {
    let n = student.len();
    if teacher.len() != n {
        return Err(Error::Dimension(format!(
            "teacher has {} samples, student batch has {n}",
            teacher.len()
        )));
    }
    let s = BatchDistances::from_embeddings(student)?;
    if n < 2 {
        if normalized {
            return Err(Error::Degenerate("batch mean distance undefined for one sample".into()));
        }
        return Ok(LossValue::zero(student));
    }
    let (scale_t, scale_s) = if normalized {
        if !(teacher.mu > 0.0) {
            return Err(Error::Degenerate("teacher mean distance is zero".into()));
        }
        if !(s.mu > 0.0) {
            return Err(Error::Degenerate("student mean distance is zero".into()));
        }
        (1.0 / teacher.mu, 1.0 / s.mu)
    } else {
        (1.0, 1.0)
    };

    let pairs = (n * (n - 1) / 2) as f64;
    let mut value = 0.0;
    // slope[i][j] = dℓ/d(student normalized distance) for i < j
    let mut slope = Mat::zeros(n, n);
    let mut weighted = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = s.dist[(i, j)] * scale_s - teacher.dist[(i, j)] * scale_t;
            value += huber_residual(r);
            let g = huber_slope(r);
            slope[(i, j)] = g;
            weighted += g * s.dist[(i, j)];
        }
    }
    value /= pairs;

    // dL/dd_ij: direct term plus, when normalized, the path through mu_s
    let correction = if normalized {
        weighted * scale_s * scale_s / pairs
    } else {
        0.0
    };
    let dim = student[0].as_ref().len();
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = s.dist[(i, j)];
            if d == 0.0 {
                continue;
            }
            let g_d = (slope[(i, j)] * scale_s - correction) / pairs;
            if g_d == 0.0 {
                continue;
            }
            let (si, sj) = (student[i].as_ref(), student[j].as_ref());
            let c = g_d / d;
            for k in 0..dim {
                let diff = c * (si[k] - sj[k]);
                grads[i][k] += diff;
                grads[j][k] -= diff;
            }
        }
    }
    Ok(LossValue {
        value,
        grad_embeddings: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_distance, relative_error, RngSeed, DEFAULT_FD_STEP};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(seed: u64, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
        let mut rng = RngSeed(seed).rng();
        (0..n)
            .map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn flatten(v: &[Vec<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }

    fn unflatten(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
        flat.chunks(dim).map(|c| c.to_vec()).collect()
    }

    /// Pair-enumeration reference of the distillation loss.
    fn rkd_oracle(t: &[Vec<f64>], s: &[Vec<f64>], normalized: bool) -> f64 {
        let n = t.len();
        let mut pairs = vec![];
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((
                    l2_distance(&t[i], &t[j]).unwrap(),
                    l2_distance(&s[i], &s[j]).unwrap(),
                ));
            }
        }
        let m = pairs.len() as f64;
        let (mt, ms) = if normalized {
            (
                pairs.iter().map(|p| p.0).sum::<f64>() / m,
                pairs.iter().map(|p| p.1).sum::<f64>() / m,
            )
        } else {
            (1.0, 1.0)
        };
        pairs
            .iter()
            .map(|(dt, ds)| {
                let r = (ds / ms - dt / mt).abs();
                if r <= 1.0 {
                    0.5 * r * r
                } else {
                    r - 0.5
                }
            })
            .sum::<f64>()
            / m
    }

    /// True when some pair residual sits within `tol` of the Huber kink.
    fn near_kink(t: &[Vec<f64>], s: &[Vec<f64>], normalized: bool, tol: f64) -> bool {
        let bt = BatchDistances::from_embeddings(t).unwrap();
        let bs = BatchDistances::from_embeddings(s).unwrap();
        let (at, as_) = if normalized { (bt.mu, bs.mu) } else { (1.0, 1.0) };
        let n = t.len();
        (0..n).any(|i| {
            ((i + 1)..n).any(|j| {
                let r = bs.dist[(i, j)] / as_ - bt.dist[(i, j)] / at;
                (r.abs() - 1.0).abs() < tol
            })
        })
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(huber(0.5, 0.0).unwrap(), 0.125);
        assert_eq!(huber(3.0, 0.5).unwrap(), 2.0);
        assert_eq!(huber(1.0, 0.0).unwrap(), 0.5);
        assert_eq!(huber(0.0, 1.0).unwrap(), 0.5);
        assert!(matches!(huber(f64::NAN, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn huber_branches_meet_at_one() {
        for r in [1.0, -1.0] {
            assert_eq!(huber_quadratic(r), 0.5);
            assert_eq!(huber_linear(r), 0.5);
        }
    }

    #[test]
    fn rkd_examples() {
        let t = random_points(1, 6, 8, 1.0);
        let bt = BatchDistances::from_embeddings(&t).unwrap();
        let l = rkd_loss(&bt, &t, false).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_embeddings.iter().flatten().all(|g| *g == 0.0));

        let teacher = BatchDistances::from_embeddings(&[vec![0.0], vec![1.0]]).unwrap();
        let l = rkd_loss(&teacher, &[vec![0.0], vec![1.5]], false).unwrap();
        assert_eq!(l.value, 0.125);

        assert!(matches!(
            rkd_loss(&teacher, &[vec![0.0], vec![1.0], vec![2.0]], false),
            Err(Error::Dimension(_))
        ));
        let collapsed = [vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(
            rkd_loss(&teacher, &collapsed, true),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rkd_matches_pair_oracle() {
        for seed in 0..20 {
            let t = random_points(seed, 5, 6, 1.0);
            let s = random_points(seed + 1000, 5, 6, 1.5);
            for normalized in [false, true] {
                let bt = BatchDistances::from_embeddings(&t).unwrap();
                let got = rkd_loss(&bt, &s, normalized).unwrap().value;
                let want = rkd_oracle(&t, &s, normalized);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn rkd_gradients_match_finite_differences() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 40 {
            seed += 1;
            let normalized = checked % 2 == 1;
            let t = random_points(seed, 5, 4, 1.0);
            let s = random_points(seed + 500, 5, 4, 1.2);
            if near_kink(&t, &s, normalized, 1e-3) {
                continue;
            }
            let bt = BatchDistances::from_embeddings(&t).unwrap();
            let analytic = flatten(&rkd_loss(&bt, &s, normalized).unwrap().grad_embeddings);
            let numeric = finite_diff_grad(
                |x| rkd_loss(&bt, &unflatten(x, 4), normalized).unwrap().value,
                &flatten(&s),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed} normalized {normalized}: {err}");
            checked += 1;
        }
    }

    #[test]
    fn batch_distances_validation() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 1)] = 1.0;
        assert!(BatchDistances::new(m.clone()).is_err());
        m[(1, 0)] = 1.0;
        let b = BatchDistances::new(m).unwrap();
        assert_eq!(b.mu, 1.0);
        let pts = random_points(4, 7, 3, 1.0);
        let b = BatchDistances::from_embeddings(&pts).unwrap();
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    sum += b.dist[(i, j)];
                    cnt += 1.0;
                }
            }
        }
        assert!((b.mu - sum / cnt).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn huber_symmetric_and_nonnegative(x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let a = huber(x, y).unwrap();
            prop_assert_eq!(a, huber(y, x).unwrap());
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn normalized_rkd_is_scale_invariant(seed in 0u64..1000, c in 0.05f64..20.0) {
            let t = random_points(seed, 6, 5, 1.0);
            let s = random_points(seed + 1, 6, 5, 1.0);
            let scaled: Vec<Vec<f64>> = s.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let bt = BatchDistances::from_embeddings(&t).unwrap();
            let a = rkd_loss(&bt, &s, true).unwrap().value;
            let b = rkd_loss(&bt, &scaled, true).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn rkd_nonnegative(seed in 0u64..1000, normalized in any::<bool>()) {
            let t = random_points(seed, 5, 3, 1.0);
            let s = random_points(seed + 7, 5, 3, 2.0);
            let bt = BatchDistances::from_embeddings(&t).unwrap();
            prop_assert!(rkd_loss(&bt, &s, normalized).unwrap().value >= 0.0);
        }
    }
}
