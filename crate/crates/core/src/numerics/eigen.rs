//! Symmetric eigendecomposition: Householder tridiagonalization followed by
//! the implicit QL algorithm (the classic EISPACK tred2/tql2 pair).

use super::Mat;
use crate::{Error, Result};

/// Eigenvalues (descending) and matching unit eigenvectors (as rows).
///
/// Each eigenvector's sign is fixed so its largest-magnitude entry is
/// positive, which makes the output independent of solver sign noise.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("eigendecomposition of an empty matrix".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-9 * (1.0 + a[(i, j)].abs()) {
                return Err(Error::Dimension("matrix is not symmetric".into()));
            }
        }
    }

    let mut v: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[y].total_cmp(&d[x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (r, &col) in order.iter().enumerate() {
        let mut pivot = 0.0f64;
        for k in 0..n {
            if v[k][col].abs() > pivot.abs() {
                pivot = v[k][col];
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(r, k)] = sign * v[k][col];
        }
    }
    Ok((values, vectors))
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in &mut e[..i] {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        // e[n-1] is zero, so m < n always holds here.
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 200 {
                    return Err(Error::NonFinite("eigenvalue iteration did not converge".into()));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in &mut d[(l + 2)..n] {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigenvalues".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngSeed;
    use rand::Rng;

    fn random_symmetric(seed: u64, n: usize) -> Mat {
        let mut rng = RngSeed(seed).rng();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn diagonal_matrix() {
        let mut m = Mat::zeros(3, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 5.0;
        m[(2, 2)] = 3.0;
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![5.0, 3.0, 1.0]);
        assert_eq!(vecs.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn residuals_and_orthonormality() {
        for (seed, n) in [(1, 1), (2, 2), (3, 7), (4, 30), (5, 64)] {
            let a = random_symmetric(seed, n);
            let (vals, vecs) = symmetric_eigen(&a).unwrap();
            for r in 0..n {
                let av = a.matvec(vecs.row(r)).unwrap();
                for k in 0..n {
                    assert!((av[k] - vals[r] * vecs[(r, k)]).abs() < 1e-10, "n={n}");
                }
                for s in 0..n {
                    let g = crate::numerics::dot(vecs.row(r), vecs.row(s));
                    let want = if r == s { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < 1e-10);
                }
            }
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient() {
        // outer product u uᵀ has one nonzero eigenvalue ‖u‖²
        let u = [1.0, 2.0, 2.0];
        let mut m = Mat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = u[i] * u[j];
            }
        }
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 9.0).abs() < 1e-12);
        assert!(vals[1].abs() < 1e-12 && vals[2].abs() < 1e-12);
        for k in 0..3 {
            assert!((vecs[(0, k)] - u[k] / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(symmetric_eigen(&Mat::zeros(2, 3)).is_err());
    }
}
