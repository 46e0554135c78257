//! Least-squares regression on standardized features.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 2048;
/// Pivots below this (on a unit-diagonal Gram) are treated as exact collinearity.
const PIVOT_DROP: f64 = 1e-12;

/// A fitted linear model `y_j = mean_j + Σ_i β_ij (f_i − m_i) / s_i` over the kept features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub keep: Vec<usize>,
    pub intercept: Vec<f64>,
    /// `coef[j][i]` for target `j`, kept feature `i`.
    pub coef: Vec<Vec<f64>>,
    pub cond: f64,
}

impl LinearFit {
    pub fn n_targets(&self) -> usize {
        self.intercept.len()
    }

    pub fn predict(&self, features: &[f64], target: usize) -> f64 {
        let c = &self.coef[target];
        self.intercept[target]
            + self
                .keep
                .iter()
                .zip(c)
                .map(|(&i, b)| b * (features[i] - self.mean[i]) / self.scale[i])
                .sum::<f64>()
    }

    pub fn predict_all(&self, features: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.predict(features, j);
        }
    }
}

/// Column sums of a row-major `rows × width` matrix, reduced in a fixed order.
fn column_sums(data: &[f64], width: usize, f: impl Fn(&[f64], &mut [f64]) + Sync) -> Vec<f64> {
    let partial: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * width)
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            for row in chunk.chunks(width) {
                f(row, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partial {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

/// A factorized design: feature standardization, retained columns and the Gram Cholesky factor.
#[derive(Debug, Clone)]
pub struct Design {
    p: usize,
    rows: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Retained feature indices, in pivot order.
    keep: Vec<usize>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    pub cond: f64,
}

impl Design {
    /// Features with no spread are dropped, exact collinearity is removed by pivoting,
    /// and a retained Gram condition number above `max_cond` is an error.
    pub fn new(features: &[f64], p: usize, max_cond: f64, step: usize) -> Result<Self> {
        let rows = features.len() / p;
        assert!(rows > 0 && features.len() == rows * p);
        let m = rows as f64;
        let sums = column_sums(features, p, |r, acc| acc.iter_mut().zip(r).for_each(|(a, v)| *a += v));
        let mean: Vec<f64> = sums.iter().map(|s| s / m).collect();
        let sq = column_sums(features, p, |r, acc| {
            for i in 0..p {
                let d = r[i] - mean[i];
                acc[i] += d * d;
            }
        });
        let scale: Vec<f64> = sq.iter().map(|s| (s / m).sqrt()).collect();
        let active: Vec<usize> = (0..p)
            .filter(|&i| scale[i] > 1e-10 * mean[i].abs() && scale[i] > 0.0)
            .collect();
        let a = active.len();
        if a == 0 {
            return Ok(Design {
                p,
                rows,
                mean,
                scale,
                keep: vec![],
                chol: None,
                cond: 1.0,
            });
        }

        let partial: Vec<Vec<f64>> = features
            .par_chunks(CHUNK * p)
            .map(|fc| {
                let mut acc = vec![0.0; a * a];
                let mut z = vec![0.0; a];
                for fr in fc.chunks(p) {
                    for (zi, &i) in z.iter_mut().zip(&active) {
                        *zi = (fr[i] - mean[i]) / scale[i];
                    }
                    for i in 0..a {
                        let zi = z[i];
                        let row = &mut acc[i * a..(i + 1) * a];
                        for j in i..a {
                            row[j] += zi * z[j];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; a * a];
        for part in partial {
            total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
        }
        let mut gram = DMatrix::<f64>::zeros(a, a);
        for i in 0..a {
            for j in i..a {
                gram[(i, j)] = total[i * a + j] / m;
                gram[(j, i)] = gram[(i, j)];
            }
        }

        let order = pivoted_cholesky_order(&gram);
        let k = order.len();
        let sub = DMatrix::from_fn(k, k, |i, j| gram[(order[i], order[j])]);
        let eig = SymmetricEigen::new(sub.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= max_cond) {
            return Err(Error::IllConditionedRegression { step, cond });
        }
        let chol = sub.cholesky().ok_or(Error::IllConditionedRegression { step, cond })?;
        Ok(Design {
            p,
            rows,
            mean,
            scale,
            keep: order.iter().map(|&i| active[i]).collect(),
            chol: Some(chol),
            cond,
        })
    }

    /// Least-squares coefficients for `targets` (`rows × q`, row-major).
    pub fn solve(&self, features: &[f64], targets: &[f64], q: usize) -> LinearFit {
        let (p, k, m) = (self.p, self.keep.len(), self.rows as f64);
        assert_eq!(targets.len(), self.rows * q);
        let tsum = column_sums(targets, q, |r, acc| acc.iter_mut().zip(r).for_each(|(a, v)| *a += v));
        let intercept: Vec<f64> = tsum.iter().map(|s| s / m).collect();
        let coef = match &self.chol {
            None => vec![vec![]; q],
            Some(chol) => {
                let partial: Vec<Vec<f64>> = features
                    .par_chunks(CHUNK * p)
                    .zip(targets.par_chunks(CHUNK * q))
                    .map(|(fc, tc)| {
                        let mut acc = vec![0.0; k * q];
                        let mut z = vec![0.0; k];
                        for (fr, tr) in fc.chunks(p).zip(tc.chunks(q)) {
                            for (zi, &i) in z.iter_mut().zip(&self.keep) {
                                *zi = (fr[i] - self.mean[i]) / self.scale[i];
                            }
                            for j in 0..q {
                                let t = tr[j] - intercept[j];
                                let row = &mut acc[j * k..(j + 1) * k];
                                row.iter_mut().zip(&z).for_each(|(a, zi)| *a += zi * t);
                            }
                        }
                        acc
                    })
                    .collect();
                let mut cross = vec![0.0; k * q];
                for part in partial {
                    cross.iter_mut().zip(part).for_each(|(t, v)| *t += v);
                }
                (0..q)
                    .map(|j| {
                        let rhs = nalgebra::DVector::from_fn(k, |i, _| cross[j * k + i] / m);
                        chol.solve(&rhs).iter().copied().collect()
                    })
                    .collect()
            }
        };
        LinearFit {
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            keep: self.keep.clone(),
            intercept,
            coef,
            cond: self.cond,
        }
    }
}

/// One-shot [`Design::new`] followed by [`Design::solve`].
pub fn fit(features: &[f64], p: usize, targets: &[f64], q: usize, max_cond: f64, step: usize) -> Result<LinearFit> {
    Design::new(features, p, max_cond, step).map(|d| d.solve(features, targets, q))
}

/// Greedy diagonal pivoting; returns the retained column indices in pivot order.
fn pivoted_cholesky_order(g: &DMatrix<f64>) -> Vec<usize> {
    let n = g.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut d: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::new();
    let top = d.iter().cloned().fold(0.0, f64::max);
    while !remaining.is_empty() {
        let (pos, &piv) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| d[*a.1].total_cmp(&d[*b.1]).then(b.1.cmp(a.1)))
            .unwrap();
        if d[piv] <= PIVOT_DROP * top {
            break;
        }
        remaining.remove(pos);
        let c = order.len();
        let root = d[piv].sqrt();
        l[(piv, c)] = root;
        for &i in &remaining {
            let mut v = g[(i, piv)];
            for r in 0..c {
                v -= l[(i, r)] * l[(piv, r)];
            }
            l[(i, c)] = v / root;
            d[i] -= l[(i, c)] * l[(i, c)];
        }
        order.push(piv);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(rows: usize, f: impl Fn(f64, f64) -> Vec<f64>) -> (Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = Vec::new();
        let mut p = 0;
        for _ in 0..rows {
            let r = f(rng.random::<f64>(), rng.random::<f64>());
            p = r.len();
            out.extend(r);
        }
        (out, p)
    }

    #[test]
    fn recovers_exact_linear_model() {
        let (x, p) = design(500, |a, b| vec![a, b, a * b]);
        let y: Vec<f64> = x.chunks(p).map(|r| 1.0 + 2.0 * r[0] - 3.0 * r[1] + 0.5 * r[2]).collect();
        let fit = fit(&x, p, &y, 1, 1e10, 0).unwrap();
        for r in x.chunks(p).take(20) {
            let want = 1.0 + 2.0 * r[0] - 3.0 * r[1] + 0.5 * r[2];
            assert!((fit.predict(r, 0) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn drops_constant_and_collinear_columns() {
        let (x, p) = design(300, |a, b| vec![a, 7.0, 2.0 * a - b, b]);
        let y: Vec<f64> = x.chunks(p).map(|r| r[0] + r[3]).collect();
        let fit = fit(&x, p, &y, 1, 1e10, 0).unwrap();
        assert_eq!(fit.keep.len(), 2);
        assert!(!fit.keep.contains(&1));
        for r in x.chunks(p).take(10) {
            assert!((fit.predict(r, 0) - (r[0] + r[3])).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_design_returns_target_mean() {
        let x = vec![1.5; 40];
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let fit = fit(&x, 1, &y, 1, 1e10, 0).unwrap();
        assert!(fit.keep.is_empty());
        assert!((fit.predict(&[1.5], 0) - 19.5).abs() < 1e-12);
    }

    #[test]
    fn near_collinear_design_is_rejected() {
        let (x, p) = design(400, |a, b| vec![a, a + 1e-6 * (b - 0.5)]);
        let y: Vec<f64> = x.chunks(p).map(|r| r[0]).collect();
        match fit(&x, p, &y, 1, 1e10, 7) {
            Err(Error::IllConditionedRegression { step: 7, cond }) => assert!(cond > 1e10),
            other => panic!("{other:?}"),
        }
        assert!(fit(&x, p, &y, 1, 1e14, 7).is_ok());
    }

    #[test]
    fn multiple_targets_share_design() {
        let (x, p) = design(200, |a, b| vec![a, b]);
        let y: Vec<f64> = x.chunks(p).flat_map(|r| [r[0], -r[1], 3.0]).collect();
        let fit = fit(&x, p, &y, 3, 1e10, 0).unwrap();
        let mut out = [0.0; 3];
        fit.predict_all(&x[..2], &mut out);
        assert!((out[0] - x[0]).abs() < 1e-12 && (out[1] + x[1]).abs() < 1e-12 && (out[2] - 3.0).abs() < 1e-12);
    }
}
