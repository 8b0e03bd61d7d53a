//! Principal component projection by power iteration with deflation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PCA_TOL: f64 = 1e-8;
pub const PCA_MAX_ITER: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Centered rows projected onto the leading components, `[N × k]`.
    pub coords: Tensor,
    /// Leading eigenvalues of the sample covariance (divisor `N−1`), descending.
    pub explained_variance: Vec<f64>,
    /// Unit-norm principal directions, one per component.
    pub components: Vec<Vec<f64>>,
}

/// Project the rows of `features` (`[N × d]`) onto their top `k` principal components.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Projection> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::dim("pca_project", format!("expected [N × d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if k == 0 || k > d || n <= k {
        return Err(Error::Contract(format!(
            "need N > k ≥ 1 and k ≤ d; got N={n}, d={d}, k={k}"
        )));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();

    let mut cov = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        let (lambda, v) = leading_eigenpair(&cov, d, c)?;
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        variances.push(lambda);
        components.push(v);
    }

    let coords = Tensor::from_fn(&[n, k], |idx| {
        let (r, c) = (idx / k, idx % k);
        centered[r * d..(r + 1) * d]
            .iter()
            .zip(&components[c])
            .map(|(a, b)| a * b)
            .sum()
    });
    Ok(Projection {
        coords,
        explained_variance: variances,
        components,
    })
}

fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(d)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of a symmetric PSD matrix. Stops when the Rayleigh
/// quotient changes by at most `PCA_TOL` relative to its magnitude.
fn leading_eigenpair(m: &[f64], d: usize, salt: usize) -> Result<(f64, Vec<f64>)> {
    let scale = m.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale == 0.0 {
        let mut v = vec![0.0; d];
        v[salt % d] = 1.0;
        return Ok((0.0, v));
    }
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + ((i * 7919 + salt * 104_729) % 97) as f64 / 97.0)
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = f64::NAN;
    for _ in 0..PCA_MAX_ITER {
        let w = mat_vec(m, d, &v);
        let nw = norm(&w);
        if nw <= scale * 1e-14 {
            return Ok((0.0, v));
        }
        let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let rq: f64 = mat_vec(m, d, &next).iter().zip(&next).map(|(a, b)| a * b).sum();
        let converged = (rq - lambda).abs() <= PCA_TOL * rq.abs().max(scale * 1e-12);
        lambda = rq;
        v = next;
        if converged {
            return Ok((lambda.max(0.0), v));
        }
    }
    Err(Error::NonConvergence {
        iterations: PCA_MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_variances_recovered() {
        // rows alternate ±(3, 1, 0) along independent axes
        let rows = [[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let x = Tensor::new(vec![4, 3], rows.concat()).unwrap();
        let p = pca_project(&x, 2).unwrap();
        assert!((p.explained_variance[0] - 6.0).abs() < 1e-9);
        assert!((p.explained_variance[1] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p.components[0][0].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_k() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(pca_project(&x, 3), Err(Error::Contract(_))));
        assert!(matches!(pca_project(&x, 0), Err(Error::Contract(_))));
        assert!(matches!(pca_project(&Tensor::zeros(&[2, 4]), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_data_has_zero_variance() {
        let x = Tensor::full(&[5, 3], 2.0);
        let p = pca_project(&x, 2).unwrap();
        assert_eq!(p.explained_variance, vec![0.0, 0.0]);
        assert!(p.coords.data().iter().all(|&c| c == 0.0));
    }
}
