//! Structural similarity and the memorization audit built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `[C, H, W]` of a single image given as `[C, H, W]` or `[1, C, H, W]`.
fn image_dims(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [c, h, w] | [1, c, h, w] => Ok([*c, *h, *w]),
        s => Err(Error::dim("ssim", format!("expected one image [C, H, W], got {s:?}"))),
    }
}

/// Mean SSIM over all 7×7 windows (stride 1, valid region) of two
/// `[C × H × W]` pixel buffers; channel scores are averaged.
pub fn ssim_raw(a: &[f64], b: &[f64], dims: [usize; 3]) -> Result<f64> {
    let [c, h, w] = dims;
    if h < WINDOW || w < WINDOW {
        return Err(Error::dim("ssim", format!("{h}×{w} image is smaller than the {WINDOW}×{WINDOW} window")));
    }
    if a.len() != c * h * w || b.len() != a.len() {
        return Err(Error::dim("ssim", format!("buffers of {} and {} values for {dims:?}", a.len(), b.len())));
    }
    let n = (WINDOW * WINDOW) as f64;
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (&a[ch * h * w..(ch + 1) * h * w], &b[ch * h * w..(ch + 1) * h * w]);
        let mut sum = 0.0;
        for y0 in 0..oh {
            for x0 in 0..ow {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + WINDOW {
                    for x in x0..x0 + WINDOW {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// SSIM of two images of identical shape with pixel range `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let da = image_dims(a)?;
    let db = image_dims(b)?;
    if da != db {
        return Err(Error::dim("ssim", format!("{da:?} vs {db:?}")));
    }
    ssim_raw(a.data(), b.data(), da)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyMatch {
    pub recon: usize,
    /// Index of the most similar reference image (lowest on ties).
    pub reference: usize,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub reference_set: String,
    pub matches: Vec<PrivacyMatch>,
    pub mean: f64,
    pub max: f64,
}

/// Best SSIM match in `reference` (`[M × C × H × W]`) for every image in `recons`.
pub fn privacy_score(recons: &Tensor, reference: &Tensor, reference_set: &str) -> Result<PrivacyReport> {
    let (rs, fs) = (recons.shape(), reference.shape());
    if rs.len() != 4 || fs.len() != 4 || rs[1..] != fs[1..] {
        return Err(Error::dim("privacy_score", format!("reconstructions {rs:?} vs reference {fs:?}")));
    }
    let dims = [rs[1], rs[2], rs[3]];
    let per: usize = dims.iter().product();
    let refs: Vec<&[f64]> = reference.data().chunks(per).collect();
    let matches = recons
        .data()
        .par_chunks(per)
        .enumerate()
        .map(|(i, r)| {
            let mut best = PrivacyMatch {
                recon: i,
                reference: 0,
                ssim: f64::NEG_INFINITY,
            };
            for (j, f) in refs.iter().enumerate() {
                let s = ssim_raw(r, f, dims)?;
                if s > best.ssim {
                    best.reference = j;
                    best.ssim = s;
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = matches.iter().map(|m| m.ssim).sum::<f64>() / matches.len() as f64;
    let max = matches.iter().map(|m| m.ssim).fold(f64::NEG_INFINITY, f64::max);
    Ok(PrivacyReport {
        reference_set: reference_set.to_owned(),
        matches,
        mean,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, 9, 8], f)
    }

    #[test]
    fn identity_and_constants() {
        let a = img(|i| (i as f64 * 0.37).sin().abs());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let c = img(|_| 0.5);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_or_mismatched() {
        let small = Tensor::zeros(&[1, 6, 9]);
        assert!(matches!(ssim(&small, &small), Err(Error::Dimension { .. })));
        assert!(ssim(&img(|_| 0.0), &Tensor::zeros(&[1, 8, 9])).is_err());
    }

    #[test]
    fn inverted_image_scores_negative() {
        let a = img(|i| (i % 2) as f64);
        let b = img(|i| 1.0 - (i % 2) as f64);
        assert!(ssim(&a, &b).unwrap() < -0.9);
    }

    #[test]
    fn self_match_prefers_lowest_index() {
        let a = img(|i| (i % 3) as f64 / 2.0);
        let b = img(|i| (i % 5) as f64 / 4.0);
        let a = a.reshape(&[1, 1, 9, 8]).unwrap();
        let b = b.reshape(&[1, 1, 9, 8]).unwrap();
        let reference = Tensor::concat_rows(&[&a, &b, &a]).unwrap();
        let rep = privacy_score(&reference, &reference, "self").unwrap();
        let idx: Vec<usize> = rep.matches.iter().map(|m| m.reference).collect();
        assert_eq!(idx, vec![0, 1, 0]);
        assert!((rep.mean - 1.0).abs() < 1e-9);
    }
}
