//! Distance between Gaussian fits of fixed projected features of two
//! image sets: `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
//! The projector is either a mean-pooled identity (features are coarse
//! pixels) or a fixed, seeded random convolutional stack; no pretrained
//! network is involved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PadMode, ParamKey};
use crate::rng::{self};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    /// Mean-pool the image to 4x4; features are the 16 coarse pixels.
    Identity,
    /// Seeded random conv stack pooled to 16 features.
    RandomConv { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistance {
    pub value: f64,
    /// Set when either set had fewer samples than feature dimensions and
    /// the covariance fit fell back to a diagonal.
    pub diagonal_fallback: bool,
}

const FEAT_DIM: usize = 16;

fn mean_pool_4x4(img: &Tensor) -> Vec<f64> {
    let (c, h, w) = img.chw();
    let mut out = vec![0.0; FEAT_DIM];
    for by in 0..4 {
        for bx in 0..4 {
            let y0 = by * h / 4;
            let y1 = (by + 1) * h / 4;
            let x0 = bx * w / 4;
            let x1 = (bx + 1) * w / 4;
            let mut acc = 0.0;
            let mut n = 0usize;
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img.data()[(ch * h + y) * w + x];
                        n += 1;
                    }
                }
            }
            out[by * 4 + bx] = acc / n as f64;
        }
    }
    out
}

fn random_conv_features(img: &Tensor, seed: u64) -> Vec<f64> {
    let mut prng = rng::seed_rng(seed);
    let mk = |prng: &mut rng::Rng, co: usize, ci: usize| -> Tensor {
        let std = (2.0 / (ci * 9) as f64).sqrt();
        Tensor::new(
            vec![co, ci, 3, 3],
            (0..co * ci * 9).map(|_| rng::normal(prng) * std).collect(),
        )
    };
    let w1 = mk(&mut prng, 4, img.channels());
    let w2 = mk(&mut prng, 4, 4);
    let mut g = Graph::new();
    let x = g.input(img.clone());
    let w1n = g.param(ParamKey { set: 0, slot: 0 }, w1);
    let h1 = g.conv2d(x, w1n, None, 2, PadMode::Zeros);
    let h1 = g.relu(h1);
    let w2n = g.param(ParamKey { set: 0, slot: 1 }, w2);
    let h2 = g.conv2d(h1, w2n, None, 2, PadMode::Zeros);
    let h2 = g.relu(h2);
    let feats = g.value(h2);
    // mean over space per channel, then 2x2 spatial grid per channel
    let (c, h, w) = feats.chw();
    let mut out = Vec::with_capacity(FEAT_DIM);
    for ch in 0..c {
        for by in 0..2 {
            for bx in 0..2 {
                let y0 = by * h / 2;
                let y1 = (by + 1) * h / 2;
                let x0 = bx * w / 2;
                let x1 = (bx + 1) * w / 2;
                let mut acc = 0.0;
                let mut n = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += feats.data()[(ch * h + y) * w + x];
                        n += 1;
                    }
                }
                out.push(acc / n as f64);
            }
        }
    }
    out
}

fn project(img: &Tensor, projector: Projector) -> Vec<f64> {
    match projector {
        Projector::Identity => mean_pool_4x4(img),
        Projector::RandomConv { seed } => random_conv_features(img, seed),
    }
}

struct GaussianFit {
    mean: Vec<f64>,
    cov: Vec<f64>, // d x d row-major
    diagonal: bool,
}

fn fit_gaussian(features: &[Vec<f64>]) -> GaussianFit {
    let n = features.len();
    let d = FEAT_DIM;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let diagonal = n < d;
    let mut cov = vec![0.0; d * d];
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            if diagonal {
                cov[i * d + i] += di * di / denom;
            } else {
                for j in 0..d {
                    cov[i * d + j] += di * (f[j] - mean[j]) / denom;
                }
            }
        }
    }
    GaussianFit {
        mean,
        cov,
        diagonal,
    }
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues, row-major eigenvector matrix V with
/// eigenvectors in rows).
fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let vpk = v[p * d + k];
                    let vqk = v[q * d + k];
                    v[p * d + k] = c * vpk - s * vqk;
                    v[q * d + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, v)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrtm_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = jacobi_eigen(a, d);
    // S = V^T diag(sqrt(max(eig,0))) V   (V rows are eigenvectors)
    let mut scaled = vec![0.0; d * d];
    for (i, &l) in eig.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for j in 0..d {
            scaled[i * d + j] = s * v[i * d + j];
        }
    }
    // V^T * scaled
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = v[j * d + i];
        }
    }
    matmul_sq(&vt, &scaled, d)
}

/// Distance between the Gaussian fits of projected features of two image
/// sets. Falls back to diagonal covariances (flagged) when a set is
/// smaller than the feature dimension.
pub fn feature_distance(
    real: &[Tensor],
    synth: &[Tensor],
    projector: Projector,
) -> Result<FeatureDistance> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("feature distance needs non-empty sets".into()));
    }
    let fr: Vec<Vec<f64>> = real.iter().map(|t| project(t, projector)).collect();
    let fs: Vec<Vec<f64>> = synth.iter().map(|t| project(t, projector)).collect();
    let mut ga = fit_gaussian(&fr);
    let mut gb = fit_gaussian(&fs);
    let diagonal = ga.diagonal || gb.diagonal;
    if diagonal {
        // keep both fits in the same family
        for m in [&mut ga, &mut gb] {
            for i in 0..FEAT_DIM {
                for j in 0..FEAT_DIM {
                    if i != j {
                        m.cov[i * FEAT_DIM + j] = 0.0;
                    }
                }
            }
        }
    }
    let d = FEAT_DIM;
    let mean_term: f64 = ga
        .mean
        .iter()
        .zip(&gb.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace_term = if diagonal {
        let mut acc = 0.0;
        for i in 0..d {
            let s1 = ga.cov[i * d + i].max(0.0);
            let s2 = gb.cov[i * d + i].max(0.0);
            acc += s1 + s2 - 2.0 * (s1 * s2).sqrt();
        }
        acc
    } else {
        let s1_sqrt = sqrtm_psd(&ga.cov, d);
        let inner = matmul_sq(&matmul_sq(&s1_sqrt, &gb.cov, d), &s1_sqrt, d);
        // symmetrize against rounding before the eigensolve
        let mut sym = inner.clone();
        for i in 0..d {
            for j in 0..d {
                sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            }
        }
        let (eig, _) = jacobi_eigen(&sym, d);
        let tr1: f64 = (0..d).map(|i| ga.cov[i * d + i]).sum();
        let tr2: f64 = (0..d).map(|i| gb.cov[i * d + i]).sum();
        tr1 + tr2 - 2.0 * eig.iter().map(|&l| l.max(0.0).sqrt()).sum::<f64>()
    };
    Ok(FeatureDistance {
        value: (mean_term + trace_term).max(0.0),
        diagonal_fallback: diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seed_rng};

    fn image_set(seed: u64, n: usize, shift: f64) -> Vec<Tensor> {
        let mut rng = seed_rng(seed);
        (0..n)
            .map(|_| {
                Tensor::new(
                    vec![1, 16, 16],
                    normal_vec(&mut rng, 256)
                        .iter()
                        .map(|v| 0.3 * v + shift)
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = image_set(1, 24, 0.0);
        let d = feature_distance(&a, &a, Projector::Identity).unwrap();
        assert!(!d.diagonal_fallback);
        assert!(d.value.abs() < 1e-8, "distance {}", d.value);

        let d = feature_distance(&a, &a, Projector::RandomConv { seed: 5 }).unwrap();
        assert!(d.value.abs() < 1e-8);
    }

    #[test]
    fn intensity_shift_grows_monotonically() {
        let base = image_set(2, 24, 0.0);
        let mut last = -1.0;
        for k in 0..5 {
            let c = 0.1 * k as f64;
            let shifted = image_set(2, 24, c);
            let d = feature_distance(&base, &shifted, Projector::Identity).unwrap();
            assert!(
                d.value > last,
                "shift {c}: distance {} not above {last}",
                d.value
            );
            last = d.value;
        }
    }

    #[test]
    fn disjoint_black_and_white_sets_are_far_apart() {
        let black: Vec<Tensor> = (0..20)
            .map(|_| Tensor::full(vec![1, 16, 16], -1.0))
            .collect();
        let white: Vec<Tensor> = (0..20)
            .map(|_| Tensor::full(vec![1, 16, 16], 1.0))
            .collect();
        let d = feature_distance(&black, &white, Projector::Identity).unwrap();
        assert!(d.value > 1.0);
    }

    #[test]
    fn small_sets_use_the_flagged_diagonal_fallback() {
        let a = image_set(3, 5, 0.0);
        let b = image_set(4, 5, 0.2);
        let d = feature_distance(&a, &b, Projector::Identity).unwrap();
        assert!(d.diagonal_fallback);
        assert!(d.value > 0.0);
    }

    #[test]
    fn sqrtm_squares_back() {
        // random SPD matrix
        let mut rng = seed_rng(9);
        let d = 6;
        let raw = normal_vec(&mut rng, d * d);
        let mut spd = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    spd[i * d + j] += raw[i * d + k] * raw[j * d + k];
                }
            }
            spd[i * d + i] += 0.5;
        }
        let s = sqrtm_psd(&spd, d);
        let ss = matmul_sq(&s, &s, d);
        for (a, b) in ss.iter().zip(&spd) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
