//! Self-assessed quality scoring and the refine/terminate controller.
//!
//! A pristine-statistics model (feature mean and regularized covariance over
//! a clean corpus) scores images by negated Mahalanobis distance, higher is
//! better. The decision rule compares consecutive scores against a threshold
//! and either accepts the restoration or re-noises the latent for another
//! pass.

use crate::error::{Error, Result};
use crate::ggd::{self, ALPHA_MIN};
use crate::imgproc::{mscn_plane, reflect_index, Image, ScalarField};
use crate::latent::LatentTensor;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const FEATURE_DIM: usize = 6;
pub const FEATURE_VERSION: &str = "mscn-ggd-2scale/1";
const COV_REGULARIZER: f64 = 1e-6;

/// Pristine-statistics quality model: feature mean and regularized
/// covariance fitted on a clean corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub version: String,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Outcome of one refinement check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Great,
    Refine,
}

/// 6-D quality features: GGD (alpha, sigma) of MSCN coefficients at full and
/// half scale, mean luminance, and mean gradient magnitude. Degenerate GGD
/// fits (constant content) fall back to (ALPHA_MIN, 0), far from any natural
/// statistics, so scoring stays total.
pub fn quality_features(img: &Image) -> Result<[f64; FEATURE_DIM]> {
    let luma = img.luminance()?;
    let (a1, s1) = mscn_ggd(&luma);
    let half = downsample2(&luma);
    let (a2, s2) = mscn_ggd(&half);
    let mean_luma = luma.data.iter().sum::<f64>() / luma.data.len() as f64;
    let grad = mean_gradient_magnitude(&luma);
    Ok([a1, s1, a2, s2, mean_luma, grad])
}

fn mscn_ggd(plane: &ScalarField) -> (f64, f64) {
    let f = mscn_plane(plane);
    match ggd::ggd_fit(&f.data) {
        Ok(fit) => (fit.params.alpha, fit.params.sigma),
        Err(_) => (ALPHA_MIN, 0.0),
    }
}

fn downsample2(plane: &ScalarField) -> ScalarField {
    let (oh, ow) = ((plane.height / 2).max(1), (plane.width / 2).max(1));
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let r2 = (2 * r).min(plane.height - 1);
            let c2 = (2 * c).min(plane.width - 1);
            let r3 = (2 * r + 1).min(plane.height - 1);
            let c3 = (2 * c + 1).min(plane.width - 1);
            out[r * ow + c] = 0.25
                * (plane.data[r2 * plane.width + c2]
                    + plane.data[r2 * plane.width + c3]
                    + plane.data[r3 * plane.width + c2]
                    + plane.data[r3 * plane.width + c3]);
        }
    }
    ScalarField::new(oh, ow, 1, out)
}

fn mean_gradient_magnitude(plane: &ScalarField) -> f64 {
    let (h, w) = (plane.height, plane.width);
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for kr in 0..3 {
                let rr = reflect_index(r as isize + kr as isize - 1, h);
                for kc in 0..3 {
                    let cc = reflect_index(c as isize + kc as isize - 1, w);
                    let v = plane.data[rr * w + cc];
                    sx += gx[kr * 3 + kc] * v;
                    sy += gy[kr * 3 + kc] * v;
                }
            }
            acc += (sx * sx + sy * sy).sqrt();
        }
    }
    acc / (h * w) as f64
}

/// Fits the pristine model: per-image features, sample mean, and covariance
/// regularized by 1e-6 I.
pub fn fit_pristine_model(corpus: &[Image]) -> Result<QualityModel> {
    if corpus.len() < 10 {
        return Err(Error::DegenerateInput(format!(
            "pristine model needs at least 10 images, got {}",
            corpus.len()
        )));
    }
    let feats: Vec<[f64; FEATURE_DIM]> = corpus
        .iter()
        .map(quality_features)
        .collect::<Result<_>>()?;
    let n = feats.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for f in &feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; FEATURE_DIM]; FEATURE_DIM];
    for f in &feats {
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                cov[i][j] += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
        }
    }
    let mut max_var = 0.0f64;
    for i in 0..FEATURE_DIM {
        for j in 0..FEATURE_DIM {
            cov[i][j] /= n;
        }
        max_var = max_var.max(cov[i][i]);
    }
    if max_var < 1e-12 {
        return Err(Error::DegenerateInput(
            "corpus features are a single point; covariance is zero".into(),
        ));
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += COV_REGULARIZER;
    }
    Ok(QualityModel {
        version: FEATURE_VERSION.into(),
        mean,
        covariance: cov,
    })
}

/// Negated Mahalanobis distance of the image's features; higher is better.
pub fn quality_score(img: &Image, model: &QualityModel) -> Result<f64> {
    let f = quality_features(img)?;
    let diff: Vec<f64> = f.iter().zip(&model.mean).map(|(a, b)| a - b).collect();
    let chol = cholesky(&model.covariance)?;
    let y = forward_substitute(&chol, &diff);
    let d2: f64 = y.iter().map(|v| v * v).sum();
    Ok(-d2.sqrt())
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::DegenerateInput(
                        "quality covariance is not positive definite".into(),
                    ));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves L y = b for lower-triangular L.
fn forward_substitute(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    y
}

/// Great iff the score improvement over the previous check falls below the
/// threshold; a missing previous score always continues (Refine).
pub fn decide(s_j: f64, s_prev: Option<f64>, eta: f64) -> Decision {
    match s_prev {
        None => Decision::Refine,
        Some(prev) => {
            if s_j - prev < eta {
                Decision::Great
            } else {
                Decision::Refine
            }
        }
    }
}

/// Re-noises a latent to depth t':
/// z' = sqrt(alpha_bar_t') z + sqrt(1 - alpha_bar_t') xi, xi ~ N(0, I).
pub fn renoise(
    z: &LatentTensor,
    t_prime: usize,
    sched: &crate::diffusion::DiffusionSchedule,
    seed: u64,
) -> Result<LatentTensor> {
    sched.check_step(t_prime)?;
    let a = sched.alpha_bar(t_prime);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut rng = Rng::new(seed);
    let data = z
        .data()
        .iter()
        .map(|v| sa * v + sn * rng.standard_normal())
        .collect();
    Ok(z.with_data(data))
}
