//! Deterministic synthesis of the three degradation families (noise, haze,
//! low light) and their ordered compositions.
//!
//! Noise is additive Gaussian in linear intensity, clipped to [0, 1]. Haze
//! follows the atmospheric scattering model over a radial pseudo-depth map
//! and is fully deterministic. Low light scales the V channel in HSV space.

use crate::error::{Error, Result};
use crate::imgproc::{hsv_to_rgb, rgb_to_hsv, Colorspace, Image};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// One concrete degradation with its parameters. The seed only matters for
/// the stochastic family (noise); haze and low light are deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DegradationSpec {
    Noise {
        /// Standard deviation in normalized intensity units, in (0, 1].
        sigma: f64,
        seed: u64,
    },
    Haze {
        /// Scattering coefficient per pseudo-depth unit, > 0.
        beta: f64,
        /// Global atmospheric light in (0, 1].
        #[serde(rename = "A")]
        a: f64,
    },
    Lowlight {
        /// V-channel scale in (0, 1].
        gamma: f64,
    },
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradationSpec::Noise { sigma, .. } => {
                if !(0.0..=1.0).contains(&sigma) {
                    return Err(Error::InvalidParam {
                        name: "sigma",
                        value: sigma.to_string(),
                        reason: "noise sigma must lie in [0, 1]",
                    });
                }
            }
            DegradationSpec::Haze { beta, a } => {
                if !beta.is_finite() || beta < 0.0 {
                    return Err(Error::InvalidParam {
                        name: "beta",
                        value: beta.to_string(),
                        reason: "haze beta must be nonnegative",
                    });
                }
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::InvalidParam {
                        name: "A",
                        value: a.to_string(),
                        reason: "atmospheric light must lie in (0, 1]",
                    });
                }
            }
            DegradationSpec::Lowlight { gamma } => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(Error::InvalidParam {
                        name: "gamma",
                        value: gamma.to_string(),
                        reason: "lowlight gamma must lie in (0, 1]",
                    });
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        match *self {
            DegradationSpec::Noise { sigma, seed } => add_gaussian_noise(img, sigma, seed),
            DegradationSpec::Haze { beta, a } => synthesize_haze(img, beta, a),
            DegradationSpec::Lowlight { gamma } => synthesize_lowlight(img, gamma),
        }
    }
}

/// Radial pseudo-depth: d(i, j) = sqrt((i - cx)^2 + (j - cy)^2) / s with
/// center (rows/2, cols/2) and scale s = sqrt(max(rows, cols)).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

pub fn pseudo_depth(height: usize, width: usize) -> DepthMap {
    let cx = height as f64 / 2.0;
    let cy = width as f64 / 2.0;
    let s = (height.max(width) as f64).sqrt();
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let di = i as f64 - cx;
            let dj = j as f64 - cy;
            values.push((di * di + dj * dj).sqrt() / s);
        }
    }
    DepthMap {
        height,
        width,
        values,
    }
}

/// x_lq = clip(x_hq + N(0, sigma^2)), i.i.d. per element.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParam {
            name: "sigma",
            value: sigma.to_string(),
            reason: "noise sigma must be nonnegative",
        });
    }
    let mut rng = Rng::new(seed);
    let data: Vec<f64> = img
        .data()
        .iter()
        .map(|v| v + sigma * rng.standard_normal())
        .collect();
    Image::new(
        img.height(),
        img.width(),
        img.channels(),
        data,
        img.colorspace(),
    )
}

/// Atmospheric scattering: out(p) = in(p) t(p) + A (1 - t(p)) with
/// t(p) = exp(-beta d(p)). Deterministic.
pub fn synthesize_haze(img: &Image, beta: f64, a: f64) -> Result<Image> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::InvalidParam {
            name: "beta",
            value: beta.to_string(),
            reason: "haze beta must be nonnegative",
        });
    }
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::InvalidParam {
            name: "A",
            value: a.to_string(),
            reason: "atmospheric light must lie in (0, 1]",
        });
    }
    let depth = pseudo_depth(img.height(), img.width());
    let ch = img.channels();
    let mut data = Vec::with_capacity(img.data().len());
    for r in 0..img.height() {
        for c in 0..img.width() {
            let t = (-beta * depth.at(r, c)).exp();
            for k in 0..ch {
                data.push(img.at(r, c, k) * t + a * (1.0 - t));
            }
        }
    }
    Image::new(img.height(), img.width(), ch, data, img.colorspace())
}

/// V <- clip(gamma V) in HSV space; H and S unchanged.
pub fn synthesize_lowlight(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParam {
            name: "gamma",
            value: gamma.to_string(),
            reason: "lowlight gamma must lie in (0, 1]",
        });
    }
    let hsv = rgb_to_hsv(img)?;
    let mut data = hsv.data().to_vec();
    for px in data.chunks_exact_mut(3) {
        px[2] = (gamma * px[2]).clamp(0.0, 1.0);
    }
    let scaled = Image::new(img.height(), img.width(), 3, data, Colorspace::Hsv)?;
    hsv_to_rgb(&scaled)
}

/// Applies specs left to right. The mixed scenarios use the order
/// lowlight, then haze, then noise (sensor noise last).
pub fn compose(img: &Image, specs: &[DegradationSpec]) -> Result<Image> {
    if specs.is_empty() {
        return Err(Error::InvalidParam {
            name: "specs",
            value: "[]".into(),
            reason: "compose needs at least one degradation",
        });
    }
    let mut out = img.clone();
    for spec in specs {
        out = spec.apply(&out)?;
    }
    Ok(out)
}

/// Named intensity presets. Haze presets draw the scattering coefficient
/// from the published range using the supplied seed; A is fixed at 1.
pub fn preset(name: &str, seed: u64) -> Result<Vec<DegradationSpec>> {
    let haze_beta = |lo: f64, hi: f64| Rng::from_parts(seed, "haze-beta", 0).uniform_in(lo, hi);
    let specs = match name {
        "noise-light" => vec![DegradationSpec::Noise {
            sigma: 20.0 / 255.0,
            seed,
        }],
        "noise-heavy" => vec![DegradationSpec::Noise {
            sigma: 50.0 / 255.0,
            seed,
        }],
        "haze-light" => vec![DegradationSpec::Haze {
            beta: haze_beta(0.02, 0.05),
            a: 1.0,
        }],
        "haze-heavy" => vec![DegradationSpec::Haze {
            beta: haze_beta(0.06, 0.09),
            a: 1.0,
        }],
        "lowlight-light" => vec![DegradationSpec::Lowlight { gamma: 0.7 }],
        "lowlight-heavy" => vec![DegradationSpec::Lowlight { gamma: 0.3 }],
        "lowlight-noise" => vec![
            DegradationSpec::Lowlight { gamma: 0.3 },
            DegradationSpec::Noise {
                sigma: 20.0 / 255.0,
                seed,
            },
        ],
        "lowlight-haze-noise" => vec![
            DegradationSpec::Lowlight { gamma: 0.3 },
            DegradationSpec::Haze {
                beta: haze_beta(0.02, 0.05),
                a: 1.0,
            },
            DegradationSpec::Noise {
                sigma: 20.0 / 255.0,
                seed,
            },
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown degradation preset {other:?}"
            )))
        }
    };
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::{channel_means, rgb_to_hsv};
    use crate::rng::Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let k = crate::imgproc::gaussian_kernel(2, 1.0);
        let sm = crate::imgproc::convolve_separable(&raw, h, w, &k);
        let mut data = Vec::with_capacity(h * w * 3);
        for v in sm {
            data.push(0.15 + 0.7 * v);
            data.push(0.2 + 0.6 * v);
            data.push(0.1 + 0.7 * v);
        }
        Image::new(h, w, 3, data, Colorspace::Rgb).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = textured(16, 16, 1);
        let out = add_gaussian_noise(&img, 0.0, 7).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn noise_std_matches_sigma() {
        let img = Image::constant(64, 64, 3, 0.5);
        let sigma = 20.0 / 255.0;
        let out = add_gaussian_noise(&img, sigma, 42).unwrap();
        let n = out.data().len() as f64;
        let resid: Vec<f64> = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| a - b)
            .collect();
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        // Sampling band for the std estimator: sigma +- 3 sigma / sqrt(2N).
        let band = 3.0 * sigma / (2.0 * n).sqrt();
        assert!((std - sigma).abs() < band, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let img = textured(16, 16, 2);
        let a = add_gaussian_noise(&img, 0.1, 5).unwrap();
        let b = add_gaussian_noise(&img, 0.1, 5).unwrap();
        let c = add_gaussian_noise(&img, 0.1, 6).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn pseudo_depth_values() {
        let d = pseudo_depth(64, 64);
        assert_eq!(d.at(32, 32), 0.0);
        assert!((d.at(0, 0) - 5.65685424949238).abs() < 1e-10);
        let rect = pseudo_depth(32, 64);
        // Scale is sqrt(max(rows, cols)) = 8; corner at (0,0).
        let want = (16.0f64 * 16.0 + 32.0 * 32.0).sqrt() / 8.0;
        assert!((rect.at(0, 0) - want).abs() < 1e-10);
    }

    #[test]
    fn pseudo_depth_is_radially_symmetric() {
        let d = pseudo_depth(32, 32);
        for (u, v) in [(3usize, 5usize), (7, 2), (10, 10)] {
            let a = d.at(16 + u, 16 + v);
            let b = d.at(16 - u, 16 - v);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn haze_limits() {
        let img = textured(32, 32, 3);
        let same = synthesize_haze(&img, 0.0, 1.0).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(same.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12);

        let all_a = synthesize_haze(&img, 1e3, 0.8).unwrap();
        let mut off_center = 0usize;
        for r in 0..32 {
            for c in 0..32 {
                if r == 16 && c == 16 {
                    continue; // exact center keeps t = 1
                }
                for k in 0..3 {
                    if (all_a.at(r, c, k) - 0.8).abs() > 1e-6 {
                        off_center += 1;
                    }
                }
            }
        }
        assert_eq!(off_center, 0);
    }

    #[test]
    fn haze_is_deterministic_and_brightens() {
        let img = textured(32, 32, 4);
        let a = synthesize_haze(&img, 0.035, 1.0).unwrap();
        let b = synthesize_haze(&img, 0.035, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        let before: f64 = channel_means(&img).iter().sum();
        let after: f64 = channel_means(&a).iter().sum();
        assert!(after > before);
    }

    #[test]
    fn lowlight_identity_and_v_scaling() {
        let img = textured(16, 16, 5);
        let same = synthesize_lowlight(&img, 1.0).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(same.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6);

        let gamma = 0.3;
        let dark = synthesize_lowlight(&img, gamma).unwrap();
        let hv_in = rgb_to_hsv(&img).unwrap();
        let hv_out = rgb_to_hsv(&dark).unwrap();
        for i in 0..16 * 16 {
            let v_in = hv_in.data()[i * 3 + 2];
            let v_out = hv_out.data()[i * 3 + 2];
            assert!((v_out - gamma * v_in).abs() < 1e-6, "pixel {i}");
        }
    }

    #[test]
    fn lowlight_rejects_gray() {
        let gray = Image::constant(8, 8, 1, 0.5);
        assert!(synthesize_lowlight(&gray, 0.5).is_err());
    }

    #[test]
    fn compose_identity_and_empty() {
        let img = textured(16, 16, 6);
        let out = compose(&img, &[DegradationSpec::Lowlight { gamma: 1.0 }]).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6);
        assert!(compose(&img, &[]).is_err());
    }

    #[test]
    fn composed_noise_variance_adds() {
        // On unclipped mid-gray, residual variance of two noise passes is
        // close to a^2 + b^2.
        let img = Image::constant(64, 64, 3, 0.5);
        let (a, b) = (0.03, 0.04);
        let out = compose(
            &img,
            &[
                DegradationSpec::Noise { sigma: a, seed: 1 },
                DegradationSpec::Noise { sigma: b, seed: 2 },
            ],
        )
        .unwrap();
        let n = out.data().len() as f64;
        let var = out
            .data()
            .iter()
            .map(|v| (v - 0.5) * (v - 0.5))
            .sum::<f64>()
            / n;
        let want = a * a + b * b;
        assert!((var - want).abs() / want < 0.1, "var {var} want {want}");
    }

    #[test]
    fn outputs_stay_in_range() {
        let img = textured(16, 16, 8);
        for spec in [
            DegradationSpec::Noise {
                sigma: 0.5,
                seed: 3,
            },
            DegradationSpec::Haze { beta: 0.2, a: 1.0 },
            DegradationSpec::Lowlight { gamma: 0.3 },
        ] {
            let out = spec.apply(&img).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn monotone_statistics_on_corpus() {
        // Noise raises residual std, haze (A=1) raises mean intensity,
        // lowlight lowers mean intensity and V-range; checked as corpus
        // means over 10 images.
        let corpus: Vec<Image> = (0..10).map(|i| textured(32, 32, 100 + i)).collect();
        let mut noise_std = [0.0; 3];
        let mut haze_mean = [0.0; 3];
        let mut low_mean = [0.0; 3];
        let mut low_vrange = [0.0; 3];
        let noise_sigmas = [0.0, 20.0 / 255.0, 50.0 / 255.0];
        let haze_betas = [0.0, 0.035, 0.075];
        let low_gammas = [1.0, 0.7, 0.3];
        for (img_i, img) in corpus.iter().enumerate() {
            for lvl in 0..3 {
                let noisy = add_gaussian_noise(img, noise_sigmas[lvl], 7 + img_i as u64).unwrap();
                let n = noisy.data().len() as f64;
                let var = noisy
                    .data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / n;
                noise_std[lvl] += var.sqrt();

                let hz = synthesize_haze(img, haze_betas[lvl], 1.0).unwrap();
                haze_mean[lvl] += channel_means(&hz).iter().sum::<f64>();

                let lo = synthesize_lowlight(img, low_gammas[lvl]).unwrap();
                low_mean[lvl] += channel_means(&lo).iter().sum::<f64>();
                let hsv = rgb_to_hsv(&lo).unwrap();
                let vs: Vec<f64> = hsv.data().chunks_exact(3).map(|p| p[2]).collect();
                let vmax = vs.iter().cloned().fold(f64::MIN, f64::max);
                let vmin = vs.iter().cloned().fold(f64::MAX, f64::min);
                low_vrange[lvl] += vmax - vmin;
            }
        }
        assert!(noise_std[0] < noise_std[1] && noise_std[1] < noise_std[2]);
        assert!(haze_mean[0] < haze_mean[1] && haze_mean[1] < haze_mean[2]);
        assert!(low_mean[0] > low_mean[1] && low_mean[1] > low_mean[2]);
        assert!(low_vrange[0] > low_vrange[1] && low_vrange[1] > low_vrange[2]);
    }

    #[test]
    fn presets_match_published_values() {
        let specs = preset("noise-light", 1).unwrap();
        assert!(
            matches!(specs[0], DegradationSpec::Noise { sigma, .. } if (sigma - 20.0/255.0).abs() < 1e-12)
        );
        let specs = preset("lowlight-heavy", 1).unwrap();
        assert!(matches!(specs[0], DegradationSpec::Lowlight { gamma } if gamma == 0.3));
        let specs = preset("haze-light", 9).unwrap();
        match specs[0] {
            DegradationSpec::Haze { beta, a } => {
                assert!((0.02..=0.05).contains(&beta));
                assert_eq!(a, 1.0);
            }
            _ => panic!("expected haze"),
        }
        let mix = preset("lowlight-noise", 1).unwrap();
        assert_eq!(mix.len(), 2);
        assert!(preset("rain", 0).is_err());
    }

    #[test]
    fn spec_serializes_with_documented_keys() {
        let spec = DegradationSpec::Haze { beta: 0.04, a: 1.0 };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"haze\""), "{json}");
        assert!(json.contains("\"A\":1.0"), "{json}");
        let back: DegradationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
