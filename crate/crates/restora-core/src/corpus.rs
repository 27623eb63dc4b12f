//! Deterministic toy-corpus generation.
//!
//! Four pattern families cycle by image index: oriented gradients, softened
//! checkerboards, Gaussian blobs, and band-limited noise textures. Every
//! pattern carries a little band-limited texture so local statistics look
//! natural rather than synthetic-flat. Generation is bit-deterministic per
//! (spec, master seed).

use crate::error::{Error, Result};
use crate::imgproc::{convolve_separable, gaussian_kernel, Colorspace, Image};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
}

impl CorpusSpec {
    /// 32x32 default used by diffusion runs.
    pub fn small(count: usize, master_seed: u64) -> Self {
        CorpusSpec {
            count,
            height: 32,
            width: 32,
            master_seed,
        }
    }

    /// 64x64 default used by statistics runs.
    pub fn large(count: usize, master_seed: u64) -> Self {
        CorpusSpec {
            count,
            height: 64,
            width: 64,
            master_seed,
        }
    }
}

pub const PATTERN_NAMES: [&str; 4] = ["gradient", "checkerboard", "blobs", "texture"];

/// Pattern name for image index `i`.
pub fn pattern_name(i: usize) -> &'static str {
    PATTERN_NAMES[i % PATTERN_NAMES.len()]
}

pub fn generate(spec: &CorpusSpec) -> Result<Vec<Image>> {
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::InvalidParam {
            name: "size",
            value: format!("{}x{}", spec.height, spec.width),
            reason: "corpus images must be at least 8x8",
        });
    }
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}

pub fn generate_one(spec: &CorpusSpec, index: usize) -> Result<Image> {
    let mut rng = Rng::from_parts(spec.master_seed, "corpus", index as u64);
    let (h, w) = (spec.height, spec.width);
    let base = match index % 4 {
        0 => gradient(h, w, &mut rng),
        1 => checkerboard(h, w, &mut rng),
        2 => blobs(h, w, &mut rng),
        _ => texture(h, w, &mut rng),
    };
    // Shared fine-texture overlay keeps local statistics non-degenerate.
    let overlay = band_limited(h, w, 1.0, &mut rng);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in 0..h * w {
        for ch in 0..3 {
            let v = base[px * 3 + ch] + 0.06 * (overlay[px] - 0.5);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(h, w, 3, data, Colorspace::Rgb)
}

/// White noise through a Gaussian blur, normalized to [0, 1].
fn band_limited(h: usize, w: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
    let k = gaussian_kernel((3.0 * sigma).ceil() as usize, sigma);
    let sm = convolve_separable(&raw, h, w, &k);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for &v in &sm {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    sm.iter().map(|v| (v - lo) / span).collect()
}

fn random_color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.uniform_in(lo, hi),
        rng.uniform_in(lo, hi),
        rng.uniform_in(lo, hi),
    ]
}

fn gradient(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let theta = rng.uniform_in(0.0, std::f64::consts::PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let c0 = random_color(rng, 0.1, 0.45);
    let c1 = random_color(rng, 0.55, 0.9);
    let diag = ((h * h + w * w) as f64).sqrt();
    // A soft step across the ramp keeps the local statistics heavy-tailed
    // the way edges do in natural content.
    let edge_pos = rng.uniform_in(0.3, 0.7);
    let edge_amp = rng.uniform_in(0.08, 0.18);
    let edge_soft = rng.uniform_in(1.0, 2.5);
    let mut out = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let t = 0.5 + (r as f64 * dy + c as f64 * dx) / diag - 0.5 * (dy + dx);
            let t = t.clamp(0.0, 1.0);
            let edge = edge_amp * ((t - edge_pos) * diag / edge_soft).tanh();
            for ch in 0..3 {
                out.push(c0[ch] + (c1[ch] - c0[ch]) * t + edge);
            }
        }
    }
    out
}

fn checkerboard(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    // Large textured cells with sparse soft edges: interiors carry broadband
    // detail so contrast normalization sees noise most of the time and an
    // edge occasionally, like natural content. Small dense cells would put
    // an edge in every window and saturate the normalized field.
    let cell = (h.min(w) / 3).max(8) + rng.below(5);
    let offr = rng.below(cell);
    let offc = rng.below(cell);
    let c0 = random_color(rng, 0.2, 0.42);
    let c1 = random_color(rng, 0.58, 0.8);
    let jitter = rng.uniform_in(0.02, 0.06);
    let mut planes = vec![vec![0.0; h * w]; 3];
    // Per-cell tone jitter, keyed by cell coordinates off one stream draw.
    let jitter_key = rng.next_u64();
    let cell_jitter = |ci: usize, cj: usize| -> f64 {
        let x = crate::rng::derive_seed(jitter_key, "cell", (ci * 1000 + cj) as u64);
        (x as f64 / u64::MAX as f64 - 0.5) * 2.0
    };
    for r in 0..h {
        for c in 0..w {
            let ci = (r + offr) / cell;
            let cj = (c + offc) / cell;
            let on = (ci + cj).is_multiple_of(2);
            let j = jitter * cell_jitter(ci, cj);
            for ch in 0..3 {
                let base = if on { c1[ch] } else { c0[ch] };
                planes[ch][r * w + c] = base + j;
            }
        }
    }
    // Strong blur turns cell boundaries into ramps; the broadband detail
    // goes on afterwards so interiors keep natural local statistics.
    let k = gaussian_kernel(5, 1.8);
    let fine = band_limited(h, w, rng.uniform_in(0.8, 1.2), rng);
    let fine_amp = rng.uniform_in(0.08, 0.14);
    let mut out = vec![0.0; h * w * 3];
    for (ch, plane) in planes.iter().enumerate() {
        let sm = convolve_separable(plane, h, w, &k);
        for (px, v) in sm.iter().enumerate() {
            out[px * 3 + ch] = *v + fine_amp * (fine[px] - 0.5);
        }
    }
    out
}

fn blobs(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let bg = random_color(rng, 0.25, 0.55);
    let mut out = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w {
        out.extend_from_slice(&bg);
    }
    let count = 3 + rng.below(4);
    for _ in 0..count {
        let cr = rng.uniform_in(0.0, h as f64);
        let cc = rng.uniform_in(0.0, w as f64);
        let sigma = rng.uniform_in(0.08, 0.22) * h.min(w) as f64;
        let color = random_color(rng, -0.35, 0.35);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    out[(r * w + c) * 3 + ch] += color[ch] * g;
                }
            }
        }
    }
    out
}

fn texture(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    // Two band-limited layers at different scales; the scale mixture gives
    // the heavy-tailed local statistics of natural texture.
    let tone = random_color(rng, 0.35, 0.65);
    let fine = band_limited(h, w, rng.uniform_in(0.8, 1.2), rng);
    let coarse = band_limited(h, w, rng.uniform_in(2.5, 4.0), rng);
    let amp_fine = rng.uniform_in(0.1, 0.18);
    let amp_coarse = rng.uniform_in(0.25, 0.4);
    let mut out = Vec::with_capacity(h * w * 3);
    for px in 0..h * w {
        let v = amp_fine * (fine[px] - 0.5) + amp_coarse * (coarse[px] - 0.5);
        for t in &tone {
            out.push(t + v);
        }
    }
    out
}
