//! Learnable conditioned degradation operator and its online training step.
//!
//! The operator maps an estimated clean image to a plausible degraded
//! observation through three 3x3 convolutions with a conditioning path:
//!
//!   y = conv3( a(conv2(a(conv1(x)))) + scale(cond) . a(conv1(x)) )
//!
//! where `a` is a leaky rectifier (slope 0.1), `scale` is an affine map from
//! the conditioning pair (alpha, sigma) to per-feature gains, and all
//! convolutions use reflect padding at stride 1. Gradients for every weight,
//! the input, and the conditioning pair are hand-derived reverse-mode
//! accumulation; finite differences audit them in the tests.

use crate::error::{Error, Result};
use crate::ggd::GgdParams;
use crate::imgproc::{reflect_index, Image, ScalarField};
use crate::rng::Rng;

pub const FEATURES: usize = 16;
const KSIZE: usize = 3;
const LEAK: f64 = 0.1;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_c: usize,
    pub in_c: usize,
    /// Kernels indexed [out][in][kr][kc].
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvLayer {
    fn zeros(out_c: usize, in_c: usize) -> Self {
        ConvLayer {
            out_c,
            in_c,
            w: vec![0.0; out_c * in_c * KSIZE * KSIZE],
            b: vec![0.0; out_c],
        }
    }

    fn forward(&self, x: &ScalarField) -> ScalarField {
        assert_eq!(x.channels, self.in_c);
        let (h, w) = (x.height, x.width);
        let mut out = vec![0.0; h * w * self.out_c];
        for r in 0..h {
            for c in 0..w {
                // Resolve reflected neighborhood once per pixel.
                let mut nbr = [0usize; KSIZE * KSIZE];
                for kr in 0..KSIZE {
                    let rr = reflect_index(r as isize + kr as isize - 1, h);
                    for kc in 0..KSIZE {
                        let cc = reflect_index(c as isize + kc as isize - 1, w);
                        nbr[kr * KSIZE + kc] = (rr * w + cc) * self.in_c;
                    }
                }
                for o in 0..self.out_c {
                    let mut acc = self.b[o];
                    for i in 0..self.in_c {
                        for (t, &base) in nbr.iter().enumerate() {
                            acc += self.w[(o * self.in_c + i) * 9 + t] * x.data[base + i];
                        }
                    }
                    out[(r * w + c) * self.out_c + o] = acc;
                }
            }
        }
        ScalarField::new(h, w, self.out_c, out)
    }

    /// Accumulates the input cotangent and the weight/bias gradients for an
    /// upstream cotangent `dy`.
    fn backward(
        &self,
        x: &ScalarField,
        dy: &ScalarField,
        dw: &mut ConvLayer,
        dx: &mut ScalarField,
    ) {
        let (h, w) = (x.height, x.width);
        for r in 0..h {
            for c in 0..w {
                let mut nbr = [0usize; KSIZE * KSIZE];
                for kr in 0..KSIZE {
                    let rr = reflect_index(r as isize + kr as isize - 1, h);
                    for kc in 0..KSIZE {
                        let cc = reflect_index(c as isize + kc as isize - 1, w);
                        nbr[kr * KSIZE + kc] = (rr * w + cc) * self.in_c;
                    }
                }
                for o in 0..self.out_c {
                    let g = dy.data[(r * w + c) * self.out_c + o];
                    if g == 0.0 {
                        continue;
                    }
                    dw.b[o] += g;
                    for i in 0..self.in_c {
                        for (t, &base) in nbr.iter().enumerate() {
                            dw.w[(o * self.in_c + i) * 9 + t] += g * x.data[base + i];
                            dx.data[base + i] += g * self.w[(o * self.in_c + i) * 9 + t];
                        }
                    }
                }
            }
        }
    }
}

/// Affine map from the conditioning pair to per-feature gains.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCond {
    /// Indexed [feature][input], input order (alpha, sigma).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineCond {
    fn zeros(features: usize) -> Self {
        AffineCond {
            w: vec![0.0; features * 2],
            b: vec![0.0; features],
        }
    }

    fn forward(&self, cond: (f64, f64)) -> Vec<f64> {
        self.b
            .iter()
            .enumerate()
            .map(|(f, b)| b + self.w[f * 2] * cond.0 + self.w[f * 2 + 1] * cond.1)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Full operator state: three convolutions, the conditioning map, and the
/// optimizer moments carried alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DegOpWeights {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub cond: AffineCond,
    pub adam: AdamState,
}

/// Mirror of the weight tensors holding gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DegOpGradients {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub cond: AffineCond,
}

impl DegOpWeights {
    /// Variance-scaled random init for conv1/conv2; conv3 starts near zero so
    /// early training signal comes from the data pull rather than saturation.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = Rng::from_parts(seed, "degop-init", 0);
        let mut conv1 = ConvLayer::zeros(FEATURES, channels);
        let mut conv2 = ConvLayer::zeros(FEATURES, FEATURES);
        let mut conv3 = ConvLayer::zeros(channels, FEATURES);
        let std1 = (2.0 / (channels * KSIZE * KSIZE) as f64).sqrt();
        let std2 = (2.0 / (FEATURES * KSIZE * KSIZE) as f64).sqrt();
        for v in conv1.w.iter_mut() {
            *v = std1 * rng.standard_normal();
        }
        for v in conv2.w.iter_mut() {
            *v = std2 * rng.standard_normal();
        }
        for v in conv3.w.iter_mut() {
            *v = 1e-3 * rng.standard_normal();
        }
        let mut cond = AffineCond::zeros(FEATURES);
        for v in cond.w.iter_mut() {
            *v = 0.01 * rng.standard_normal();
        }
        let n = Self::param_count(channels);
        DegOpWeights {
            conv1,
            conv2,
            conv3,
            cond,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_c
    }

    fn param_count(channels: usize) -> usize {
        let c1 = FEATURES * channels * 9 + FEATURES;
        let c2 = FEATURES * FEATURES * 9 + FEATURES;
        let c3 = channels * FEATURES * 9 + channels;
        let l = FEATURES * 2 + FEATURES;
        c1 + c2 + c3 + l
    }

    pub fn zero_gradients(&self) -> DegOpGradients {
        DegOpGradients {
            conv1: ConvLayer::zeros(self.conv1.out_c, self.conv1.in_c),
            conv2: ConvLayer::zeros(self.conv2.out_c, self.conv2.in_c),
            conv3: ConvLayer::zeros(self.conv3.out_c, self.conv3.in_c),
            cond: AffineCond::zeros(FEATURES),
        }
    }

    /// Flattened view used by the optimizer, serialization, and audits.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.channels()));
        for layer in [&self.conv1, &self.conv2, &self.conv3] {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(&self.cond.w);
        out.extend_from_slice(&self.cond.b);
        out
    }

    pub fn set_param_vector(&mut self, params: &[f64]) {
        let mut pos = 0;
        for layer in [&mut self.conv1, &mut self.conv2, &mut self.conv3] {
            let (nw, nb) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&params[pos..pos + nw]);
            pos += nw;
            layer.b.copy_from_slice(&params[pos..pos + nb]);
            pos += nb;
        }
        let (nw, nb) = (self.cond.w.len(), self.cond.b.len());
        self.cond.w.copy_from_slice(&params[pos..pos + nw]);
        pos += nw;
        self.cond.b.copy_from_slice(&params[pos..pos + nb]);
        pos += nb;
        assert_eq!(pos, params.len());
    }
}

impl DegOpGradients {
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in [&self.conv1, &self.conv2, &self.conv3] {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(&self.cond.w);
        out.extend_from_slice(&self.cond.b);
        out
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[inline]
fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

#[inline]
fn lrelu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    s1: ScalarField,
    h1: ScalarField,
    s2: ScalarField,
    scale: Vec<f64>,
    mixed: ScalarField,
    pub output: ScalarField,
}

pub fn forward_cached(w: &DegOpWeights, x: &ScalarField, cond: (f64, f64)) -> ForwardCache {
    let s1 = w.conv1.forward(x);
    let h1 = ScalarField::new(
        s1.height,
        s1.width,
        s1.channels,
        s1.data.iter().map(|&v| lrelu(v)).collect(),
    );
    let s2 = w.conv2.forward(&h1);
    let scale = w.cond.forward(cond);
    // mixed = lrelu(s2) + scale . h1
    let mut mixed = ScalarField::new(
        s2.height,
        s2.width,
        s2.channels,
        s2.data.iter().map(|&v| lrelu(v)).collect(),
    );
    for px in 0..mixed.height * mixed.width {
        for f in 0..FEATURES {
            mixed.data[px * FEATURES + f] += scale[f] * h1.data[px * FEATURES + f];
        }
    }
    let output = w.conv3.forward(&mixed);
    ForwardCache {
        s1,
        h1,
        s2,
        scale,
        mixed,
        output,
    }
}

/// Raw (unclamped) operator output.
pub fn forward_raw(w: &DegOpWeights, x: &ScalarField, cond: (f64, f64)) -> ScalarField {
    forward_cached(w, x, cond).output
}

/// Image-level forward: clamps only at materialization.
pub fn forward_image(w: &DegOpWeights, x0_hat: &Image, cond: &GgdParams) -> Result<Image> {
    if x0_hat.channels() != w.channels() {
        return Err(Error::DimensionMismatch {
            context: "operator input channels".into(),
            a: x0_hat.channels().to_string(),
            b: w.channels().to_string(),
        });
    }
    let out = forward_raw(w, &x0_hat.as_field(), (cond.alpha, cond.sigma));
    Ok(out.into_image(x0_hat.colorspace()))
}

fn backward_inner(
    w: &DegOpWeights,
    x: &ScalarField,
    cache: &ForwardCache,
    dy: &ScalarField,
) -> (DegOpGradients, ScalarField, (f64, f64), Vec<f64>) {
    let mut grads = w.zero_gradients();
    let npix = x.height * x.width;

    // conv3
    let mut dmixed = ScalarField::zeros(x.height, x.width, FEATURES);
    w.conv3
        .backward(&cache.mixed, dy, &mut grads.conv3, &mut dmixed);

    // mixing: mixed = h2 + scale . h1
    let mut dscale = vec![0.0; FEATURES];
    let mut dh1 = ScalarField::zeros(x.height, x.width, FEATURES);
    for px in 0..npix {
        for f in 0..FEATURES {
            let g = dmixed.data[px * FEATURES + f];
            dscale[f] += g * cache.h1.data[px * FEATURES + f];
            dh1.data[px * FEATURES + f] += g * cache.scale[f];
        }
    }
    // dh2 = dmixed, through the rectifier into conv2.
    let ds2 = ScalarField::new(
        x.height,
        x.width,
        FEATURES,
        dmixed
            .data
            .iter()
            .zip(&cache.s2.data)
            .map(|(g, s)| g * lrelu_grad(*s))
            .collect(),
    );
    w.conv2
        .backward(&cache.h1, &ds2, &mut grads.conv2, &mut dh1);

    // through the first rectifier into conv1.
    let ds1 = ScalarField::new(
        x.height,
        x.width,
        FEATURES,
        dh1.data
            .iter()
            .zip(&cache.s1.data)
            .map(|(g, s)| g * lrelu_grad(*s))
            .collect(),
    );
    let mut dx = ScalarField::zeros(x.height, x.width, x.channels);
    w.conv1.backward(x, &ds1, &mut grads.conv1, &mut dx);

    // Cotangent of the conditioning pair through the affine gains.
    let mut dcond = (0.0, 0.0);
    for f in 0..FEATURES {
        grads.cond.b[f] += dscale[f];
        dcond.0 += dscale[f] * w.cond.w[f * 2];
        dcond.1 += dscale[f] * w.cond.w[f * 2 + 1];
    }
    (grads, dx, dcond, dscale)
}

/// Reverse-mode pass. Returns (weight gradients, input cotangent, cond
/// cotangent) for an upstream cotangent `dy` on the raw output.
pub fn backward_with_cond(
    w: &DegOpWeights,
    x: &ScalarField,
    cond: (f64, f64),
    cache: &ForwardCache,
    dy: &ScalarField,
) -> (DegOpGradients, ScalarField, (f64, f64)) {
    let (mut grads, dx, dcond, dscale) = backward_inner(w, x, cache, dy);
    for f in 0..FEATURES {
        grads.cond.w[f * 2] += dscale[f] * cond.0;
        grads.cond.w[f * 2 + 1] += dscale[f] * cond.1;
    }
    (grads, dx, dcond)
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Mean squared error over all elements of two fields.
pub fn mse_field(a: &ScalarField, b: &ScalarField) -> f64 {
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

fn mse_grad(a: &ScalarField, b: &ScalarField, weight: f64, out: &mut ScalarField) {
    let n = a.data.len() as f64;
    for ((g, x), y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *g += weight * 2.0 * (x - y) / n;
    }
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const PSE_SCALES: usize = 3;

fn sobel(plane: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for kr in 0..3 {
                let rr = reflect_index(r as isize + kr as isize - 1, h);
                for kc in 0..3 {
                    let cc = reflect_index(c as isize + kc as isize - 1, w);
                    acc += kernel[kr * 3 + kc] * plane[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Adjoint of [`sobel`]: scatter-adds through the reflected taps.
fn sobel_adjoint(grad: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let g = grad[r * w + c];
            if g == 0.0 {
                continue;
            }
            for kr in 0..3 {
                let rr = reflect_index(r as isize + kr as isize - 1, h);
                for kc in 0..3 {
                    let cc = reflect_index(c as isize + kc as isize - 1, w);
                    out[rr * w + cc] += g * kernel[kr * 3 + kc];
                }
            }
        }
    }
    out
}

fn avg_pool(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = 0.25
                * (plane[(2 * r) * w + 2 * c]
                    + plane[(2 * r) * w + 2 * c + 1]
                    + plane[(2 * r + 1) * w + 2 * c]
                    + plane[(2 * r + 1) * w + 2 * c + 1]);
        }
    }
    (out, oh, ow)
}

fn avg_pool_adjoint(grad: &[f64], oh: usize, ow: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..oh {
        for c in 0..ow {
            let g = 0.25 * grad[r * ow + c];
            out[(2 * r) * w + 2 * c] += g;
            out[(2 * r) * w + 2 * c + 1] += g;
            out[(2 * r + 1) * w + 2 * c] += g;
            out[(2 * r + 1) * w + 2 * c + 1] += g;
        }
    }
    out
}

fn split_planes(f: &ScalarField) -> Vec<Vec<f64>> {
    (0..f.channels)
        .map(|ch| {
            f.data
                .iter()
                .skip(ch)
                .step_by(f.channels)
                .cloned()
                .collect()
        })
        .collect()
}

/// Fixed multi-scale gradient-feature distance: sum over three dyadic scales
/// of the mean squared difference of horizontal and vertical Sobel responses.
pub fn perceptual_distance(a: &ScalarField, b: &ScalarField) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let mut total = 0.0;
    let planes_a = split_planes(a);
    let planes_b = split_planes(b);
    for (pa, pb) in planes_a.iter().zip(&planes_b) {
        let (mut xa, mut xb) = (pa.clone(), pb.clone());
        let (mut h, mut w) = (a.height, a.width);
        for _scale in 0..PSE_SCALES {
            if h < 3 || w < 3 {
                break;
            }
            let n = (h * w) as f64;
            for kernel in [&SOBEL_X, &SOBEL_Y] {
                let ga = sobel(&xa, h, w, kernel);
                let gb = sobel(&xb, h, w, kernel);
                total += ga
                    .iter()
                    .zip(&gb)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    / n;
            }
            let (na, nh, nw) = avg_pool(&xa, h, w);
            let (nb, _, _) = avg_pool(&xb, h, w);
            xa = na;
            xb = nb;
            h = nh;
            w = nw;
        }
    }
    total
}

/// Accumulates weight * d perceptual_distance / da into `out`.
pub fn perceptual_distance_grad(a: &ScalarField, b: &ScalarField, weight: f64, out: &mut ScalarField) {
    let planes_a = split_planes(a);
    let planes_b = split_planes(b);
    for ch in 0..a.channels {
        // Walk down the pyramid, caching inputs per scale.
        let mut levels: Vec<(Vec<f64>, Vec<f64>, usize, usize)> = Vec::new();
        let (mut xa, mut xb) = (planes_a[ch].clone(), planes_b[ch].clone());
        let (mut h, mut w) = (a.height, a.width);
        for _ in 0..PSE_SCALES {
            if h < 3 || w < 3 {
                break;
            }
            levels.push((xa.clone(), xb.clone(), h, w));
            let (na, nh, nw) = avg_pool(&xa, h, w);
            let (nb, _, _) = avg_pool(&xb, h, w);
            xa = na;
            xb = nb;
            h = nh;
            w = nw;
        }
        // Backward from the coarsest level.
        let mut carry: Vec<f64> = Vec::new();
        for (lvl, (la, lb, lh, lw)) in levels.iter().enumerate().rev() {
            let n = (lh * lw) as f64;
            let mut dlevel = vec![0.0; lh * lw];
            for kernel in [&SOBEL_X, &SOBEL_Y] {
                let ga = sobel(la, *lh, *lw, kernel);
                let gb = sobel(lb, *lh, *lw, kernel);
                let dg: Vec<f64> = ga
                    .iter()
                    .zip(&gb)
                    .map(|(u, v)| 2.0 * (u - v) / n)
                    .collect();
                let back = sobel_adjoint(&dg, *lh, *lw, kernel);
                for (d, s) in dlevel.iter_mut().zip(&back) {
                    *d += s;
                }
            }
            if !carry.is_empty() {
                let (ch_, cw_) = (lh / 2, lw / 2);
                let up = avg_pool_adjoint(&carry, ch_, cw_, *lh, *lw);
                for (d, s) in dlevel.iter_mut().zip(&up) {
                    *d += s;
                }
            }
            carry = dlevel;
            if lvl == 0 {
                for (px, g) in carry.iter().enumerate() {
                    out.data[px * a.channels + ch] += weight * g;
                }
            }
        }
    }
}

/// Distribution-moment matching: per-channel squared differences of mean,
/// standard deviation, and third central moment. The asymmetry term stays
/// unnormalized; the standardized version has O(1/sqrt(n)) sampling noise
/// that never settles at patch sizes.
pub fn moment_match_penalty(a: &ScalarField, b: &ScalarField) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let mut total = 0.0;
    for ch in 0..a.channels {
        let ma = channel_moments(a, ch);
        let mb = channel_moments(b, ch);
        total += (ma.mean - mb.mean).powi(2)
            + (ma.std - mb.std).powi(2)
            + (ma.m3 - mb.m3).powi(2);
    }
    total
}

struct Moments {
    mean: f64,
    std: f64,
    m2: f64,
    m3: f64,
}

fn channel_moments(f: &ScalarField, ch: usize) -> Moments {
    let n = (f.height * f.width) as f64;
    let vals = f.data.iter().skip(ch).step_by(f.channels);
    let mean = vals.clone().sum::<f64>() / n;
    let m2 = vals.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let m3 = vals.clone().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    Moments {
        mean,
        std: m2.sqrt(),
        m2,
        m3,
    }
}

pub fn moment_match_penalty_grad(a: &ScalarField, b: &ScalarField, weight: f64, out: &mut ScalarField) {
    let n = (a.height * a.width) as f64;
    for ch in 0..a.channels {
        let ma = channel_moments(a, ch);
        let mb = channel_moments(b, ch);
        let d_mean = 2.0 * (ma.mean - mb.mean);
        let d_std = 2.0 * (ma.std - mb.std);
        let d_m3 = 2.0 * (ma.m3 - mb.m3);
        let degenerate = ma.std <= 1e-12;
        for px in 0..a.height * a.width {
            let x = a.data[px * a.channels + ch];
            let xc = x - ma.mean;
            let mut g = d_mean / n;
            if !degenerate {
                // d std / dx = (x - mean) / (n std)
                g += d_std * xc / (n * ma.std);
            }
            // d m3 / dx = 3 ((x - mean)^2 - m2) / n
            g += d_m3 * 3.0 * (xc * xc - ma.m2) / n;
            out.data[px * a.channels + ch] += weight * g;
        }
    }
}

// ---------------------------------------------------------------------------
// Mixed loss and training
// ---------------------------------------------------------------------------

/// Loss evaluation: total value, per-term breakdown, weight gradients, and
/// cotangents for the operator input and the conditioning pair.
pub struct LossEval {
    pub loss: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub moments: f64,
    pub grads: DegOpGradients,
    pub input_grad: ScalarField,
    pub cond_grad: (f64, f64),
}

/// L = MSE(phi(x), target) + perceptual(phi(x), target) + moments(phi(x), target),
/// with full reverse-mode gradients.
pub fn operator_loss(
    w: &DegOpWeights,
    x0_hat: &ScalarField,
    target: &ScalarField,
    cond: (f64, f64),
) -> Result<LossEval> {
    operator_loss_targets(w, x0_hat, target, target, cond)
}

/// Same mixed loss with separate targets: MSE and the perceptual term pull
/// toward `target_rec`, the moment term toward `target_dist`.
pub fn operator_loss_targets(
    w: &DegOpWeights,
    x0_hat: &ScalarField,
    target_rec: &ScalarField,
    target_dist: &ScalarField,
    cond: (f64, f64),
) -> Result<LossEval> {
    if x0_hat.data.len() != target_rec.data.len()
        || target_rec.data.len() != target_dist.data.len()
        || x0_hat.channels != w.channels()
    {
        return Err(Error::DimensionMismatch {
            context: "operator loss shapes".into(),
            a: format!("{}x{}x{}", x0_hat.height, x0_hat.width, x0_hat.channels),
            b: format!(
                "{}x{}x{}",
                target_rec.height, target_rec.width, target_rec.channels
            ),
        });
    }
    let cache = forward_cached(w, x0_hat, cond);
    let y = &cache.output;

    let mse = mse_field(y, target_rec);
    let perceptual = perceptual_distance(y, target_rec);
    let moments = moment_match_penalty(y, target_dist);

    let mut dy = ScalarField::zeros(y.height, y.width, y.channels);
    mse_grad(y, target_rec, 1.0, &mut dy);
    perceptual_distance_grad(y, target_rec, 1.0, &mut dy);
    moment_match_penalty_grad(y, target_dist, 1.0, &mut dy);

    let (grads, input_grad, cond_grad) = backward_with_cond(w, x0_hat, cond, &cache, &dy);
    Ok(LossEval {
        loss: mse + perceptual + moments,
        mse,
        perceptual,
        moments,
        grads,
        input_grad,
        cond_grad,
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update from [`operator_loss`] gradients; returns the loss at the
/// pre-update weights.
pub fn train_step(
    w: &mut DegOpWeights,
    x0_hat: &ScalarField,
    target: &ScalarField,
    cond: (f64, f64),
    lr: f64,
) -> Result<f64> {
    train_step_targets(w, x0_hat, target, target, cond, lr)
}

/// Adam update with split reconstruction/distribution targets.
pub fn train_step_targets(
    w: &mut DegOpWeights,
    x0_hat: &ScalarField,
    target_rec: &ScalarField,
    target_dist: &ScalarField,
    cond: (f64, f64),
    lr: f64,
) -> Result<f64> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidParam {
            name: "lr",
            value: lr.to_string(),
            reason: "learning rate must be nonnegative",
        });
    }
    let eval = operator_loss_targets(w, x0_hat, target_rec, target_dist, cond)?;
    let grad = eval.grads.param_vector();
    let mut params = w.param_vector();
    w.adam.step += 1;
    let t = w.adam.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        w.adam.m[i] = ADAM_BETA1 * w.adam.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        w.adam.v[i] = ADAM_BETA2 * w.adam.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let mhat = w.adam.m[i] / bc1;
        let vhat = w.adam.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    w.set_param_vector(&params);
    Ok(eval.loss)
}

// ---------------------------------------------------------------------------
// Binary serialization (resuming, golden-gradient fixtures)
// ---------------------------------------------------------------------------

/// Layout: u32 channels, u32 features, u64 adam step, then parameters,
/// first moments, second moments as f64 LE.
pub fn write_weights(w: &DegOpWeights, mut out: impl std::io::Write) -> std::io::Result<()> {
    out.write_all(&(w.channels() as u32).to_le_bytes())?;
    out.write_all(&(FEATURES as u32).to_le_bytes())?;
    out.write_all(&w.adam.step.to_le_bytes())?;
    for v in w
        .param_vector()
        .iter()
        .chain(w.adam.m.iter())
        .chain(w.adam.v.iter())
    {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights(mut input: impl std::io::Read) -> Result<DegOpWeights> {
    let mut hdr = [0u8; 16];
    input
        .read_exact(&mut hdr)
        .map_err(|e| Error::io("operator weights header", e))?;
    let channels = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
    let features = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
    let step = u64::from_le_bytes(hdr[8..16].try_into().unwrap());
    if features != FEATURES || !(channels == 1 || channels == 3) {
        return Err(Error::MalformedBinary {
            what: "operator weights",
            reason: format!("unsupported geometry {channels}ch/{features}f"),
        });
    }
    let n = DegOpWeights::param_count(channels);
    let mut values = vec![0.0f64; 3 * n];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::io("operator weights payload", e))?;
        *v = f64::from_le_bytes(buf);
    }
    let mut w = DegOpWeights::init(channels, 0);
    w.set_param_vector(&values[..n]);
    w.adam.m.copy_from_slice(&values[n..2 * n]);
    w.adam.v.copy_from_slice(&values[2 * n..]);
    w.adam.step = step;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_field(h: usize, w: usize, ch: usize, seed: u64) -> ScalarField {
        let mut rng = Rng::new(seed);
        ScalarField::new(
            h,
            w,
            ch,
            (0..h * w * ch).map(|_| rng.uniform() * 0.8 + 0.1).collect(),
        )
    }

    #[test]
    fn zero_final_conv_zeros_output() {
        let mut w = DegOpWeights::init(3, 1);
        w.conv3.w.fill(0.0);
        w.conv3.b.fill(0.0);
        let x = random_field(8, 8, 3, 2);
        let y = forward_raw(&w, &x, (2.0, 0.5));
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_cond_map_ignores_condition() {
        let mut w = DegOpWeights::init(3, 3);
        w.cond.w.fill(0.0);
        w.cond.b.fill(0.0);
        let x = random_field(8, 8, 3, 4);
        let y1 = forward_raw(&w, &x, (2.0, 0.1));
        let y2 = forward_raw(&w, &x, (0.5, 5.0));
        assert_eq!(y1.data, y2.data);
    }

    #[test]
    fn conditioning_changes_output() {
        let w = DegOpWeights::init(3, 5);
        let x = random_field(8, 8, 3, 6);
        let y1 = forward_raw(&w, &x, (2.0, 0.1));
        let y2 = forward_raw(&w, &x, (1.0, 0.5));
        let dist: f64 = y1
            .data
            .iter()
            .zip(&y2.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn perceptual_distance_properties() {
        let a = random_field(16, 16, 3, 7);
        let b = random_field(16, 16, 3, 8);
        assert_eq!(perceptual_distance(&a, &a), 0.0);
        let ab = perceptual_distance(&a, &b);
        let ba = perceptual_distance(&b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);

        let c1 = ScalarField::new(16, 16, 3, vec![0.2; 16 * 16 * 3]);
        let c2 = ScalarField::new(16, 16, 3, vec![0.9; 16 * 16 * 3]);
        assert!(perceptual_distance(&c1, &c2).abs() < 1e-12);
    }

    #[test]
    fn moment_penalty_properties() {
        let a = random_field(16, 16, 3, 9);
        assert_eq!(moment_match_penalty(&a, &a), 0.0);

        // Mean shift of 0.2 (unclipped fields) contributes 3 * 0.04.
        let b = ScalarField::new(16, 16, 3, a.data.iter().map(|v| v + 0.2).collect());
        let got = moment_match_penalty(&a, &b);
        assert!((got - 0.12).abs() < 1e-9, "penalty {got}");

        // Same-distribution noise fields: penalty decays with size and is
        // below 1e-3 at 64x64.
        let noise_pair = |side: usize, seed: u64| {
            let mut rng = Rng::new(seed);
            let mk = |rng: &mut Rng| {
                ScalarField::new(
                    side,
                    side,
                    3,
                    (0..side * side * 3)
                        .map(|_| 0.5 + 0.1 * rng.standard_normal())
                        .collect(),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            moment_match_penalty(&a, &b)
        };
        let mut small = 0.0;
        let mut large = 0.0;
        for seed in 0..8 {
            small += noise_pair(8, 11 + seed);
            let p = noise_pair(64, 11 + seed);
            assert!(p <= 1e-3, "seed {seed} penalty {p}");
            large += p;
        }
        assert!(large < small, "no decay: {large} vs {small}");
    }

    #[test]
    fn loss_zero_at_exact_fit() {
        // Train target equals operator output: all three terms vanish and
        // the gradient norm is at the numerical floor.
        let w = DegOpWeights::init(3, 13);
        let x = random_field(12, 12, 3, 14);
        let y = forward_raw(&w, &x, (2.0, 0.3));
        let eval = operator_loss(&w, &x, &y, (2.0, 0.3)).unwrap();
        assert!(eval.loss.abs() < 1e-18);
        let gnorm: f64 = eval
            .grads
            .param_vector()
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(gnorm <= 1e-10, "grad norm {gnorm}");
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let mut w = DegOpWeights::init(3, seed);
            // Move conv3 away from its tiny init so the audit exercises
            // non-degenerate magnitudes.
            {
                let mut rng = Rng::from_parts(seed, "audit-conv3", 0);
                for v in w.conv3.w.iter_mut() {
                    *v = 0.05 * rng.standard_normal();
                }
            }
            let x = random_field(16, 16, 3, 100 + seed);
            let target = random_field(16, 16, 3, 200 + seed);
            let cond = (1.7, 0.4);
            let eval = operator_loss(&w, &x, &target, cond).unwrap();
            let analytic = eval.grads.param_vector();
            let params = w.param_vector();
            let fd_at = |i: usize, h: f64| -> f64 {
                let mut pp = params.clone();
                pp[i] += h;
                let mut wp = w.clone();
                wp.set_param_vector(&pp);
                let up = operator_loss(&wp, &x, &target, cond).unwrap().loss;
                pp[i] -= 2.0 * h;
                wp.set_param_vector(&pp);
                let dn = operator_loss(&wp, &x, &target, cond).unwrap().loss;
                (up - dn) / (2.0 * h)
            };
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            let mut max_rel: f64 = 0.0;
            for i in 0..params.len() {
                let mut err = rel(analytic[i], fd_at(i, 1e-4));
                if err > 1e-4 {
                    // Rectifier kink under the 1e-4 step; a smaller step
                    // resolves it without hitting roundoff.
                    err = rel(analytic[i], fd_at(i, 1e-5));
                }
                max_rel = max_rel.max(err);
            }
            assert!(max_rel < 1e-4, "seed {seed} max rel err {max_rel}");
        }
    }

    #[test]
    fn input_and_cond_gradients_match_finite_differences() {
        let w = DegOpWeights::init(3, 21);
        let x = random_field(12, 12, 3, 22);
        let target = random_field(12, 12, 3, 23);
        let cond = (2.2, 0.15);
        let eval = operator_loss(&w, &x, &target, cond).unwrap();
        let h = 1e-5;
        for &i in &[0usize, 55, 200, 431] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = operator_loss(&w, &xp, &target, cond).unwrap().loss;
            xp.data[i] -= 2.0 * h;
            let dn = operator_loss(&w, &xp, &target, cond).unwrap().loss;
            let fd = (up - dn) / (2.0 * h);
            let rel = (eval.input_grad.data[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "input grad {i}: {} vs {fd}", eval.input_grad.data[i]);
        }
        for (j, analytic) in [eval.cond_grad.0, eval.cond_grad.1].iter().enumerate() {
            let bump = |da: f64, ds: f64| {
                operator_loss(&w, &x, &target, (cond.0 + da, cond.1 + ds))
                    .unwrap()
                    .loss
            };
            let fd = if j == 0 {
                (bump(h, 0.0) - bump(-h, 0.0)) / (2.0 * h)
            } else {
                (bump(0.0, h) - bump(0.0, -h)) / (2.0 * h)
            };
            assert!(
                (analytic - fd).abs() < 1e-7 + 1e-4 * fd.abs(),
                "cond grad {j}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut w = DegOpWeights::init(3, 31);
        let before = w.param_vector();
        let x = random_field(8, 8, 3, 32);
        let t = random_field(8, 8, 3, 33);
        train_step(&mut w, &x, &t, (2.0, 0.2), 0.0).unwrap();
        assert_eq!(w.param_vector(), before);
        assert_eq!(w.adam.step, 1);
    }

    #[test]
    fn training_reduces_loss() {
        let mut w = DegOpWeights::init(3, 41);
        let x = random_field(16, 16, 3, 42);
        let target = random_field(16, 16, 3, 43);
        let cond = (1.5, 0.25);
        let first = operator_loss(&w, &x, &target, cond).unwrap().loss;
        let mut last = first;
        for _ in 0..200 {
            last = train_step(&mut w, &x, &target, cond, 1e-3).unwrap();
        }
        let final_loss = operator_loss(&w, &x, &target, cond).unwrap().loss;
        assert!(
            final_loss < first,
            "loss did not drop: {first} -> {final_loss} (last step {last})"
        );
        assert!(final_loss < 0.5 * first, "weak convergence: {first} -> {final_loss}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut w = DegOpWeights::init(3, 51);
            let x = random_field(8, 8, 3, 52);
            let t = random_field(8, 8, 3, 53);
            for _ in 0..5 {
                train_step(&mut w, &x, &t, (2.0, 0.4), 1e-3).unwrap();
            }
            w.param_vector()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weights_binary_round_trip() {
        let mut w = DegOpWeights::init(3, 61);
        let x = random_field(8, 8, 3, 62);
        let t = random_field(8, 8, 3, 63);
        for _ in 0..3 {
            train_step(&mut w, &x, &t, (2.0, 0.4), 1e-3).unwrap();
        }
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn image_level_forward_checks_channels() {
        let w = DegOpWeights::init(3, 71);
        let gray = Image::constant(8, 8, 1, 0.5);
        let cond = GgdParams::new(2.0, 0.5).unwrap();
        assert!(forward_image(&w, &gray, &cond).is_err());
        let rgb = Image::constant(8, 8, 3, 0.5);
        let out = forward_image(&w, &rgb, &cond).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
