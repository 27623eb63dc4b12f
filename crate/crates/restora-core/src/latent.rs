//! Exactly invertible latent codec: per-channel 8x8 orthonormal DCT-II
//! blocks, plus GGD statistics of the resulting coefficients.
//!
//! The transform is linear and orthonormal, so decoding is exact, energy is
//! preserved, and guidance gradients flow through encode/decode without
//! approximation. Images whose dimensions are not multiples of the block
//! size are reflect-padded; statistics are pooled only over blocks fully
//! inside the original region.

use crate::error::{Error, Result};
use crate::ggd::{self, GgdFit};
use crate::imgproc::{reflect_index, Colorspace, Image, ScalarField};

pub const DEFAULT_BLOCK: usize = 8;

/// Latent coefficients pixel-aligned with the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub orig_height: usize,
    pub orig_width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub channels: usize,
    pub block: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same geometry, new coefficient payload.
    pub fn with_data(&self, data: Vec<f64>) -> LatentTensor {
        assert_eq!(data.len(), self.data.len());
        LatentTensor {
            data,
            ..self.clone()
        }
    }

    pub fn zeros_like(&self) -> LatentTensor {
        self.with_data(vec![0.0; self.data.len()])
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[inline]
    fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.padded_width + c) * self.channels + ch
    }
}

/// Orthonormal DCT-II basis: basis[u * n + i] = c(u) cos(pi (2i+1) u / 2n).
fn dct_basis(n: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for u in 0..n {
        for i in 0..n {
            let c = if u == 0 { norm0 } else { norm };
            basis[u * n + i] =
                c * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    basis
}

fn pad_to(n: usize, block: usize) -> usize {
    n.div_ceil(block) * block
}

/// Forward transform of an unconstrained pixel field.
pub fn encode_field(field: &ScalarField, block: usize) -> LatentTensor {
    assert!(block >= 1);
    let (h, w, ch) = (field.height, field.width, field.channels);
    let (ph, pw) = (pad_to(h, block), pad_to(w, block));
    let basis = dct_basis(block);

    // Reflect-pad the source.
    let mut padded = vec![0.0; ph * pw * ch];
    for r in 0..ph {
        let sr = reflect_index(r as isize, h);
        for c in 0..pw {
            let sc = reflect_index(c as isize, w);
            for k in 0..ch {
                padded[(r * pw + c) * ch + k] = field.data[(sr * w + sc) * ch + k];
            }
        }
    }

    let mut out = vec![0.0; ph * pw * ch];
    let mut tile = vec![0.0; block * block];
    let mut tmp = vec![0.0; block * block];
    for k in 0..ch {
        for br in (0..ph).step_by(block) {
            for bc in (0..pw).step_by(block) {
                for i in 0..block {
                    for j in 0..block {
                        tile[i * block + j] = padded[((br + i) * pw + (bc + j)) * ch + k];
                    }
                }
                forward_block(&basis, &tile, &mut tmp, block);
                for i in 0..block {
                    for j in 0..block {
                        out[((br + i) * pw + (bc + j)) * ch + k] = tmp[i * block + j];
                    }
                }
            }
        }
    }
    LatentTensor {
        orig_height: h,
        orig_width: w,
        padded_height: ph,
        padded_width: pw,
        channels: ch,
        block,
        data: out,
    }
}

/// tmp = B tile B^T
fn forward_block(basis: &[f64], tile: &[f64], tmp: &mut [f64], n: usize) {
    let mut mid = vec![0.0; n * n];
    for u in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += basis[u * n + i] * tile[i * n + j];
            }
            mid[u * n + j] = acc;
        }
    }
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += mid[u * n + j] * basis[v * n + j];
            }
            tmp[u * n + v] = acc;
        }
    }
}

/// tmp = B^T tile B (inverse of [`forward_block`])
fn inverse_block(basis: &[f64], tile: &[f64], tmp: &mut [f64], n: usize) {
    let mut mid = vec![0.0; n * n];
    for i in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for u in 0..n {
                acc += basis[u * n + i] * tile[u * n + v];
            }
            mid[i * n + v] = acc;
        }
    }
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for v in 0..n {
                acc += mid[i * n + v] * basis[v * n + j];
            }
            tmp[i * n + j] = acc;
        }
    }
}

/// Encodes an image with the default 8x8 block.
pub fn encode(img: &Image) -> LatentTensor {
    encode_field(&img.as_field(), DEFAULT_BLOCK)
}

/// Inverse transform without clamping; values may leave [0, 1] and that is
/// intentional inside the sampling loop.
pub fn decode_field(z: &LatentTensor) -> ScalarField {
    let basis = dct_basis(z.block);
    let (ph, pw, ch) = (z.padded_height, z.padded_width, z.channels);
    let mut pixels = vec![0.0; ph * pw * ch];
    let mut tile = vec![0.0; z.block * z.block];
    let mut tmp = vec![0.0; z.block * z.block];
    for k in 0..ch {
        for br in (0..ph).step_by(z.block) {
            for bc in (0..pw).step_by(z.block) {
                for i in 0..z.block {
                    for j in 0..z.block {
                        tile[i * z.block + j] = z.data[z.idx(br + i, bc + j, k)];
                    }
                }
                inverse_block(&basis, &tile, &mut tmp, z.block);
                for i in 0..z.block {
                    for j in 0..z.block {
                        pixels[((br + i) * pw + (bc + j)) * ch + k] = tmp[i * z.block + j];
                    }
                }
            }
        }
    }
    // Crop padding.
    let mut out = vec![0.0; z.orig_height * z.orig_width * ch];
    for r in 0..z.orig_height {
        for c in 0..z.orig_width {
            for k in 0..ch {
                out[(r * z.orig_width + c) * ch + k] = pixels[(r * pw + c) * ch + k];
            }
        }
    }
    ScalarField::new(z.orig_height, z.orig_width, ch, out)
}

/// Decodes and materializes an image, clamping to [0, 1]. Use only at final
/// output, never inside the sampling loop.
pub fn decode(z: &LatentTensor) -> Image {
    let field = decode_field(z);
    let cs = if z.channels == 1 {
        Colorspace::Gray
    } else {
        Colorspace::Rgb
    };
    field.into_image(cs)
}

/// Adjoint of [`decode_field`]: zero-embeds a pixel-domain cotangent into the
/// padded grid and applies the forward transform. Equal to [`encode_field`]
/// when no padding is present.
pub fn decode_field_adjoint(cotangent: &ScalarField, like: &LatentTensor) -> LatentTensor {
    assert_eq!(cotangent.height, like.orig_height);
    assert_eq!(cotangent.width, like.orig_width);
    assert_eq!(cotangent.channels, like.channels);
    let (ph, pw, ch) = (like.padded_height, like.padded_width, like.channels);
    let basis = dct_basis(like.block);
    let mut padded = vec![0.0; ph * pw * ch];
    for r in 0..like.orig_height {
        for c in 0..like.orig_width {
            for k in 0..ch {
                padded[(r * pw + c) * ch + k] = cotangent.data[(r * cotangent.width + c) * ch + k];
            }
        }
    }
    let mut out = vec![0.0; ph * pw * ch];
    let mut tile = vec![0.0; like.block * like.block];
    let mut tmp = vec![0.0; like.block * like.block];
    for k in 0..ch {
        for br in (0..ph).step_by(like.block) {
            for bc in (0..pw).step_by(like.block) {
                for i in 0..like.block {
                    for j in 0..like.block {
                        tile[i * like.block + j] = padded[((br + i) * pw + (bc + j)) * ch + k];
                    }
                }
                forward_block(&basis, &tile, &mut tmp, like.block);
                for i in 0..like.block {
                    for j in 0..like.block {
                        out[((br + i) * pw + (bc + j)) * ch + k] = tmp[i * like.block + j];
                    }
                }
            }
        }
    }
    like.with_data(out)
}

/// Adjoint of [`encode_field`]: inverse-transforms a latent cotangent and
/// scatter-adds padded positions back onto their reflected sources.
pub fn encode_field_adjoint(cotangent: &LatentTensor) -> ScalarField {
    let basis = dct_basis(cotangent.block);
    let (ph, pw, ch) = (
        cotangent.padded_height,
        cotangent.padded_width,
        cotangent.channels,
    );
    let n = cotangent.block;
    let mut pixels = vec![0.0; ph * pw * ch];
    let mut tile = vec![0.0; n * n];
    let mut tmp = vec![0.0; n * n];
    for k in 0..ch {
        for br in (0..ph).step_by(n) {
            for bc in (0..pw).step_by(n) {
                for i in 0..n {
                    for j in 0..n {
                        tile[i * n + j] = cotangent.data[cotangent.idx(br + i, bc + j, k)];
                    }
                }
                inverse_block(&basis, &tile, &mut tmp, n);
                for i in 0..n {
                    for j in 0..n {
                        pixels[((br + i) * pw + (bc + j)) * ch + k] = tmp[i * n + j];
                    }
                }
            }
        }
    }
    let (h, w) = (cotangent.orig_height, cotangent.orig_width);
    let mut out = vec![0.0; h * w * ch];
    for r in 0..ph {
        let sr = reflect_index(r as isize, h);
        for c in 0..pw {
            let sc = reflect_index(c as isize, w);
            for k in 0..ch {
                out[(sr * w + sc) * ch + k] += pixels[(r * pw + c) * ch + k];
            }
        }
    }
    ScalarField::new(h, w, ch, out)
}

/// Indices of coefficients eligible for statistics: blocks fully inside the
/// original region, optionally without each block's DC coefficient.
pub fn stats_indices(z: &LatentTensor, exclude_dc: bool) -> Vec<usize> {
    let mut idx = Vec::new();
    for br in (0..z.padded_height).step_by(z.block) {
        if br + z.block > z.orig_height {
            continue;
        }
        for bc in (0..z.padded_width).step_by(z.block) {
            if bc + z.block > z.orig_width {
                continue;
            }
            for i in 0..z.block {
                for j in 0..z.block {
                    if exclude_dc && i == 0 && j == 0 {
                        continue;
                    }
                    for k in 0..z.channels {
                        idx.push(z.idx(br + i, bc + j, k));
                    }
                }
            }
        }
    }
    idx
}

/// GGD fit over coefficients pooled across channels.
pub fn latent_stats(z: &LatentTensor, exclude_dc: bool) -> Result<GgdFit> {
    let idx = stats_indices(z, exclude_dc);
    if idx.len() < 64 {
        return Err(Error::DegenerateInput(format!(
            "latent_stats needs at least 64 coefficients, got {}",
            idx.len()
        )));
    }
    let samples: Vec<f64> = idx.iter().map(|&i| z.data[i]).collect();
    ggd::ggd_fit(&samples)
}

/// Per-channel GGD fits (same coefficient selection as [`latent_stats`]).
pub fn latent_stats_per_channel(z: &LatentTensor, exclude_dc: bool) -> Result<Vec<GgdFit>> {
    let idx = stats_indices(z, exclude_dc);
    let mut fits = Vec::with_capacity(z.channels);
    for k in 0..z.channels {
        let samples: Vec<f64> = idx
            .iter()
            .filter(|&&i| i % z.channels == k)
            .map(|&i| z.data[i])
            .collect();
        if samples.len() < 64 {
            return Err(Error::DegenerateInput(
                "too few per-channel coefficients".into(),
            ));
        }
        fits.push(ggd::ggd_fit(&samples)?);
    }
    Ok(fits)
}

// ---------------------------------------------------------------------------
// Flat binary export (debugging aid)
// ---------------------------------------------------------------------------

/// Little-endian header (orig_h, orig_w, channels, block as u32) followed by
/// the padded coefficients as f32.
pub fn write_binary(z: &LatentTensor, mut w: impl std::io::Write) -> std::io::Result<()> {
    for v in [
        z.orig_height as u32,
        z.orig_width as u32,
        z.channels as u32,
        z.block as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &z.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(mut r: impl std::io::Read) -> Result<LatentTensor> {
    let mut hdr = [0u8; 16];
    r.read_exact(&mut hdr)
        .map_err(|e| Error::io("latent binary header", e))?;
    let mut fields = [0u32; 4];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(hdr[i * 4..i * 4 + 4].try_into().unwrap());
    }
    let (h, w, ch, block) = (
        fields[0] as usize,
        fields[1] as usize,
        fields[2] as usize,
        fields[3] as usize,
    );
    if block == 0 || h == 0 || w == 0 || ch == 0 {
        return Err(Error::MalformedBinary {
            what: "latent tensor",
            reason: "zero field in header".into(),
        });
    }
    let (ph, pw) = (pad_to(h, block), pad_to(w, block));
    let mut data = vec![0.0f64; ph * pw * ch];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|e| Error::io("latent binary payload", e))?;
        *v = f32::from_le_bytes(buf) as f64;
    }
    Ok(LatentTensor {
        orig_height: h,
        orig_width: w,
        padded_height: ph,
        padded_width: pw,
        channels: ch,
        block,
        data,
    })
}
