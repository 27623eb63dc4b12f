//! Image containers, PPM I/O, color conversion, local statistics, and
//! full-reference metrics.
//!
//! Images are value-semantic: every operation is a pure function returning a
//! fresh image, and pixel data always lives in [0, 1] after construction.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Luminance weights for RGB -> gray reduction (ITU-R BT.601).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Stabilizer added to the local deviation in [`mscn`].
pub const MSCN_STABILIZER: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Colorspace {
    Rgb,
    Hsv,
    Gray,
}

impl std::fmt::Display for Colorspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Colorspace::Rgb => "RGB",
            Colorspace::Hsv => "HSV",
            Colorspace::Gray => "GRAY",
        };
        f.write_str(s)
    }
}

/// H x W x C image, row-major by (row, col, channel), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    colorspace: Colorspace,
    data: Vec<f64>,
}

/// Unconstrained H x W (x C) real field; carrier for intermediate values that
/// may leave [0, 1] (MSCN coefficients, raw decoded pixels, operator outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        ScalarField {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ScalarField {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    /// Clamps to [0, 1] and materializes an image.
    pub fn into_image(self, colorspace: Colorspace) -> Image {
        Image::new(self.height, self.width, self.channels, self.data, colorspace)
            .expect("field dimensions are consistent by construction")
    }
}

impl Image {
    /// Builds an image, clamping every element into [0, 1]. Non-finite data
    /// is rejected rather than clamped.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
        colorspace: Colorspace,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParam {
                name: "dimensions",
                value: format!("{height}x{width}"),
                reason: "height and width must be positive",
            });
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParam {
                name: "channels",
                value: channels.to_string(),
                reason: "must be 1 or 3",
            });
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                context: "image buffer length".into(),
                a: data.len().to_string(),
                b: (height * width * channels).to_string(),
            });
        }
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::DegenerateInput("non-finite pixel value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            colorspace,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        let cs = if channels == 1 {
            Colorspace::Gray
        } else {
            Colorspace::Rgb
        };
        Image::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
            cs,
        )
        .expect("constant image construction")
    }

    pub fn from_fn<F>(height: usize, width: usize, channels: usize, cs: Colorspace, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Image::new(height, width, channels, data, cs).expect("from_fn construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    pub fn as_field(&self) -> ScalarField {
        ScalarField {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.clone(),
        }
    }

    /// Single-channel luminance plane; grayscale images pass through.
    pub fn luminance(&self) -> Result<ScalarField> {
        match self.colorspace {
            Colorspace::Gray => Ok(ScalarField {
                height: self.height,
                width: self.width,
                channels: 1,
                data: self.data.clone(),
            }),
            Colorspace::Rgb => {
                let mut out = Vec::with_capacity(self.height * self.width);
                for px in self.data.chunks_exact(3) {
                    out.push(
                        LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2],
                    );
                }
                Ok(ScalarField {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data: out,
                })
            }
            Colorspace::Hsv => Err(Error::ColorspaceMismatch {
                expected: "RGB or GRAY".into(),
                got: "HSV".into(),
            }),
        }
    }
}

/// Density-normalized histogram over [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Bin-width weighted density mass; 1 within 1e-9 for any input.
    pub fn total_mass(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    /// CSV with columns `bin_lo,bin_hi,density`, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,density\n");
        for (d, e) in self.densities.iter().zip(self.bin_edges.windows(2)) {
            out.push_str(&format!("{},{},{}\n", e[0], e[1], d));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// PPM I/O (P6 binary RGB, P5 binary gray, maxval 255)
// ---------------------------------------------------------------------------

/// Loads an 8-bit binary PPM (P6) or PGM (P5). Values map as v = byte / 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes)
}

/// Saves as binary P6 (RGB) or P5 (gray), maxval 255, with rounding.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let magic = match (img.colorspace, img.channels) {
        (Colorspace::Rgb, 3) => "P6",
        (Colorspace::Gray, 1) => "P5",
        _ => {
            return Err(Error::ColorspaceMismatch {
                expected: "RGB (3ch) or GRAY (1ch)".into(),
                got: format!("{} ({}ch)", img.colorspace, img.channels),
            })
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::PpmMalformedHeader {
            reason: "file shorter than magic number".into(),
        });
    }
    let magic = &bytes[..2];
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::PpmUnsupportedMagic {
                found: String::from_utf8_lossy(magic).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_header_int(bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::PpmMalformedHeader {
            reason: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::PpmMalformedHeader {
            reason: "zero width or height".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::PpmMalformedHeader {
                reason: "missing whitespace before payload".into(),
            })
        }
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f64> = payload[..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let cs = if channels == 3 {
        Colorspace::Rgb
    } else {
        Colorspace::Gray
    };
    Image::new(height, width, channels, data, cs)
}

fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if start == *pos {
        return Err(Error::PpmMalformedHeader {
            reason: "expected an integer header field".into(),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::PpmMalformedHeader {
            reason: "unparsable integer header field".into(),
        })
}

// ---------------------------------------------------------------------------
// Color conversion
// ---------------------------------------------------------------------------

/// RGB -> HSV with H scaled to [0, 1) (degrees / 360), S and V in [0, 1].
pub fn rgb_to_hsv(img: &Image) -> Result<Image> {
    if img.colorspace != Colorspace::Rgb || img.channels != 3 {
        return Err(Error::ColorspaceMismatch {
            expected: "RGB".into(),
            got: img.colorspace.to_string(),
        });
    }
    let mut out = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let mx = r.max(g).max(b);
        let mn = r.min(g).min(b);
        let d = mx - mn;
        let v = mx;
        let s = if mx > 0.0 { d / mx } else { 0.0 };
        let h = if d == 0.0 {
            0.0
        } else if mx == r {
            let mut h = (g - b) / d / 6.0;
            if h < 0.0 {
                h += 1.0;
            }
            h
        } else if mx == g {
            ((b - r) / d + 2.0) / 6.0
        } else {
            ((r - g) / d + 4.0) / 6.0
        };
        // Guard the wrap: h may round to exactly 1.0.
        let h = if h >= 1.0 { 0.0 } else { h };
        out.extend_from_slice(&[h, s, v]);
    }
    Image::new(img.height, img.width, 3, out, Colorspace::Hsv)
}

/// HSV -> RGB; inverse of [`rgb_to_hsv`] within 1e-6.
pub fn hsv_to_rgb(img: &Image) -> Result<Image> {
    if img.colorspace != Colorspace::Hsv || img.channels != 3 {
        return Err(Error::ColorspaceMismatch {
            expected: "HSV".into(),
            got: img.colorspace.to_string(),
        });
    }
    let mut out = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (h, s, v) = (px[0], px[1], px[2]);
        let h6 = (h * 6.0).rem_euclid(6.0);
        let sector = (h6.floor() as usize).min(5);
        let f = h6 - sector as f64;
        let p = v * (1.0 - s);
        let q = v * (1.0 - f * s);
        let t = v * (1.0 - (1.0 - f) * s);
        let (r, g, b) = match sector {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        out.extend_from_slice(&[r, g, b]);
    }
    Image::new(img.height, img.width, 3, out, Colorspace::Rgb)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// PSNR cap reported for (near-)identical images so reports stay finite.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            context: "mse operands".into(),
            a: format!("{}x{}x{}", a.height, a.width, a.channels),
            b: format!("{}x{}x{}", b.height, b.width, b.channels),
        });
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// 10 log10(1 / MSE) in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1). Channels are averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            context: "ssim operands".into(),
            a: format!("{}x{}x{}", a.height, a.width, a.channels),
            b: format!("{}x{}x{}", b.height, b.width, b.channels),
        });
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            h: a.height,
            w: a.width,
            min: SSIM_WINDOW,
        });
    }
    let k1d = gaussian_kernel(SSIM_WINDOW / 2, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for r0 in 0..=(a.height - SSIM_WINDOW) {
            for c0 in 0..=(a.width - SSIM_WINDOW) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dr, wr) in k1d.iter().enumerate() {
                    for (dc, wc) in k1d.iter().enumerate() {
                        let w = wr * wc;
                        let x = a.at(r0 + dr, c0 + dc, ch);
                        let y = b.at(r0 + dr, c0 + dc, ch);
                        ma += w * x;
                        mb += w * y;
                        maa += w * x * x;
                        mbb += w * y * y;
                        mab += w * x * y;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Local statistics
// ---------------------------------------------------------------------------

/// Normalized 1-D Gaussian taps for a window of half-width `radius`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Symmetric (half-sample) boundary reflection used by every windowed
/// operation in the crate.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable convolution of a single-channel plane with reflected borders.
pub fn convolve_separable(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let cc = reflect_index(c as isize + k as isize - radius as isize, w);
                acc += kv * data[r * w + cc];
            }
            rows[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let rr = reflect_index(r as isize + k as isize - radius as isize, h);
                acc += kv * rows[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients of the luminance plane:
/// (I - mu) / (s + 1e-3) with 7x7 Gaussian local moments (sigma 7/6).
pub fn mscn(img: &Image) -> Result<ScalarField> {
    let luma = img.luminance()?;
    Ok(mscn_plane(&luma))
}

/// MSCN on an arbitrary single-channel plane.
pub fn mscn_plane(plane: &ScalarField) -> ScalarField {
    assert_eq!(plane.channels, 1, "mscn operates on a single plane");
    let (h, w) = (plane.height, plane.width);
    let kernel = gaussian_kernel(3, 7.0 / 6.0);
    let mu = convolve_separable(&plane.data, h, w, &kernel);
    let sq: Vec<f64> = plane.data.iter().map(|v| v * v).collect();
    let musq = convolve_separable(&sq, h, w, &kernel);
    let data = plane
        .data
        .iter()
        .zip(mu.iter().zip(&musq))
        .map(|(&x, (&m, &m2))| {
            let var = (m2 - m * m).max(0.0);
            (x - m) / (var.sqrt() + MSCN_STABILIZER)
        })
        .collect();
    ScalarField {
        height: h,
        width: w,
        channels: 1,
        data,
    }
}

/// Arithmetic mean of each channel.
pub fn channel_means(img: &Image) -> Vec<f64> {
    let mut sums = vec![0.0; img.channels];
    for px in img.data.chunks_exact(img.channels) {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    let n = (img.height * img.width) as f64;
    sums.iter().map(|s| s / n).collect()
}

/// Density-normalized histogram of all pixel values over [0, 1].
pub fn pixel_histogram(img: &Image, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidParam {
            name: "bins",
            value: bins.to_string(),
            reason: "need at least 2 bins",
        });
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &img.data {
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = img.data.len() as f64;
    let width = 1.0 / bins as f64;
    let densities = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    Ok(Histogram {
        bin_edges: edges,
        densities,
    })
}
