//! Test-time distribution-shift generators with five severity levels.
//!
//! Two corruptions (Gaussian noise, Gaussian blur) are reserved for sigma
//! training; the other ten are held out for evaluation, keeping train and
//! test shifts fully separate. Severity parameters live in a versioned TOML
//! table ([`SeverityTable`]); the built-in defaults follow common published
//! benchmark values adapted to `[0,1]` desk-scale images.
//!
//! `corrupt` is pure: the output is a bitwise-reproducible function of
//! `(id, severity, seed)` and the input image. Severity 0 is the identity
//! convention used for clean evaluation cells.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionId {
    GaussianNoise,
    GaussianBlur,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    DefocusBlur,
    GlassBlur,
    Pixelate,
    JpegLike,
    Brightness,
    Contrast,
    Saturate,
}

impl CorruptionId {
    pub const ALL: [CorruptionId; 12] = [
        CorruptionId::GaussianNoise,
        CorruptionId::GaussianBlur,
        CorruptionId::ShotNoise,
        CorruptionId::ImpulseNoise,
        CorruptionId::SpeckleNoise,
        CorruptionId::DefocusBlur,
        CorruptionId::GlassBlur,
        CorruptionId::Pixelate,
        CorruptionId::JpegLike,
        CorruptionId::Brightness,
        CorruptionId::Contrast,
        CorruptionId::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionId::GaussianNoise => "gaussian_noise",
            CorruptionId::GaussianBlur => "gaussian_blur",
            CorruptionId::ShotNoise => "shot_noise",
            CorruptionId::ImpulseNoise => "impulse_noise",
            CorruptionId::SpeckleNoise => "speckle_noise",
            CorruptionId::DefocusBlur => "defocus_blur",
            CorruptionId::GlassBlur => "glass_blur",
            CorruptionId::Pixelate => "pixelate",
            CorruptionId::JpegLike => "jpeg_like",
            CorruptionId::Brightness => "brightness",
            CorruptionId::Contrast => "contrast",
            CorruptionId::Saturate => "saturate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CorruptionId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption `{s}`")))
    }

    /// Reserved for sigma training, never evaluated on.
    pub fn train_only(self) -> bool {
        matches!(self, CorruptionId::GaussianNoise | CorruptionId::GaussianBlur)
    }
}

impl std::fmt::Display for CorruptionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Partition ids into (sigma-training set, evaluation set).
pub fn split(ids: &[CorruptionId]) -> (Vec<CorruptionId>, Vec<CorruptionId>) {
    let st = ids.iter().copied().filter(|c| c.train_only()).collect();
    let eval = ids.iter().copied().filter(|c| !c.train_only()).collect();
    (st, eval)
}

/// One test-time shift: corruption, severity 0..=5 (0 = identity), seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub id: CorruptionId,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(id: CorruptionId, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::invalid(format!(
                "severity must be 0..=5, got {severity}"
            )));
        }
        Ok(CorruptionSpec { id, severity, seed })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlassBlurParams {
    pub sigma: [f32; 5],
    pub max_delta: [u8; 5],
    pub iterations: [u8; 5],
}

macro_rules! one_field_params {
    ($name:ident, $field:ident, $ty:ty) => {
        #[derive(Debug, Clone, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            pub $field: [$ty; 5],
        }
    };
}

one_field_params!(StdParams, std, f32);
one_field_params!(SigmaParams, sigma, f32);
one_field_params!(PhotonParams, photons, f32);
one_field_params!(AmountParams, amount, f32);
one_field_params!(RadiusParams, radius, f32);
one_field_params!(FractionParams, fraction, f32);
one_field_params!(QualityParams, quality, u8);
one_field_params!(OffsetParams, offset, f32);
one_field_params!(FactorParams, factor, f32);

/// Per-corruption severity parameters, schema-versioned.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub schema_version: u32,
    pub gaussian_noise: StdParams,
    pub gaussian_blur: SigmaParams,
    pub shot_noise: PhotonParams,
    pub impulse_noise: AmountParams,
    pub speckle_noise: StdParams,
    pub defocus_blur: RadiusParams,
    pub glass_blur: GlassBlurParams,
    pub pixelate: FractionParams,
    pub jpeg_like: QualityParams,
    pub brightness: OffsetParams,
    pub contrast: FactorParams,
    pub saturate: FactorParams,
}

impl SeverityTable {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: SeverityTable =
            toml::from_str(text).map_err(|e| Error::config(format!("severity table: {e}")))?;
        if table.schema_version != 1 {
            return Err(Error::config(format!(
                "unsupported severity table schema {}",
                table.schema_version
            )));
        }
        table.validate()?;
        Ok(table)
    }

    /// Parameter monotonicity: distortion strength must not decrease with
    /// severity.
    fn validate(&self) -> Result<()> {
        fn rising(name: &str, v: &[f32; 5]) -> Result<()> {
            if v.windows(2).all(|w| w[1] >= w[0]) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be non-decreasing")))
            }
        }
        fn falling(name: &str, v: &[f32; 5]) -> Result<()> {
            if v.windows(2).all(|w| w[1] <= w[0]) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be non-increasing")))
            }
        }
        rising("gaussian_noise.std", &self.gaussian_noise.std)?;
        rising("gaussian_blur.sigma", &self.gaussian_blur.sigma)?;
        falling("shot_noise.photons", &self.shot_noise.photons)?;
        rising("impulse_noise.amount", &self.impulse_noise.amount)?;
        rising("speckle_noise.std", &self.speckle_noise.std)?;
        rising("defocus_blur.radius", &self.defocus_blur.radius)?;
        rising("glass_blur.sigma", &self.glass_blur.sigma)?;
        falling("pixelate.fraction", &self.pixelate.fraction)?;
        let q: [f32; 5] = self.jpeg_like.quality.map(f32::from);
        falling("jpeg_like.quality", &q)?;
        rising("brightness.offset", &self.brightness.offset)?;
        falling("contrast.factor", &self.contrast.factor)?;
        let s: [f32; 5] = self.saturate.factor.map(|f| (f - 1.0).abs());
        rising("saturate.factor distance from 1", &s)?;
        Ok(())
    }
}

pub const DEFAULT_TABLE_TOML: &str = include_str!("../data/severity_tables.toml");

pub fn default_table() -> &'static SeverityTable {
    static TABLE: OnceLock<SeverityTable> = OnceLock::new();
    TABLE.get_or_init(|| SeverityTable::from_toml(DEFAULT_TABLE_TOML).expect("built-in table"))
}

/// Apply a corruption with the default severity table.
pub fn corrupt(spec: &CorruptionSpec, rgb: &Tensor) -> Result<Tensor> {
    corrupt_with(default_table(), spec, rgb)
}

/// Apply a corruption. Severity 0 returns the input bitwise unchanged.
pub fn corrupt_with(table: &SeverityTable, spec: &CorruptionSpec, rgb: &Tensor) -> Result<Tensor> {
    if spec.severity > 5 {
        return Err(Error::invalid(format!(
            "severity must be 0..=5, got {}",
            spec.severity
        )));
    }
    let (_, c, _, _) = rgb.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!(
            "corruptions take 3-channel images, got {c}"
        )));
    }
    if spec.severity == 0 {
        return Ok(rgb.clone());
    }
    let s = (spec.severity - 1) as usize;
    let mut rng = stream(
        spec.seed,
        &format!("corrupt/{}/{}", spec.id.name(), spec.severity),
    );
    let mut out = rgb.clone();
    match spec.id {
        CorruptionId::GaussianNoise => {
            let std = table.gaussian_noise.std[s];
            for v in out.data_mut() {
                *v = (*v + std * normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        CorruptionId::GaussianBlur => {
            out = gaussian_blur(&out, table.gaussian_blur.sigma[s])?;
            clamp01(&mut out);
        }
        CorruptionId::ShotNoise => {
            let photons = f64::from(table.shot_noise.photons[s]);
            for v in out.data_mut() {
                let lambda = f64::from(*v) * photons;
                *v = ((poisson(&mut rng, lambda) / photons) as f32).clamp(0.0, 1.0);
            }
        }
        CorruptionId::ImpulseNoise => {
            let amount = table.impulse_noise.amount[s];
            out = impulse(&out, amount, &mut rng)?;
        }
        CorruptionId::SpeckleNoise => {
            let std = table.speckle_noise.std[s];
            for v in out.data_mut() {
                *v = (*v + *v * std * normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        CorruptionId::DefocusBlur => {
            out = disk_blur(&out, table.defocus_blur.radius[s])?;
            clamp01(&mut out);
        }
        CorruptionId::GlassBlur => {
            let p = &table.glass_blur;
            out = glass(&out, p.max_delta[s] as i64, p.iterations[s] as usize, &mut rng)?;
            out = gaussian_blur(&out, p.sigma[s])?;
            clamp01(&mut out);
        }
        CorruptionId::Pixelate => {
            out = pixelate(&out, table.pixelate.fraction[s])?;
        }
        CorruptionId::JpegLike => {
            out = jpeg_like(&out, table.jpeg_like.quality[s])?;
        }
        CorruptionId::Brightness => {
            let offset = table.brightness.offset[s];
            for v in out.data_mut() {
                *v = (*v + offset).clamp(0.0, 1.0);
            }
        }
        CorruptionId::Contrast => {
            let factor = table.contrast.factor[s];
            out = contrast(&out, factor)?;
        }
        CorruptionId::Saturate => {
            let factor = table.saturate.factor[s];
            out = saturate(&out, factor)?;
        }
    }
    Ok(out)
}

fn clamp01(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Standard normal via Box-Muller on the given stream.
fn normal(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Knuth's product method; severity tables keep lambda modest.
fn poisson(rng: &mut impl Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let limit = (-lambda).exp();
    let mut count = 0u64;
    let mut product: f64 = rng.gen_range(0.0..1.0);
    while product > limit {
        count += 1;
        product *= rng.gen_range(0.0..1.0f64);
    }
    count as f64
}

/// Separable Gaussian blur with edge replication, truncated at 2 sigma.
fn gaussian_blur(rgb: &Tensor, sigma: f32) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4()?;
    let radius = (2.0 * f64::from(sigma)).ceil() as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0f64;
    for d in -radius..=radius {
        let wv = (-(d * d) as f64 / (2.0 * f64::from(sigma) * f64::from(sigma))).exp();
        weights.push(wv);
        total += wv;
    }
    let weights: Vec<f32> = weights.into_iter().map(|wv| (wv / total) as f32).collect();
    let mut horiz = vec![0.0f32; rgb.numel()];
    let data = rgb.data();
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut horiz[plane * h * w..(plane + 1) * h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0f32;
                for (i, &wv) in weights.iter().enumerate() {
                    let xs = (x + i as i64 - radius).clamp(0, w as i64 - 1);
                    acc += wv * src[(y * w as i64 + xs) as usize];
                }
                dst[(y * w as i64 + x) as usize] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; rgb.numel()];
    for plane in 0..n * c {
        let src = &horiz[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0f32;
                for (i, &wv) in weights.iter().enumerate() {
                    let ys = (y + i as i64 - radius).clamp(0, h as i64 - 1);
                    acc += wv * src[(ys * w as i64 + x) as usize];
                }
                dst[(y * w as i64 + x) as usize] = acc;
            }
        }
    }
    Tensor::new(rgb.shape().to_vec(), out)
}

/// Salt-and-pepper: each pixel (all channels jointly) flips to 0 or 1.
fn impulse(rgb: &Tensor, amount: f32, rng: &mut impl Rng) -> Result<Tensor> {
    let (n, _, h, w) = rgb.dims4()?;
    let mut out = rgb.clone();
    let plane = h * w;
    for ni in 0..n {
        for p in 0..plane {
            if rng.gen_range(0.0f32..1.0) < amount {
                let value = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                for ci in 0..3 {
                    out.data_mut()[(ni * 3 + ci) * plane + p] = value;
                }
            }
        }
    }
    Ok(out)
}

/// Normalized disk kernel, antialiased by 4x4 subsampling per cell.
fn disk_blur(rgb: &Tensor, radius: f32) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4()?;
    let r = radius.ceil() as i64;
    let size = (2 * r + 1) as usize;
    let mut kernel = vec![0.0f64; size * size];
    let mut total = 0.0f64;
    for ky in 0..size {
        for kx in 0..size {
            let mut cover = 0.0f64;
            for sy in 0..4 {
                for sx in 0..4 {
                    let dy = ky as f64 - r as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    let dx = kx as f64 - r as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    if dy * dy + dx * dx <= f64::from(radius) * f64::from(radius) {
                        cover += 1.0;
                    }
                }
            }
            kernel[ky * size + kx] = cover / 16.0;
            total += cover / 16.0;
        }
    }
    let kernel: Vec<f32> = kernel.into_iter().map(|k| (k / total) as f32).collect();
    let mut out = vec![0.0f32; rgb.numel()];
    for plane in 0..n * c {
        let src = &rgb.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0f32;
                for ky in 0..size as i64 {
                    for kx in 0..size as i64 {
                        let ys = (y + ky - r).clamp(0, h as i64 - 1);
                        let xs = (x + kx - r).clamp(0, w as i64 - 1);
                        acc += kernel[(ky * size as i64 + kx) as usize]
                            * src[(ys * w as i64 + xs) as usize];
                    }
                }
                dst[(y * w as i64 + x) as usize] = acc;
            }
        }
    }
    Tensor::new(rgb.shape().to_vec(), out)
}

/// Seeded local pixel shuffling (all channels move together).
fn glass(rgb: &Tensor, max_delta: i64, iterations: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (n, _, h, w) = rgb.dims4()?;
    let mut out = rgb.clone();
    let plane = h * w;
    for _ in 0..iterations {
        for ni in 0..n {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let dy = rng.gen_range(-max_delta..=max_delta);
                    let dx = rng.gen_range(-max_delta..=max_delta);
                    let ys = (y + dy).clamp(0, h as i64 - 1);
                    let xs = (x + dx).clamp(0, w as i64 - 1);
                    for ci in 0..3 {
                        let base = (ni * 3 + ci) * plane;
                        let a = base + (y * w as i64 + x) as usize;
                        let b = base + (ys * w as i64 + xs) as usize;
                        out.data_mut().swap(a, b);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Box-average downsample to `round(dim * fraction)`, then nearest upsample.
fn pixelate(rgb: &Tensor, fraction: f32) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4()?;
    let th = ((h as f32 * fraction).round() as usize).max(1);
    let tw = ((w as f32 * fraction).round() as usize).max(1);
    let mut out = vec![0.0f32; rgb.numel()];
    let mut sums = vec![0.0f64; th * tw];
    let mut counts = vec![0u32; th * tw];
    for plane_idx in 0..n * c {
        let src = &rgb.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        sums.iter_mut().for_each(|v| *v = 0.0);
        counts.iter_mut().for_each(|v| *v = 0);
        for y in 0..h {
            let ty = (y * th / h).min(th - 1);
            for x in 0..w {
                let tx = (x * tw / w).min(tw - 1);
                sums[ty * tw + tx] += f64::from(src[y * w + x]);
                counts[ty * tw + tx] += 1;
            }
        }
        let dst = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h {
            let ty = (y * th / h).min(th - 1);
            for x in 0..w {
                let tx = (x * tw / w).min(tw - 1);
                dst[y * w + x] = (sums[ty * tw + tx] / f64::from(counts[ty * tw + tx])) as f32;
            }
        }
    }
    Tensor::new(rgb.shape().to_vec(), out)
}

/// Standard JPEG luminance quantization matrix.
const JPEG_Q: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// 8x8 block DCT quantization, dependency-free stand-in for a codec.
fn jpeg_like(rgb: &Tensor, quality: u8) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4()?;
    let quality = quality.clamp(1, 100);
    let scale = if quality < 50 {
        5000.0 / f64::from(quality)
    } else {
        200.0 - 2.0 * f64::from(quality)
    };
    let q: Vec<f64> = JPEG_Q
        .iter()
        .map(|&v| ((v * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
        .collect();

    // DCT-II basis, b[k][x] = a_k cos((2x+1) k pi / 16)
    let mut basis = [[0.0f64; 8]; 8];
    for (k, row) in basis.iter_mut().enumerate() {
        let a = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, b) in row.iter_mut().enumerate() {
            *b = a * ((2.0 * x as f64 + 1.0) * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }

    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    let mut out = rgb.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for plane_idx in 0..n * c {
        for by in 0..bh {
            for bx in 0..bw {
                // gather with edge replication past the border
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by * 8 + y).min(h - 1);
                        let sx = (bx * 8 + x).min(w - 1);
                        *v = f64::from(rgb.data()[plane_idx * h * w + sy * w + sx]) * 255.0 - 128.0;
                    }
                }
                // C = B . block . B^T, quantize, reconstruct
                for (u, crow) in coef.iter_mut().enumerate() {
                    for (v, cval) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for (y, row) in block.iter().enumerate() {
                            for (x, &val) in row.iter().enumerate() {
                                acc += basis[u][y] * basis[v][x] * val;
                            }
                        }
                        let qv = q[u * 8 + v];
                        *cval = (acc / qv).round() * qv;
                    }
                }
                for y in 0..8 {
                    let sy = by * 8 + y;
                    if sy >= h {
                        continue;
                    }
                    for x in 0..8 {
                        let sx = bx * 8 + x;
                        if sx >= w {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, &cval) in crow.iter().enumerate() {
                                acc += basis[u][y] * basis[v][x] * cval;
                            }
                        }
                        out.data_mut()[plane_idx * h * w + sy * w + sx] =
                            (((acc + 128.0) / 255.0) as f32).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pull values toward the per-image per-channel mean.
fn contrast(rgb: &Tensor, factor: f32) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4()?;
    let mut out = rgb.clone();
    let plane = h * w;
    for plane_idx in 0..n * c {
        let start = plane_idx * plane;
        let mean = (rgb.data()[start..start + plane]
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>()
            / plane as f64) as f32;
        for v in &mut out.data_mut()[start..start + plane] {
            *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Scale chroma around the greyscale axis.
fn saturate(rgb: &Tensor, factor: f32) -> Result<Tensor> {
    let (n, _, h, w) = rgb.dims4()?;
    let mut out = rgb.clone();
    let plane = h * w;
    for ni in 0..n {
        for p in 0..plane {
            let r = rgb.data()[(ni * 3) * plane + p];
            let gch = rgb.data()[(ni * 3 + 1) * plane + p];
            let b = rgb.data()[(ni * 3 + 2) * plane + p];
            let grey = 0.299 * r + 0.587 * gch + 0.114 * b;
            for (ci, v) in [r, gch, b].into_iter().enumerate() {
                out.data_mut()[(ni * 3 + ci) * plane + p] =
                    (grey + (v - grey) * factor).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn spec(id: CorruptionId, severity: u8, seed: u64) -> CorruptionSpec {
        CorruptionSpec::new(id, severity, seed).unwrap()
    }

    fn test_images() -> Vec<Tensor> {
        use crate::rng::stream;
        let mut rng = stream(123, "test/corruption-images");
        let mut images = Vec::new();
        for _ in 0..6 {
            // piecewise-constant blocks + texture so every corruption has
            // structure to destroy
            let mut img = random_tensor(&mut rng, &[1, 3, 24, 24], 0.2, 0.8);
            for c in 0..3 {
                for y in 0..12 {
                    for x in 0..12 {
                        img.data_mut()[c * 576 + y * 24 + x] = 0.9 - 0.2 * c as f32;
                    }
                }
            }
            images.push(img);
        }
        images
    }

    #[test]
    fn severity_zero_is_bitwise_identity() {
        let img = test_images().remove(0);
        for id in CorruptionId::ALL {
            let out = corrupt(&spec(id, 0, 9), &img).unwrap();
            assert_eq!(out.data(), img.data(), "{id}");
        }
    }

    #[test]
    fn corruption_is_deterministic_given_seed() {
        let img = test_images().remove(0);
        for id in CorruptionId::ALL {
            let a = corrupt(&spec(id, 3, 42), &img).unwrap();
            let b = corrupt(&spec(id, 3, 42), &img).unwrap();
            assert_eq!(a.data(), b.data(), "{id}");
            let c = corrupt(&spec(id, 3, 43), &img).unwrap();
            if !matches!(
                id,
                CorruptionId::GaussianBlur
                    | CorruptionId::DefocusBlur
                    | CorruptionId::Pixelate
                    | CorruptionId::JpegLike
                    | CorruptionId::Brightness
                    | CorruptionId::Contrast
                    | CorruptionId::Saturate
            ) {
                assert_ne!(a.data(), c.data(), "{id} should depend on the seed");
            }
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        for img in test_images() {
            for id in CorruptionId::ALL {
                for severity in 1..=5u8 {
                    let out = corrupt(&spec(id, severity, 7), &img).unwrap();
                    assert!(
                        out.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                        "{id} severity {severity}"
                    );
                }
            }
        }
    }

    #[test]
    fn degradation_is_monotone_in_severity() {
        let images = test_images();
        for id in CorruptionId::ALL {
            let mut prev = 0.0f64;
            for severity in 1..=5u8 {
                let mut total = 0.0f64;
                for (i, img) in images.iter().enumerate() {
                    let out = corrupt(&spec(id, severity, i as u64), img).unwrap();
                    total += out.l1_distance(img).unwrap();
                }
                let mean = total / images.len() as f64;
                assert!(
                    mean >= prev - 1e-4,
                    "{id}: severity {severity} mean l1 {mean:.4} < previous {prev:.4}"
                );
                prev = mean;
            }
        }
    }

    #[test]
    fn gaussian_noise_sample_std_matches_table() {
        // empirical std over >= 10^4 pixels on a constant image
        let img = Tensor::filled(&[1, 3, 64, 64], 0.5);
        let table = default_table();
        for severity in 1..=5u8 {
            let out = corrupt(&spec(CorruptionId::GaussianNoise, severity, 11), &img).unwrap();
            let diffs: Vec<f64> = out
                .data()
                .iter()
                .map(|&v| f64::from(v) - 0.5)
                .collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            let got = var.sqrt();
            let want = f64::from(table.gaussian_noise.std[(severity - 1) as usize]);
            // severity 5 clips noticeably at 0.5 +/- 0.26; allow the clip
            let tol = if severity >= 5 { 0.08 } else { 0.05 };
            assert!(
                (got - want).abs() / want < tol,
                "severity {severity}: sample std {got:.4} vs table {want}"
            );
        }
    }

    #[test]
    fn brightness_mean_shift_matches_offset_exactly_before_clipping() {
        let img = Tensor::filled(&[1, 3, 16, 16], 0.4);
        let table = default_table();
        for severity in 1..=5u8 {
            let out = corrupt(&spec(CorruptionId::Brightness, severity, 0), &img).unwrap();
            let offset = table.brightness.offset[(severity - 1) as usize];
            // 0.4 + offset <= 0.9 never clips
            let want = 0.4 + offset;
            assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn split_partitions_st_from_eval() {
        let (st, eval) = split(&CorruptionId::ALL);
        assert_eq!(
            st,
            vec![CorruptionId::GaussianNoise, CorruptionId::GaussianBlur]
        );
        assert_eq!(eval.len(), 10);
        assert!(st.iter().all(|c| !eval.contains(c)));
        assert_eq!(st.len() + eval.len(), CorruptionId::ALL.len());
    }

    #[test]
    fn invalid_severity_is_rejected() {
        assert!(CorruptionSpec::new(CorruptionId::Brightness, 6, 0).is_err());
        let img = Tensor::filled(&[1, 3, 8, 8], 0.5);
        let bad = CorruptionSpec {
            id: CorruptionId::Brightness,
            severity: 9,
            seed: 0,
        };
        assert!(corrupt(&bad, &img).is_err());
    }

    #[test]
    fn default_table_parses_and_validates() {
        let t = default_table();
        assert_eq!(t.schema_version, 1);
        assert_eq!(t.gaussian_noise.std, [0.04, 0.08, 0.12, 0.18, 0.26]);
    }

    #[test]
    fn bad_tables_are_rejected() {
        let mut text = DEFAULT_TABLE_TOML.replace(
            "std = [0.04, 0.08, 0.12, 0.18, 0.26]",
            "std = [0.26, 0.08, 0.12, 0.18, 0.04]",
        );
        assert!(SeverityTable::from_toml(&text).is_err());
        text = DEFAULT_TABLE_TOML.replace("schema_version = 1", "schema_version = 99");
        assert!(SeverityTable::from_toml(&text).is_err());
        text = format!("{DEFAULT_TABLE_TOML}\n[extra]\nfoo = 1\n");
        assert!(SeverityTable::from_toml(&text).is_err());
    }
}
