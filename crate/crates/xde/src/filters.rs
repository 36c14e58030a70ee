//! The analytic middle-domain bank: deterministic, differentiable image
//! transforms from RGB to each intermediate representation.
//!
//! Every transform is built from graph ops (fixed-kernel convolutions and
//! elementwise math) so that attack gradients flow through it; the fixed
//! kernels themselves are constants and carry no gradient. All outputs are
//! normalized into `[0,1]` and preserve the input's spatial size.
//!
//! Definitions:
//!
//! * `edges2d` - Sobel gradient magnitude of the greyscale image, smoothed
//!   as `sqrt(gx^2 + gy^2 + 1e-6)` so the gradient exists at zero-edge
//!   pixels, scaled by `1/sqrt(32)`.
//! * `laplace_edges` - 3x3 Laplacian of greyscale, mapped `(x+4)/8`.
//! * `greyscale` - `0.299 R + 0.587 G + 0.114 B`.
//! * `emboss` - 3x3 emboss kernel `[[-2,-1,0],[-1,1,1],[0,1,2]]` on
//!   greyscale plus 0.5, clamped.
//! * `lowpass` - Gaussian blur, sigma 2, 9x9 truncated kernel renormalized.
//! * `sharpened` - `clamp(rgb + 1.0 * (rgb - blur(rgb, sigma 1)))`.
//! * `wavelet` - one-level Haar decomposition of greyscale; the four
//!   subbands are affinely normalized, nearest-upsampled to full
//!   resolution and stacked as 4 channels.
//! * `identity_rgb` - the direct path, no transform.
//!
//! Analytic filters pad by edge replication; zero padding would fabricate
//! edges at the border and pollute the edge-type domains.

use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::{Graph, PadMode, Tensor, Var};
use serde::{Deserialize, Serialize};

const EPS_SMOOTH: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiddleDomainId {
    Edges2d,
    LaplaceEdges,
    Greyscale,
    Emboss,
    Lowpass,
    Sharpened,
    Wavelet,
    IdentityRgb,
}

impl MiddleDomainId {
    /// All domains, identity (the direct path) last.
    pub const ALL: [MiddleDomainId; 8] = [
        MiddleDomainId::Edges2d,
        MiddleDomainId::LaplaceEdges,
        MiddleDomainId::Greyscale,
        MiddleDomainId::Emboss,
        MiddleDomainId::Lowpass,
        MiddleDomainId::Sharpened,
        MiddleDomainId::Wavelet,
        MiddleDomainId::IdentityRgb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MiddleDomainId::Edges2d => "edges2d",
            MiddleDomainId::LaplaceEdges => "laplace_edges",
            MiddleDomainId::Greyscale => "greyscale",
            MiddleDomainId::Emboss => "emboss",
            MiddleDomainId::Lowpass => "lowpass",
            MiddleDomainId::Sharpened => "sharpened",
            MiddleDomainId::Wavelet => "wavelet",
            MiddleDomainId::IdentityRgb => "identity_rgb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MiddleDomainId::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown middle domain `{s}`")))
    }

    pub fn out_channels(self) -> usize {
        match self {
            MiddleDomainId::Edges2d
            | MiddleDomainId::LaplaceEdges
            | MiddleDomainId::Greyscale
            | MiddleDomainId::Emboss => 1,
            MiddleDomainId::Lowpass | MiddleDomainId::Sharpened | MiddleDomainId::IdentityRgb => 3,
            MiddleDomainId::Wavelet => 4,
        }
    }
}

impl std::fmt::Display for MiddleDomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Output contract of one transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutputSpec {
    pub id: MiddleDomainId,
    pub out_channels: usize,
    pub value_range: (f32, f32),
}

pub fn output_spec(id: MiddleDomainId) -> FilterOutputSpec {
    FilterOutputSpec {
        id,
        out_channels: id.out_channels(),
        value_range: (0.0, 1.0),
    }
}

fn validate_rgb(t: &Tensor) -> Result<()> {
    let (_, c, _, _) = t.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!(
            "middle-domain transforms take 3-channel input, got {c}"
        )));
    }
    if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::precondition(
            "rgb input must lie in [0,1]".to_string(),
        ));
    }
    Ok(())
}

fn kernel_grey(g: &mut Graph) -> Var {
    g.constant(Tensor::new(vec![1, 3, 1, 1], vec![0.299, 0.587, 0.114]).expect("static"))
}

fn kernel_3x3(g: &mut Graph, values: [f32; 9]) -> Var {
    g.constant(Tensor::new(vec![1, 1, 3, 3], values.to_vec()).expect("static"))
}

/// Truncated Gaussian, radius `2 * sigma` rounded up, renormalized. Applied
/// per channel via a block-diagonal kernel.
fn kernel_gaussian(g: &mut Graph, sigma: f64, channels: usize) -> (Var, usize) {
    let radius = (2.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let mut weights = vec![0.0f64; size * size];
    let mut total = 0.0f64;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - radius as f64;
            let dx = x as f64 - radius as f64;
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            weights[y * size + x] = w;
            total += w;
        }
    }
    let mut data = vec![0.0f32; channels * channels * size * size];
    for c in 0..channels {
        for i in 0..size * size {
            data[(c * channels + c) * size * size + i] = (weights[i] / total) as f32;
        }
    }
    let k = g.constant(Tensor::new(vec![channels, channels, size, size], data).expect("static"));
    (k, radius)
}

fn greyscale(g: &mut Graph, rgb: Var) -> Result<Var> {
    let k = kernel_grey(g);
    g.conv2d(rgb, k, 1, 0, PadMode::Zero)
}

/// Build the transform inside an existing graph, for differentiable chains.
pub fn apply_graph(id: MiddleDomainId, g: &mut Graph, rgb: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(rgb).dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!(
            "middle-domain transforms take 3-channel input, got {c}"
        )));
    }
    match id {
        MiddleDomainId::IdentityRgb => Ok(rgb),
        MiddleDomainId::Greyscale => greyscale(g, rgb),
        MiddleDomainId::Edges2d => {
            let grey = greyscale(g, rgb)?;
            let kx = kernel_3x3(g, [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]);
            let ky = kernel_3x3(g, [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
            let gx = g.conv2d(grey, kx, 1, 1, PadMode::Replicate)?;
            let gy = g.conv2d(grey, ky, 1, 1, PadMode::Replicate)?;
            let gx2 = g.mul(gx, gx)?;
            let gy2 = g.mul(gy, gy)?;
            let ss = g.add(gx2, gy2)?;
            let ss = g.add_scalar(ss, EPS_SMOOTH);
            let mag = g.sqrt(ss);
            let scaled = g.mul_scalar(mag, 1.0 / 32.0f32.sqrt());
            Ok(g.clamp(scaled, 0.0, 1.0))
        }
        MiddleDomainId::LaplaceEdges => {
            let grey = greyscale(g, rgb)?;
            let k = kernel_3x3(g, [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
            let lap = g.conv2d(grey, k, 1, 1, PadMode::Replicate)?;
            let mapped = g.affine(lap, 1.0 / 8.0, 0.5);
            Ok(g.clamp(mapped, 0.0, 1.0))
        }
        MiddleDomainId::Emboss => {
            let grey = greyscale(g, rgb)?;
            let k = kernel_3x3(g, [-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0]);
            let e = g.conv2d(grey, k, 1, 1, PadMode::Replicate)?;
            let shifted = g.add_scalar(e, 0.5);
            Ok(g.clamp(shifted, 0.0, 1.0))
        }
        MiddleDomainId::Lowpass => {
            let (k, radius) = kernel_gaussian(g, 2.0, 3);
            let blurred = g.conv2d(rgb, k, 1, radius, PadMode::Replicate)?;
            Ok(g.clamp(blurred, 0.0, 1.0))
        }
        MiddleDomainId::Sharpened => {
            let (k, radius) = kernel_gaussian(g, 1.0, 3);
            let blurred = g.conv2d(rgb, k, 1, radius, PadMode::Replicate)?;
            let doubled = g.mul_scalar(rgb, 2.0);
            let sharp = g.sub(doubled, blurred)?;
            Ok(g.clamp(sharp, 0.0, 1.0))
        }
        MiddleDomainId::Wavelet => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(format!(
                    "wavelet needs even spatial dims, got {h}x{w}"
                )));
            }
            let grey = greyscale(g, rgb)?;
            // Orthonormal 2x2 Haar analysis kernels, stride 2.
            let banks: [( [f32; 4], f32, f32); 4] = [
                ([0.5, 0.5, 0.5, 0.5], 0.5, 0.0),    // LL in [0,2]
                ([0.5, -0.5, 0.5, -0.5], 0.5, 0.5),  // LH in [-1,1]
                ([0.5, 0.5, -0.5, -0.5], 0.5, 0.5),  // HL in [-1,1]
                ([0.5, -0.5, -0.5, 0.5], 0.5, 0.5),  // HH in [-1,1]
            ];
            let mut channels = Vec::with_capacity(4);
            for (kvals, mul, add) in banks {
                let k = g.constant(Tensor::new(vec![1, 1, 2, 2], kvals.to_vec()).expect("static"));
                let band = g.conv2d(grey, k, 2, 0, PadMode::Zero)?;
                let normed = g.affine(band, mul, add);
                let full = g.nearest_upsample(normed, 2)?;
                channels.push(full);
            }
            let stacked = g.concat_channels(&channels)?;
            Ok(g.clamp(stacked, 0.0, 1.0))
        }
    }
}

/// Apply one transform to a `[N,3,H,W]` image batch.
pub fn apply(id: MiddleDomainId, rgb: &Tensor) -> Result<Tensor> {
    validate_rgb(rgb)?;
    let mut g = Graph::new();
    let x = g.constant(rgb.clone());
    let out = apply_graph(id, &mut g, x)?;
    Ok(g.value(out).clone())
}

/// Report for one domain's differentiability check.
#[derive(Debug, Clone)]
pub struct JacobianReport {
    pub id: MiddleDomainId,
    pub report: GradCheckReport,
}

/// Verify that the autodiff gradient of a random scalar functional of
/// `apply(id, rgb)` matches central finite differences. The input should
/// keep interior pixels away from clamp saturation.
pub fn jacobian_check(id: MiddleDomainId, rgb: &Tensor) -> Result<JacobianReport> {
    validate_rgb(rgb)?;
    let report = check_gradients(
        std::slice::from_ref(rgb),
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        move |g, vars| apply_graph(id, g, vars[0]),
    )?;
    Ok(JacobianReport { id, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::rng::stream;
    use crate::tensor::Graph;

    fn rgb_constant(v: f32) -> Tensor {
        Tensor::filled(&[1, 3, 8, 8], v)
    }

    #[test]
    fn constant_image_has_no_edges() {
        let grey = rgb_constant(0.5);
        let e = apply(MiddleDomainId::Edges2d, &grey).unwrap();
        assert!(e.data().iter().all(|&v| v <= 1e-3), "max {:?}", e.data()[0]);
        let l = apply(MiddleDomainId::LaplaceEdges, &grey).unwrap();
        assert!(l.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn greyscale_of_equal_channels_is_identity() {
        for v in [0.0f32, 0.25, 0.6, 1.0] {
            let out = apply(MiddleDomainId::Greyscale, &rgb_constant(v)).unwrap();
            assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-6), "v={v}");
        }
    }

    #[test]
    fn lowpass_preserves_constants() {
        let out = apply(MiddleDomainId::Lowpass, &rgb_constant(0.73)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 8, 8]);
        assert!(out.data().iter().all(|&o| (o - 0.73).abs() < 1e-5));
    }

    #[test]
    fn wavelet_reconstructs_greyscale_through_inverse_haar_oracle() {
        let mut rng = stream(21, "test/haar");
        let rgb = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        let grey = apply(MiddleDomainId::Greyscale, &rgb).unwrap();
        let bands = apply(MiddleDomainId::Wavelet, &rgb).unwrap();
        assert_eq!(bands.shape(), &[1, 4, 8, 8]);

        // Independent inverse: undo the affine normalization, read each
        // subband at its 2x-replicated positions, and resynthesize each 2x2
        // block from the orthonormal Haar basis.
        let (h, w) = (8usize, 8usize);
        let band = |c: usize, y: usize, x: usize| -> f64 {
            let v = f64::from(bands.data()[c * h * w + (2 * y) * w + 2 * x]);
            if c == 0 {
                v / 0.5
            } else {
                (v - 0.5) / 0.5
            }
        };
        for by in 0..h / 2 {
            for bx in 0..w / 2 {
                let (ll, lh, hl, hh) = (
                    band(0, by, bx),
                    band(1, by, bx),
                    band(2, by, bx),
                    band(3, by, bx),
                );
                let recon = [
                    0.5 * (ll + lh + hl + hh),
                    0.5 * (ll - lh + hl - hh),
                    0.5 * (ll + lh - hl - hh),
                    0.5 * (ll - lh - hl + hh),
                ];
                for (i, r) in recon.iter().enumerate() {
                    let (dy, dx) = (i / 2, i % 2);
                    let expect = f64::from(grey.data()[(2 * by + dy) * w + 2 * bx + dx]);
                    assert!(
                        (r - expect).abs() < 1e-5,
                        "block ({by},{bx}) px {i}: {r} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_domains_preserve_shape_and_range() {
        let mut rng = stream(22, "test/range-fuzz");
        for trial in 0..25 {
            let rgb = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
            for id in MiddleDomainId::ALL {
                let out = apply(id, &rgb).unwrap();
                let (_, c, h, w) = out.dims4().unwrap();
                assert_eq!((c, h, w), (id.out_channels(), 8, 8), "{id} trial {trial}");
                assert!(
                    out.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "{id} out of range, trial {trial}"
                );
            }
        }
    }

    #[test]
    fn apply_is_a_pure_function() {
        let mut rng = stream(23, "test/purity");
        let rgb = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
        for id in MiddleDomainId::ALL {
            let a = apply(id, &rgb).unwrap();
            let b = apply(id, &rgb).unwrap();
            assert_eq!(a.data(), b.data(), "{id}");
        }
    }

    #[test]
    fn wrong_channel_count_is_invalid_argument() {
        let grey = Tensor::zeros(&[1, 1, 8, 8]);
        let err = apply(MiddleDomainId::Edges2d, &grey).unwrap_err();
        assert!(err.to_string().contains("3-channel"), "{err}");
    }

    #[test]
    fn out_of_range_input_is_a_precondition_error() {
        let bad = Tensor::filled(&[1, 3, 4, 4], 1.5);
        let err = apply(MiddleDomainId::Greyscale, &bad).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
    }

    #[test]
    fn greyscale_gradient_wrt_red_is_its_weight() {
        let mut g = Graph::new();
        let rgb = Tensor::filled(&[1, 3, 2, 2], 0.4);
        let x = g.leaf(rgb, true);
        let grey = apply_graph(MiddleDomainId::Greyscale, &mut g, x).unwrap();
        let s = g.sum(grey);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        // channel order R,G,B; each pixel contributes its channel weight
        for (i, &w) in [0.299f32, 0.587, 0.114].iter().enumerate() {
            for p in 0..4 {
                assert_eq!(grad.data()[i * 4 + p], w);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences_away_from_saturation() {
        let mut rng = stream(24, "test/jacobian");
        // mid-range, low-amplitude input keeps every domain off its clamps
        let base = random_tensor(&mut rng, &[1, 3, 8, 8], 0.45, 0.55);
        for id in MiddleDomainId::ALL {
            let jr = jacobian_check(id, &base).unwrap();
            assert!(
                jr.report.passed(),
                "{id}: max rel err {:.2e} over {} checks",
                jr.report.max_rel_err,
                jr.report.checked
            );
        }
    }

    #[test]
    fn emboss_gradient_is_zero_at_saturated_pixels() {
        // a hard black-to-white edge drives emboss past the clamp
        let mut data = vec![0.0f32; 3 * 36];
        for c in 0..3 {
            for y in 0..6 {
                for x in 3..6 {
                    data[c * 36 + y * 6 + x] = 1.0;
                }
            }
        }
        let rgb = Tensor::new(vec![1, 3, 6, 6], data).unwrap();
        let out = apply(MiddleDomainId::Emboss, &rgb).unwrap();
        let saturated: Vec<usize> = out
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0 || v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert!(!saturated.is_empty(), "edge image should saturate emboss");

        let mut g = Graph::new();
        let x = g.leaf(rgb, true);
        let e = apply_graph(MiddleDomainId::Emboss, &mut g, x).unwrap();
        // functional weighting only the saturated pixels
        let mut w = vec![0.0f32; 36];
        for &i in &saturated {
            w[i] = 1.0;
        }
        let wv = g.constant(Tensor::new(vec![1, 1, 6, 6], w).unwrap());
        let p = g.mul(e, wv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }
}
