//! Procedural scenes for desk-scale dense prediction, plus a 10-class
//! shape-classification set.
//!
//! A scene is a stack of slanted rectangles and cosine-profile domes over a
//! far plane. The dense targets are exact functions of the geometry:
//!
//! * depth - nearest surface per pixel, background at a fixed far plane;
//! * normals - the analytic depth gradient scaled by a fixed slope factor,
//!   normalized and encoded `(n+1)/2`;
//! * reshade - Lambertian shading of the normals under one fixed light.
//!
//! Shape depth, slant and dome height are deterministic functions of the
//! visible silhouette (size, height in the image, aspect), so the targets
//! are recoverable from RGB. Textures (stripes, checker, speckle) carry no
//! target information at all: they are pure nuisance that a direct
//! RGB-to-target network tends to latch onto, while noise corruptions break
//! edge cues and blur corruptions break high-frequency cues, giving the
//! middle domains genuinely different failure modes.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Far-plane depth of the empty background.
pub const FAR_PLANE: f32 = 0.92;

/// Slope factor mapping depth gradients (per pixel) into normal tilt.
pub const NORMAL_SLOPE_SCALE: f32 = 8.0;

/// Fixed light direction for the reshading target, unnormalized.
pub const LIGHT_DIR: (f32, f32, f32) = (0.35, -0.25, 0.9);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDomain {
    Depth,
    Normals,
    Reshade,
    Classify,
}

impl TargetDomain {
    pub fn name(self) -> &'static str {
        match self {
            TargetDomain::Depth => "depth",
            TargetDomain::Normals => "normals",
            TargetDomain::Reshade => "reshade",
            TargetDomain::Classify => "classify",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(TargetDomain::Depth),
            "normals" => Ok(TargetDomain::Normals),
            "reshade" => Ok(TargetDomain::Reshade),
            "classify" => Ok(TargetDomain::Classify),
            other => Err(Error::invalid(format!("unknown target domain `{other}`"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            TargetDomain::Depth | TargetDomain::Reshade => 1,
            TargetDomain::Normals => 3,
            TargetDomain::Classify => 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub normals: Tensor,
    pub reshade: Tensor,
}

impl SyntheticScene {
    pub fn target(&self, domain: TargetDomain) -> Result<&Tensor> {
        match domain {
            TargetDomain::Depth => Ok(&self.depth),
            TargetDomain::Normals => Ok(&self.normals),
            TargetDomain::Reshade => Ok(&self.reshade),
            TargetDomain::Classify => Err(Error::invalid(
                "classification targets come from the shape dataset".to_string(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    #[serde(default = "default_min_shapes")]
    pub min_shapes: usize,
    #[serde(default = "default_max_shapes")]
    pub max_shapes: usize,
}

fn default_min_shapes() -> usize {
    2
}
fn default_max_shapes() -> usize {
    5
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            min_shapes: default_min_shapes(),
            max_shapes: default_max_shapes(),
        }
    }
}

enum Profile {
    /// Planar surface, constant depth gradient.
    Slab { gx: f32, gy: f32 },
    /// Cosine dome: `d0 - h cos^2(pi r / 2)` over the elliptical radius.
    Dome { height: f32 },
}

struct Shape {
    cx: f32,
    cy: f32,
    half_w: f32,
    half_h: f32,
    rect: bool,
    base_depth: f32,
    profile: Profile,
    texture: Texture,
}

impl Shape {
    fn covers(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.half_w;
        let dy = (y - self.cy) / self.half_h;
        if self.rect {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        } else {
            dx * dx + dy * dy <= 1.0
        }
    }

    /// Depth and analytic gradient at a covered pixel.
    fn surface(&self, x: f32, y: f32) -> (f32, f32, f32) {
        match self.profile {
            Profile::Slab { gx, gy } => (
                self.base_depth + gx * (x - self.cx) + gy * (y - self.cy),
                gx,
                gy,
            ),
            Profile::Dome { height } => {
                let ux = (x - self.cx) / self.half_w;
                let uy = (y - self.cy) / self.half_h;
                let r = (ux * ux + uy * uy).sqrt().min(1.0);
                let half_pi = std::f32::consts::FRAC_PI_2;
                let c = (half_pi * r).cos();
                let depth = self.base_depth - height * c * c;
                if r < 1e-6 {
                    (depth, 0.0, 0.0)
                } else {
                    // d'(r) = h (pi/2) sin(pi r)
                    let dr = height * half_pi * (std::f32::consts::PI * r).sin();
                    let gx = dr * ux / (self.half_w * r);
                    let gy = dr * uy / (self.half_h * r);
                    (depth, gx, gy)
                }
            }
        }
    }
}

#[derive(Clone)]
enum Texture {
    Flat {
        color: [f32; 3],
    },
    Stripes {
        a: [f32; 3],
        b: [f32; 3],
        freq: f32,
        angle: f32,
        phase: f32,
    },
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        cell: usize,
    },
    Speckle {
        a: [f32; 3],
        b: [f32; 3],
        /// full-resolution blend field, generated once per shape
        field: Vec<f32>,
        size: usize,
    },
}

impl Texture {
    fn sample(&self, x: usize, y: usize) -> [f32; 3] {
        match self {
            Texture::Flat { color } => *color,
            Texture::Stripes {
                a,
                b,
                freq,
                angle,
                phase,
            } => {
                let t = (freq * (angle.cos() * x as f32 + angle.sin() * y as f32) + phase).sin();
                if t >= 0.0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Speckle { a, b, field, size } => {
                let t = field[y * size + x];
                [
                    a[0] + (b[0] - a[0]) * t,
                    a[1] + (b[1] - a[1]) * t,
                    a[2] + (b[2] - a[2]) * t,
                ]
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.05f32..0.95),
        rng.gen_range(0.05f32..0.95),
        rng.gen_range(0.05f32..0.95),
    ]
}

/// Draw a color pair whose mean keeps at least `min_gap` distance from
/// `reference` on some channel, so silhouettes stay visible.
fn contrasting_pair(
    rng: &mut ChaCha8Rng,
    reference: [f32; 3],
    min_gap: f32,
) -> ([f32; 3], [f32; 3]) {
    for _ in 0..16 {
        let a = random_color(rng);
        let b = random_color(rng);
        let mean = [
            0.5 * (a[0] + b[0]),
            0.5 * (a[1] + b[1]),
            0.5 * (a[2] + b[2]),
        ];
        let gap = mean
            .iter()
            .zip(&reference)
            .map(|(m, r)| (m - r).abs())
            .fold(0.0f32, f32::max);
        if gap >= min_gap {
            return (a, b);
        }
    }
    // fall back to an explicit push away from the reference
    let a = [
        (reference[0] + 0.5).rem_euclid(1.0),
        (reference[1] + 0.5).rem_euclid(1.0),
        (reference[2] + 0.5).rem_euclid(1.0),
    ];
    (a, random_color(rng))
}

fn texture_for(rng: &mut ChaCha8Rng, colors: ([f32; 3], [f32; 3]), size: usize) -> Texture {
    match rng.gen_range(0..4u8) {
        0 => Texture::Flat { color: colors.0 },
        1 => Texture::Stripes {
            a: colors.0,
            b: colors.1,
            freq: rng.gen_range(0.25f32..1.0),
            angle: rng.gen_range(0.0f32..std::f32::consts::PI),
            phase: rng.gen_range(0.0f32..std::f32::consts::TAU),
        },
        2 => Texture::Checker {
            a: colors.0,
            b: colors.1,
            cell: rng.gen_range(2usize..7),
        },
        _ => {
            let field = (0..size * size).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            Texture::Speckle {
                a: colors.0,
                b: colors.1,
                field,
                size,
            }
        }
    }
}

fn generate_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let s = cfg.size;
    let sf = s as f32;

    // background: low-contrast texture around a mid-grey base
    let bg_base = [
        rng.gen_range(0.35f32..0.65),
        rng.gen_range(0.35f32..0.65),
        rng.gen_range(0.35f32..0.65),
    ];
    let bg_off = rng.gen_range(0.02f32..0.10);
    let bg_b = [
        (bg_base[0] + bg_off).min(1.0),
        (bg_base[1] + bg_off).min(1.0),
        (bg_base[2] + bg_off).min(1.0),
    ];
    let background = texture_for(rng, (bg_base, bg_b), s);

    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let rect = rng.gen_bool(0.5);
        let (min_half, max_half) = if rect {
            (0.125f32, 0.30)
        } else {
            // domes need gentler curvature for well-conditioned normals
            (0.19f32, 0.30)
        };
        let half_w = rng.gen_range(min_half..max_half) * sf;
        let half_h = rng.gen_range(min_half..max_half) * sf;
        let cx = rng.gen_range(0.15f32..0.85) * sf;
        let cy = rng.gen_range(0.15f32..0.85) * sf;

        // depth rule: bigger and lower in the image means closer; the
        // parameters are functions of the visible silhouette only
        let rel_area = (half_w * half_h / (0.09 * sf * sf)).clamp(0.0, 1.0);
        let base_depth = 0.82 - 0.38 * rel_area - 0.22 * (1.0 - cy / sf);

        let profile = if rect {
            let aspect = (half_w.max(half_h) / half_w.min(half_h)).min(2.0);
            let slope = 0.015 * (aspect - 1.0);
            if half_w >= half_h {
                Profile::Slab { gx: slope, gy: 0.0 }
            } else {
                Profile::Slab { gx: 0.0, gy: slope }
            }
        } else {
            // height tied to the visible minor radius
            let height = 0.04 + 0.06 * (half_w.min(half_h) / (0.30 * sf));
            Profile::Dome { height }
        };

        let colors = contrasting_pair(rng, bg_base, 0.22);
        let texture = texture_for(rng, colors, s);
        shapes.push(Shape {
            cx,
            cy,
            half_w,
            half_h,
            rect,
            base_depth,
            profile,
            texture,
        });
    }

    let mut rgb = vec![0.0f32; 3 * s * s];
    let mut depth = vec![0.0f32; s * s];
    let mut normals = vec![0.0f32; 3 * s * s];
    let mut reshade = vec![0.0f32; s * s];
    let light_norm = {
        let (lx, ly, lz) = LIGHT_DIR;
        let n = (lx * lx + ly * ly + lz * lz).sqrt();
        (lx / n, ly / n, lz / n)
    };

    for py in 0..s {
        for px in 0..s {
            let (x, y) = (px as f32 + 0.5, py as f32 + 0.5);
            let mut best_depth = FAR_PLANE;
            let mut grad = (0.0f32, 0.0f32);
            let mut winner: Option<&Shape> = None;
            for shape in &shapes {
                if shape.covers(x, y) {
                    let (d, gx, gy) = shape.surface(x, y);
                    if d < best_depth {
                        best_depth = d;
                        grad = (gx, gy);
                        winner = Some(shape);
                    }
                }
            }
            let idx = py * s + px;
            depth[idx] = best_depth.clamp(0.0, 1.0);

            // normal from the analytic surface gradient
            let vx = -NORMAL_SLOPE_SCALE * grad.0;
            let vy = -NORMAL_SLOPE_SCALE * grad.1;
            let norm = (vx * vx + vy * vy + 1.0).sqrt();
            let n = (vx / norm, vy / norm, 1.0 / norm);
            normals[idx] = (n.0 + 1.0) * 0.5;
            normals[s * s + idx] = (n.1 + 1.0) * 0.5;
            normals[2 * s * s + idx] = (n.2 + 1.0) * 0.5;

            let shade = n.0 * light_norm.0 + n.1 * light_norm.1 + n.2 * light_norm.2;
            reshade[idx] = shade.clamp(0.0, 1.0);

            let color = match winner {
                Some(shape) => shape.texture.sample(px, py),
                None => background.sample(px, py),
            };
            for c in 0..3 {
                rgb[c * s * s + idx] = color[c].clamp(0.0, 1.0);
            }
        }
    }

    SyntheticScene {
        rgb: Tensor::new(vec![3, s, s], rgb).expect("sized"),
        depth: Tensor::new(vec![1, s, s], depth).expect("sized"),
        normals: Tensor::new(vec![3, s, s], normals).expect("sized"),
        reshade: Tensor::new(vec![1, s, s], reshade).expect("sized"),
    }
}

/// Scene with no shapes: far-plane depth, up normals, flat shading.
pub fn empty_scene(size: usize) -> SyntheticScene {
    let cfg = SceneConfig {
        size,
        min_shapes: 0,
        max_shapes: 0,
    };
    let mut rng = stream(0, "data/empty");
    generate_scene(&cfg, &mut rng)
}

/// Deterministic train/test sets on disjoint seed streams.
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    cfg: &SceneConfig,
) -> Result<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("need at least one train and test scene"));
    }
    let make = |split: &str, n: usize| -> Vec<SyntheticScene> {
        (0..n)
            .map(|i| {
                let mut rng = stream(seed, &format!("data/{split}/{i}"));
                generate_scene(cfg, &mut rng)
            })
            .collect()
    };
    Ok((make("train", n_train), make("test", n_test)))
}

// ---- classification ------------------------------------------------------

pub const N_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "circle", "square", "triangle", "ring", "plus", "hbar", "vbar", "diamond", "lshape",
    "twodots",
];

fn class_covers(class: usize, ux: f32, uy: f32) -> bool {
    // (ux, uy) in [-1, 1] shape-local coordinates
    let (ax, ay) = (ux.abs(), uy.abs());
    match class {
        0 => ux * ux + uy * uy <= 1.0,
        1 => ax <= 0.82 && ay <= 0.82,
        2 => uy >= -0.75 && ay <= 0.9 && ax <= (uy + 0.75) / 1.65 * 0.95 + 0.05,
        3 => {
            let r2 = ux * ux + uy * uy;
            (0.45..=1.0).contains(&r2)
        }
        4 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        5 => ay <= 0.35 && ax <= 1.0,
        6 => ax <= 0.35 && ay <= 1.0,
        7 => ax + ay <= 1.0,
        8 => (ux <= -0.15 && ay <= 1.0 && ux >= -0.85) || (uy >= 0.15 && ax <= 1.0 && uy <= 0.85),
        _ => {
            let d1 = (ux + 0.5) * (ux + 0.5) + (uy + 0.5) * (uy + 0.5);
            let d2 = (ux - 0.5) * (ux - 0.5) + (uy - 0.5) * (uy - 0.5);
            d1 <= 0.16 || d2 <= 0.16
        }
    }
}

/// One labeled image: a single textured archetype over a textured
/// background.
fn generate_class_image(size: usize, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let sf = size as f32;
    let bg_base = [
        rng.gen_range(0.35f32..0.65),
        rng.gen_range(0.35f32..0.65),
        rng.gen_range(0.35f32..0.65),
    ];
    let bg_off = rng.gen_range(0.02f32..0.10);
    let bg_b = [
        (bg_base[0] + bg_off).min(1.0),
        (bg_base[1] + bg_off).min(1.0),
        (bg_base[2] + bg_off).min(1.0),
    ];
    let background = texture_for(rng, (bg_base, bg_b), size);
    let colors = contrasting_pair(rng, bg_base, 0.22);
    let texture = texture_for(rng, colors, size);

    let scale = rng.gen_range(0.28f32..0.42) * sf;
    let cx = rng.gen_range(0.38f32..0.62) * sf;
    let cy = rng.gen_range(0.38f32..0.62) * sf;

    let mut rgb = vec![0.0f32; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let ux = (px as f32 + 0.5 - cx) / scale;
            let uy = (py as f32 + 0.5 - cy) / scale;
            let color = if ux.abs() <= 1.0 && uy.abs() <= 1.0 && class_covers(class, ux, uy) {
                texture.sample(px, py)
            } else {
                background.sample(px, py)
            };
            for c in 0..3 {
                rgb[c * size * size + py * size + px] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], rgb).expect("sized")
}

/// Balanced labeled sets on disjoint seed streams; labels cycle 0..10.
pub fn generate_classification_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    size: usize,
) -> (Vec<(Tensor, usize)>, Vec<(Tensor, usize)>) {
    let make = |split: &str, n: usize| -> Vec<(Tensor, usize)> {
        (0..n)
            .map(|i| {
                let class = i % N_CLASSES;
                let mut rng = stream(seed, &format!("classdata/{split}/{i}"));
                (generate_class_image(size, class, &mut rng), class)
            })
            .collect()
    };
    (make("train", n_train), make("test", n_test))
}
