//! The shared encoder-decoder backbone with a two-headed probabilistic
//! output.
//!
//! One architecture serves every path and every baseline; only the input
//! channel count varies. The encoder downsamples with stride-2
//! convolutions, the decoder upsamples bilinearly and concatenates skip
//! connections, and two separate final convolutions emit the per-pixel
//! mean (through a sigmoid, targets live in `[0,1]`) and the raw
//! log-scale. Keeping the log-scale head separate lets sigma training
//! move scales while mean grounding pins the mean pathway.
//!
//! With zero-initialized heads a fresh net predicts mean 0.5 and
//! log-scale 0 everywhere, i.e. sigma `sqrt(2)`.

use crate::checkpoint::{read_archive, write_archive, ArchiveMeta, TensorMeta};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, PadMode, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyUNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_negative_slope")]
    pub negative_slope: f32,
}

fn default_depth() -> usize {
    3
}
fn default_base_width() -> usize {
    16
}
fn default_negative_slope() -> f32 {
    0.1
}

impl TinyUNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        TinyUNetConfig {
            in_channels,
            out_channels,
            depth: default_depth(),
            base_width: default_base_width(),
            negative_slope: default_negative_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_width < 1 {
            return Err(Error::config(format!(
                "depth and base_width must be >= 1, got depth {} base_width {}",
                self.depth, self.base_width
            )));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::config("channel counts must be >= 1".to_string()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Per-pixel mean and log-scale emitted by one path.
///
/// Sigma is `sqrt(2) * exp(log_scale)`; the mean is only clamped at
/// reporting time, never inside a loss.
#[derive(Debug, Clone)]
pub struct ProbabilisticPrediction {
    pub mean: Tensor,
    pub log_scale: Tensor,
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
}

/// Parameter vars for one forward pass, in canonical parameter order.
pub struct BoundNet {
    vars: Vec<Var>,
}

impl BoundNet {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct TinyUNet {
    config: TinyUNetConfig,
    params: Vec<Param>,
}

/// Layer shapes in canonical order: stem, encoders top-down, decoders
/// bottom-up, then the two heads. Weight shape `[out, in, 3, 3]`, each
/// followed by its `[out]` bias.
fn layer_specs(cfg: &TinyUNetConfig) -> Vec<(String, usize, usize)> {
    let mut specs = Vec::new();
    specs.push(("stem".to_string(), cfg.in_channels, cfg.width(0)));
    for l in 0..cfg.depth {
        specs.push((format!("enc{l}"), cfg.width(l), cfg.width(l + 1)));
    }
    for l in (0..cfg.depth).rev() {
        specs.push((
            format!("dec{l}"),
            cfg.width(l + 1) + cfg.width(l),
            cfg.width(l),
        ));
    }
    specs.push(("head_mean".to_string(), cfg.width(0), cfg.out_channels));
    specs.push(("head_log_scale".to_string(), cfg.width(0), cfg.out_channels));
    specs
}

impl TinyUNet {
    /// Fresh network. Conv kernels use He-style fan-in scaled uniform init;
    /// both heads and all biases start at zero.
    pub fn init(config: TinyUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "net-init");
        let mut params = Vec::new();
        for (name, cin, cout) in layer_specs(&config) {
            let is_head = name.starts_with("head_");
            let fan_in = (cin * 9) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let weight = if is_head {
                Tensor::zeros(&[cout, cin, 3, 3])
            } else {
                let data = (0..cout * cin * 9)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::new(vec![cout, cin, 3, 3], data)?
            };
            params.push(Param {
                name: format!("{name}.weight"),
                value: weight,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[cout]),
            });
        }
        Ok(TinyUNet { config, params })
    }

    pub fn config(&self) -> &TinyUNetConfig {
        &self.config
    }

    /// Exact learnable-scalar count for a config, without building the net.
    pub fn count_params(config: &TinyUNetConfig) -> usize {
        layer_specs(config)
            .iter()
            .map(|(_, cin, cout)| cout * cin * 9 + cout)
            .sum()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(|p| p.value.shape()).collect()
    }

    /// Bind all parameters into a graph as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        BoundNet {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        bound: &BoundNet,
        layer: usize,
        input: Var,
        stride: usize,
        activate: bool,
    ) -> Result<Var> {
        let w = bound.vars[2 * layer];
        let b = bound.vars[2 * layer + 1];
        let c = g.conv2d(input, w, stride, 1, PadMode::Zero)?;
        let c = g.bias_add(c, b)?;
        Ok(if activate {
            g.leaky_relu(c, self.config.negative_slope)
        } else {
            c
        })
    }

    /// Run the backbone, producing `(mean, log_scale)` at input resolution.
    pub fn forward(&self, g: &mut Graph, bound: &BoundNet, input: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "tiny_unet forward",
                expected: vec![0, self.config.in_channels, 0, 0],
                got: g.value(input).shape().to_vec(),
            });
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = self.conv_block(g, bound, 0, input, 1, true)?;
        for l in 0..depth {
            skips.push(cur);
            cur = self.conv_block(g, bound, 1 + l, cur, 2, true)?;
        }
        for l in (0..depth).rev() {
            let up = g.bilinear_upsample(cur, 2)?;
            let cat = g.concat_channels(&[up, skips[l]])?;
            // dec layers were laid out bottom-up after the encoders
            let layer = 1 + depth + (depth - 1 - l);
            cur = self.conv_block(g, bound, layer, cat, 1, true)?;
        }
        let mean_raw = self.conv_block(g, bound, 1 + 2 * depth, cur, 1, false)?;
        let mean = g.sigmoid(mean_raw);
        let log_scale = self.conv_block(g, bound, 2 + 2 * depth, cur, 1, false)?;
        Ok((mean, log_scale))
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<ProbabilisticPrediction> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let bound = self.bind(&mut g, false);
        let (mean, log_scale) = self.forward(&mut g, &bound, x)?;
        Ok(ProbabilisticPrediction {
            mean: g.value(mean).clone(),
            log_scale: g.value(log_scale).clone(),
        })
    }

    /// Write an XDE1 checkpoint with the config embedded in the metadata.
    pub fn save(&self, path: &Path, stage: &str, seed: u64) -> Result<()> {
        let meta = ArchiveMeta {
            kind: "tiny_unet".to_string(),
            stage: stage.to_string(),
            seed,
            arch: Some(
                serde_json::to_value(self.config)
                    .map_err(|e| Error::config(format!("config encode: {e}")))?,
            ),
            tensors: self
                .params
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let tensors: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        write_archive(path, &meta, &tensors)
    }

    /// Load a checkpoint; returns the net plus its stage tag and seed.
    pub fn load(path: &Path) -> Result<(Self, String, u64)> {
        let (meta, tensors) = read_archive(path)?;
        if meta.kind != "tiny_unet" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 8,
                detail: format!("expected a tiny_unet checkpoint, found kind `{}`", meta.kind),
            });
        }
        let config: TinyUNetConfig = serde_json::from_value(
            meta.arch
                .clone()
                .ok_or_else(|| Error::config("checkpoint missing architecture".to_string()))?,
        )
        .map_err(|e| Error::config(format!("architecture parse: {e}")))?;
        let mut net = TinyUNet::init(config, meta.seed)?;
        if tensors.len() != net.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                tensors.len(),
                net.params.len()
            )));
        }
        for (param, (name, tensor)) in net.params.iter_mut().zip(tensors) {
            if param.name != name || param.value.shape() != tensor.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor `{name}` does not match layer `{}`",
                    param.name
                )));
            }
            param.value = tensor;
        }
        Ok((net, meta.stage, meta.seed))
    }
}
