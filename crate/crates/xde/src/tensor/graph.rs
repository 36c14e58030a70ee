//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! A [`Graph`] owns a topologically ordered arena of nodes; building an op
//! appends a node holding the forward value, and [`Graph::backward`] walks
//! the arena once in reverse, accumulating gradients additively across
//! fan-out. Graphs are built fresh for every forward pass; parameters live
//! outside the graph and are bound as leaves.
//!
//! Binary ops support two shape patterns: identical shapes, and
//! scalar-against-tensor. Anything else is a shape error.

use super::conv;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Padding semantics for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Pad with zeros (learned layers).
    Zero,
    /// Repeat the border pixel (analytic filters, avoids fabricated edges).
    Replicate,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Clamp(Var, f32, f32),
    AddScalar(Var, f32),
    MulScalar(Var, f32),
    ConcatChannels(Vec<Var>),
    /// `[N,C,H,W] + [C]`, bias broadcast over batch and space.
    BiasAdd(Var, Var),
    Mean(Var),
    Sum(Var),
    /// `[N,C,H,W] -> [N,C,1,1]`, mean over the spatial dims.
    SpatialMean(Var),
    /// Log-softmax over the channel dim of `[N,C,H,W]`.
    LogSoftmaxChannels(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    },
    BilinearUpsample(Var, usize),
    NearestUpsample(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A tape of op nodes for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf. Gradients accumulate into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Re-insert a node's current value as a constant, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- shape helpers -------------------------------------------------

    fn binary_shapes(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<Vec<usize>> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.nodes[b.0].value.numel() == 1 {
            Ok(sa.to_vec())
        } else if self.nodes[a.0].value.numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            })
        }
    }

    fn zip_broadcast(
        &self,
        a: Var,
        b: Var,
        shape: &[usize],
        f: impl Fn(f32, f32) -> f32,
    ) -> Tensor {
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        match (da.len(), db.len()) {
            (1, _) if db.len() == numel => {
                let x = da[0];
                out.extend(db.iter().map(|&y| f(x, y)));
            }
            (_, 1) if da.len() == numel => {
                let y = db[0];
                out.extend(da.iter().map(|&x| f(x, y)));
            }
            _ => out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y))),
        }
        Tensor::new(shape.to_vec(), out).expect("broadcast shape accounted")
    }

    // ---- elementwise ops -----------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let value = self.zip_broadcast(a, b, &shape, |x, y| x + y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let value = self.zip_broadcast(a, b, &shape, |x, y| x - y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let value = self.zip_broadcast(a, b, &shape, |x, y| x * y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("div", a, b)?;
        let value = self.zip_broadcast(a, b, &shape, |x, y| x / y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::exp);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::ln);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::sqrt);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Sqrt(a), rg)
    }

    /// Absolute value. The backward at exactly 0 uses subgradient 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::abs);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Abs(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self.nodes[a.0]
            .value
            .map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(stable_sigmoid);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Clamp into `[lo, hi]`; gradient is 1 strictly inside, 0 at and
    /// beyond the bounds.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::AddScalar(a, c), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::MulScalar(a, c), rg)
    }

    /// `a * mul + add`, elementwise with constants.
    pub fn affine(&mut self, a: Var, mul: f32, add: f32) -> Var {
        let scaled = self.mul_scalar(a, mul);
        self.add_scalar(scaled, add)
    }

    // ---- structural ops --------------------------------------------------

    /// Concatenate `[N,C_i,H,W]` tensors along the channel dim.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels of zero tensors"));
        }
        let (n, _, h, w) = self.nodes[parts[0].0].value.dims4()?;
        let mut channels = 0usize;
        for &p in parts {
            let (pn, pc, ph, pw) = self.nodes[p.0].value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    expected: vec![n, 0, h, w],
                    got: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            channels += pc;
        }
        let mut out = vec![0.0f32; n * channels * h * w];
        let plane = h * w;
        for ni in 0..n {
            let mut c_off = 0usize;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let pc = t.shape()[1];
                let src = &t.data()[ni * pc * plane..(ni + 1) * pc * plane];
                let dst_start = ni * channels * plane + c_off * plane;
                out[dst_start..dst_start + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], out)?;
        let rg = self.any_requires(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Add a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        if self.nodes[bias.0].value.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                expected: vec![c],
                got: self.nodes[bias.0].value.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = self.nodes[x.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data();
        for ni in 0..n {
            for ci in 0..c {
                let start = (ni * c + ci) * plane;
                let bv = b[ci];
                for v in &mut out[start..start + plane] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.any_requires(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd(x, bias), rg))
    }

    // ---- reductions ------------------------------------------------------

    /// Mean over all elements, accumulated in f64. Returns a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.mean() as f32);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum over all elements, accumulated in f64. Returns a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| f64::from(x))
            .sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    /// Mean over H and W of `[N,C,H,W]`, keeping `[N,C,1,1]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
        let plane = (h * w) as f64;
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let s: f64 = data[nc * h * w..(nc + 1) * h * w]
                .iter()
                .map(|&x| f64::from(x))
                .sum();
            out.push((s / plane) as f32);
        }
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::SpatialMean(a), rg))
    }

    /// Log-softmax over the channel dim of `[N,C,H,W]`.
    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
        let data = self.nodes[a.0].value.data();
        let plane = h * w;
        let mut out = vec![0.0f32; data.len()];
        for ni in 0..n {
            for p in 0..plane {
                let mut m = f32::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(data[(ni * c + ci) * plane + p]);
                }
                let mut lse = 0.0f64;
                for ci in 0..c {
                    lse += f64::from((data[(ni * c + ci) * plane + p] - m).exp());
                }
                let lse = m + lse.ln() as f32;
                for ci in 0..c {
                    let idx = (ni * c + ci) * plane + p;
                    out[idx] = data[idx] - lse;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::LogSoftmaxChannels(a), rg))
    }

    // ---- spatial ops -----------------------------------------------------

    /// 2D convolution of `[N,Ci,H,W]` with `[Co,Ci,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let value = conv::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            stride,
            padding,
            pad_mode,
        )?;
        let rg = self.any_requires(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                pad_mode,
            },
            rg,
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel alignment).
    pub fn bilinear_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("bilinear_upsample factor must be >= 1"));
        }
        let value = conv::bilinear_forward(&self.nodes[a.0].value, factor)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::BilinearUpsample(a, factor), rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn nearest_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("nearest_upsample factor must be >= 1"));
        }
        let value = conv::nearest_forward(&self.nodes[a.0].value, factor)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::NearestUpsample(a, factor), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar loss, populating the grad buffers of all
    /// reachable nodes that require gradients. Visits each node exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::precondition(
                "loss is not connected to any tensor that requires gradients",
            ));
        }
        let seed = Tensor::filled(self.nodes[loss.0].value.shape(), 1.0);
        self.accumulate(loss, seed);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gy = self.nodes[id].grad.clone().expect("checked above");
            let op = self.nodes[id].op.clone();
            self.backward_node(id, &op, &gy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), contribution.shape());
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reduce a same-shape gradient to the scalar side of a broadcast.
    fn reduce_for(&self, v: Var, grad: &Tensor) -> Tensor {
        let target = &self.nodes[v.0].value;
        if target.shape() == grad.shape() {
            grad.clone()
        } else {
            debug_assert_eq!(target.numel(), 1);
            let s: f64 = grad.data().iter().map(|&x| f64::from(x)).sum();
            let mut t = Tensor::zeros(target.shape());
            t.data_mut()[0] = s as f32;
            t
        }
    }

    fn backward_node(&mut self, id: usize, op: &Op, gy: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.reduce_for(a, gy);
                self.accumulate(a, ga);
                let gb = self.reduce_for(b, gy);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_for(a, gy);
                self.accumulate(a, ga);
                let neg = gy.map(|x| -x);
                let gb = self.reduce_for(b, &neg);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let full = self.nodes[id].value.shape().to_vec();
                let ga_full = self.zip_grad(b, gy, &full);
                let ga = self.reduce_for(a, &ga_full);
                self.accumulate(a, ga);
                let gb_full = self.zip_grad(a, gy, &full);
                let gb = self.reduce_for(b, &gb_full);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                let full = self.nodes[id].value.shape().to_vec();
                let numel: usize = full.iter().product();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let gyd = gy.data();
                let pick = |d: &[f32], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let mut ga_full = Vec::with_capacity(numel);
                let mut gb_full = Vec::with_capacity(numel);
                for i in 0..numel {
                    let x = pick(av, i);
                    let y = pick(bv, i);
                    ga_full.push(gyd[i] / y);
                    gb_full.push(-gyd[i] * x / (y * y));
                }
                let ga_full = Tensor::new(full.clone(), ga_full)?;
                let gb_full = Tensor::new(full, gb_full)?;
                let ga = self.reduce_for(a, &ga_full);
                self.accumulate(a, ga);
                let gb = self.reduce_for(b, &gb_full);
                self.accumulate(b, gb);
            }
            Op::Neg(a) => {
                let g = gy.map(|x| -x);
                self.accumulate(a, g);
            }
            Op::Exp(a) => {
                let out = self.nodes[id].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data().iter().zip(out).map(|(&g, &y)| g * y).collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data().iter().zip(x).map(|(&g, &x)| g / x).collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::Sqrt(a) => {
                let out = self.nodes[id].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| g * 0.5 / y)
                        .collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::Abs(a) => {
                let x = self.nodes[a.0].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a.0].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { slope * g })
                        .collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[id].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(a, g);
            }
            Op::AddScalar(a, _) => {
                self.accumulate(a, gy.clone());
            }
            Op::MulScalar(a, c) => {
                let g = gy.map(|x| x * c);
                self.accumulate(a, g);
            }
            Op::ConcatChannels(ref parts) => {
                let (n, channels, h, w) = self.nodes[id].value.dims4()?;
                let plane = h * w;
                let gyd = gy.data();
                let mut c_off = 0usize;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    let mut g = vec![0.0f32; n * pc * plane];
                    for ni in 0..n {
                        let src = ni * channels * plane + c_off * plane;
                        g[ni * pc * plane..(ni + 1) * pc * plane]
                            .copy_from_slice(&gyd[src..src + pc * plane]);
                    }
                    let g = Tensor::new(vec![n, pc, h, w], g)?;
                    self.accumulate(p, g);
                    c_off += pc;
                }
            }
            Op::BiasAdd(x, bias) => {
                self.accumulate(x, gy.clone());
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let plane = h * w;
                let gyd = gy.data();
                let mut gb = vec![0.0f32; c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        let start = (ni * c + ci) * plane;
                        for &g in &gyd[start..start + plane] {
                            s += f64::from(g);
                        }
                    }
                    gb[ci] = s as f32;
                }
                self.accumulate(bias, Tensor::new(vec![c], gb)?);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f32;
                let g0 = gy.item()? / n;
                let g = Tensor::filled(self.nodes[a.0].value.shape(), g0);
                self.accumulate(a, g);
            }
            Op::Sum(a) => {
                let g = Tensor::filled(self.nodes[a.0].value.shape(), gy.item()?);
                self.accumulate(a, g);
            }
            Op::SpatialMean(a) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
                let plane = h * w;
                let gyd = gy.data();
                let mut g = vec![0.0f32; n * c * plane];
                for nc in 0..n * c {
                    let gv = gyd[nc] / plane as f32;
                    for v in &mut g[nc * plane..(nc + 1) * plane] {
                        *v = gv;
                    }
                }
                self.accumulate(a, Tensor::new(vec![n, c, h, w], g)?);
            }
            Op::LogSoftmaxChannels(a) => {
                // dx = gy - softmax(x) * sum_c(gy)
                let (n, c, h, w) = self.nodes[id].value.dims4()?;
                let plane = h * w;
                let out = self.nodes[id].value.data();
                let gyd = gy.data();
                let mut g = vec![0.0f32; out.len()];
                for ni in 0..n {
                    for p in 0..plane {
                        let mut gsum = 0.0f64;
                        for ci in 0..c {
                            gsum += f64::from(gyd[(ni * c + ci) * plane + p]);
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * plane + p;
                            g[idx] = gyd[idx] - out[idx].exp() * gsum as f32;
                        }
                    }
                }
                self.accumulate(a, Tensor::new(vec![n, c, h, w], g)?);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                pad_mode,
            } => {
                let needs_input = self.nodes[input.0].requires_grad;
                let needs_kernel = self.nodes[kernel.0].requires_grad;
                let (gi, gk) = conv::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    stride,
                    padding,
                    pad_mode,
                    gy,
                    needs_input,
                    needs_kernel,
                )?;
                if let Some(gi) = gi {
                    self.accumulate(input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(kernel, gk);
                }
            }
            Op::BilinearUpsample(a, factor) => {
                let g = conv::bilinear_backward(&self.nodes[a.0].value, factor, gy)?;
                self.accumulate(a, g);
            }
            Op::NearestUpsample(a, factor) => {
                let g = conv::nearest_backward(&self.nodes[a.0].value, factor, gy)?;
                self.accumulate(a, g);
            }
        }
        Ok(())
    }

    /// Elementwise `value(of) * gy`, broadcasting the scalar side of `of`.
    fn zip_grad(&self, of: Var, gy: &Tensor, full: &[usize]) -> Tensor {
        let d = self.nodes[of.0].value.data();
        let numel: usize = full.iter().product();
        let gyd = gy.data();
        let mut out = Vec::with_capacity(numel);
        if d.len() == 1 {
            out.extend(gyd.iter().map(|&g| g * d[0]));
        } else {
            out.extend(gyd.iter().zip(d).map(|(&g, &x)| g * x));
        }
        Tensor::new(full.to_vec(), out).expect("shapes checked in forward")
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{
        check_gradients, random_tensor, random_tensor_away_from_zero, DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    };
    use crate::rng::stream;
    use rand::Rng;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    // ---- forward semantics -------------------------------------------------

    #[test]
    fn exp_of_zero_is_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.exp(x);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv2d_scalar_kernel_scales_input() {
        // 1x1x3x3 ones, 1x1x1x1 kernel of 2 -> 3x3 map of 2s.
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::filled(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, k, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_mean_kernel_preserves_constants_with_replicate_padding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 5, 5], 0.37));
        let k = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, k, 1, 1, PadMode::Replicate).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| close(v, 0.37, 1e-6)));
    }

    /// Brute-force convolution oracle: direct nested loops over the output,
    /// independent of the im2col/GEMM path.
    fn conv_oracle(
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Tensor {
        let (n, ci, h, w) = input.dims4().unwrap();
        let (co, _, kh, kw) = kernel.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; n * co * ho * wo];
        let fetch = |ni: usize, c: usize, y: isize, x: isize| -> f32 {
            let (yy, xx) = match mode {
                PadMode::Zero => {
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        return 0.0;
                    }
                    (y as usize, x as usize)
                }
                PadMode::Replicate => (
                    y.clamp(0, h as isize - 1) as usize,
                    x.clamp(0, w as isize - 1) as usize,
                ),
            };
            input.data()[((ni * ci + c) * h + yy) * w + xx]
        };
        for ni in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ic in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let x = (ox * stride + kx) as isize - pad as isize;
                                    let kv =
                                        kernel.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                    acc += f64::from(fetch(ni, ic, y, x)) * f64::from(kv);
                                }
                            }
                        }
                        out[((ni * co + oc) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        Tensor::new(vec![n, co, ho, wo], out).unwrap()
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = stream(7, "test/conv-oracle");
        for (stride, pad, mode) in [
            (1usize, 0usize, PadMode::Zero),
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 1, PadMode::Replicate),
            (2, 2, PadMode::Replicate),
        ] {
            let input = random_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
            let kernel = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let k = g.constant(kernel.clone());
            let y = g.conv2d(x, k, stride, pad, mode).unwrap();
            let expect = conv_oracle(&input, &kernel, stride, pad, mode);
            assert_eq!(g.value(y).shape(), expect.shape());
            for (a, b) in g.value(y).data().iter().zip(expect.data()) {
                assert!(close(*a, *b, 1e-4), "{a} vs {b} (stride {stride} pad {pad})");
            }
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let err = g.conv2d(x, k, 1, 0, PadMode::Zero).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 1, 2, 2]") && msg.contains("[1, 1, 5, 5]"), "{msg}");
    }

    #[test]
    fn bilinear_constant_and_identity_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 2, 2], 0.7));
        let up = g.bilinear_upsample(x, 2).unwrap();
        assert_eq!(g.value(up).shape(), &[1, 1, 4, 4]);
        assert!(g.value(up).data().iter().all(|&v| close(v, 0.7, 1e-6)));

        let ramp = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let x1 = g.constant(ramp.clone());
        let same = g.bilinear_upsample(x1, 1).unwrap();
        assert_eq!(g.value(same).data(), ramp.data());

        assert!(g.bilinear_upsample(x1, 0).is_err());
    }

    #[test]
    fn bilinear_matches_per_pixel_interpolation_oracle() {
        // Independent oracle: evaluate the half-pixel interpolation formula
        // directly for every output pixel of a 2x2 ramp upsampled by 2.
        let src = [0.1f32, 0.9, 0.4, 0.6];
        let ramp = Tensor::new(vec![1, 1, 2, 2], src.to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(ramp);
        let y = g.bilinear_upsample(x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let map = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let (sy, sx) = (map(oy), map(ox));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |r: usize, c: usize| f64::from(src[r * 2 + c]);
                let expect = (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
                    + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1));
                let got = f64::from(g.value(y).data()[oy * 4 + ox]);
                assert!((got - expect).abs() < 1e-6, "({oy},{ox}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn abs_backward_uses_zero_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3], vec![2.0, -3.0, 0.0]).unwrap(),
            true,
        );
        let y = g.abs(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn backward_of_parameter_sum_is_all_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![4], vec![0.3, -0.1, 2.0, 5.0]).unwrap(), true);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_squared_norm_is_the_parameter() {
        let mut g = Graph::new();
        let data = vec![0.5f32, -1.5, 2.5];
        let p = g.leaf(Tensor::new(vec![3], data.clone()).unwrap(), true);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let half = g.mul_scalar(s, 0.5);
        g.backward(half).unwrap();
        for (got, want) in g.grad(p).unwrap().data().iter().zip(&data) {
            assert!(close(*got, *want, 1e-6));
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.exp(p);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn fanout_gradients_accumulate_exactly_twice() {
        let run = |doubled: bool| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![3], vec![0.3, 1.2, -0.7]).unwrap(), true);
            let f = {
                let e = g.exp(x);
                let m = g.mul(e, x).unwrap();
                g.sum(m)
            };
            let loss = if doubled { g.add(f, f).unwrap() } else { f };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };
        let single = run(false);
        let double = run(true);
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(d.to_bits(), (2.0 * s).to_bits());
        }
    }

    #[test]
    fn incompatible_shapes_are_sized_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
        assert!(err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut rng = stream(99, "test/determinism");
            let x = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
            let k = random_tensor(&mut rng, &[2, 3, 3, 3], -0.3, 0.3);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let kv = g.constant(k);
            let c = g.conv2d(xv, kv, 1, 1, PadMode::Zero).unwrap();
            let a = g.leaky_relu(c, 0.1);
            let m = g.mean(a);
            g.value(m).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    // ---- finite-difference sweeps ------------------------------------------

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = stream(11, "test/fd-elementwise");
        type BuildFn = fn(&mut Graph, Var) -> crate::error::Result<Var>;
        // (name, needs positive input, bounded away from 0, builder)
        let cases: Vec<(&str, bool, bool, BuildFn)> = vec![
            ("exp", false, false, |g, x| Ok(g.exp(x))),
            ("log", true, false, |g, x| Ok(g.log(x))),
            ("sqrt", true, false, |g, x| Ok(g.sqrt(x))),
            ("abs", false, true, |g, x| Ok(g.abs(x))),
            ("leaky_relu", false, true, |g, x| Ok(g.leaky_relu(x, 0.1))),
            ("sigmoid", false, false, |g, x| Ok(g.sigmoid(x))),
            ("neg", false, false, |g, x| Ok(g.neg(x))),
            ("affine", false, false, |g, x| Ok(g.affine(x, 1.7, -0.3))),
            ("clamp", false, true, |g, x| Ok(g.clamp(x, -2.5, 2.5))),
        ];
        for (name, positive, away, build) in cases {
            for trial in 0..12 {
                let x = if positive {
                    random_tensor(&mut rng, &[2, 12], 0.2, 2.0)
                } else if away {
                    random_tensor_away_from_zero(&mut rng, &[2, 12], 0.05, 2.0)
                } else {
                    random_tensor(&mut rng, &[2, 12], -2.0, 2.0)
                };
                let report = check_gradients(
                    &[x],
                    DEFAULT_STEP,
                    DEFAULT_TOLERANCE,
                    move |g, vars| build(g, vars[0]),
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "{name} trial {trial}: max rel err {:.2e}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut rng = stream(12, "test/fd-binary");
        for trial in 0..10 {
            let a = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
            let b = random_tensor_away_from_zero(&mut rng, &[3, 5], 0.3, 2.0);
            let scalar = random_tensor_away_from_zero(&mut rng, &[], 0.5, 1.5);
            for op in ["add", "sub", "mul", "div", "add_bcast", "mul_bcast"] {
                let inputs = if op.ends_with("bcast") {
                    vec![a.clone(), scalar.clone()]
                } else {
                    vec![a.clone(), b.clone()]
                };
                let report = check_gradients(
                    &inputs,
                    DEFAULT_STEP,
                    DEFAULT_TOLERANCE,
                    move |g, vars| match op {
                        "add" | "add_bcast" => g.add(vars[0], vars[1]),
                        "sub" => g.sub(vars[0], vars[1]),
                        "mul" | "mul_bcast" => g.mul(vars[0], vars[1]),
                        "div" => g.div(vars[0], vars[1]),
                        _ => unreachable!(),
                    },
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "{op} trial {trial}: max rel err {:.2e}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = stream(13, "test/fd-structural");
        for trial in 0..6 {
            // concat_channels + spatial_mean + bias_add + reductions
            let a = random_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
            let bias = random_tensor(&mut rng, &[3], -0.5, 0.5);
            let report = check_gradients(
                &[a.clone(), b.clone(), bias.clone()],
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                move |g, vars| {
                    let cat = g.concat_channels(&[vars[0], vars[1]])?;
                    let biased = g.bias_add(cat, vars[2])?;
                    g.spatial_mean(biased)
                },
            )
            .unwrap();
            assert!(
                report.passed(),
                "structural trial {trial}: max rel err {:.2e}",
                report.max_rel_err
            );

            let x = random_tensor(&mut rng, &[1, 3, 2, 2], -2.0, 2.0);
            let report = check_gradients(
                &[x],
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                |g, vars| g.log_softmax_channels(vars[0]),
            )
            .unwrap();
            assert!(
                report.passed(),
                "log_softmax trial {trial}: max rel err {:.2e}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn conv_and_upsample_gradients_match_finite_differences() {
        let mut rng = stream(14, "test/fd-conv");
        for (trial, &(stride, pad, mode)) in [
            (1usize, 1usize, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 2, PadMode::Replicate),
        ]
        .iter()
        .enumerate()
        {
            let x = random_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
            let k = random_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
            let report = check_gradients(
                &[x, k],
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                move |g, vars| g.conv2d(vars[0], vars[1], stride, pad, mode),
            )
            .unwrap();
            assert!(
                report.passed(),
                "conv trial {trial}: max rel err {:.2e}",
                report.max_rel_err
            );
        }

        for factor in [2usize, 3] {
            let x = random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
            for nearest in [false, true] {
                let x = x.clone();
                let report = check_gradients(
                    &[x],
                    DEFAULT_STEP,
                    DEFAULT_TOLERANCE,
                    move |g, vars| {
                        if nearest {
                            g.nearest_upsample(vars[0], factor)
                        } else {
                            g.bilinear_upsample(vars[0], factor)
                        }
                    },
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "upsample x{factor} nearest={nearest}: max rel err {:.2e}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn composite_expression_gradient_matches_finite_differences() {
        let mut rng = stream(15, "test/fd-composite");
        for trial in 0..8 {
            let x = random_tensor(&mut rng, &[1, 2, 4, 4], 0.1, 0.9);
            let k = random_tensor(&mut rng, &[2, 2, 3, 3], -0.4, 0.4);
            let report = check_gradients(
                &[x, k],
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                |g, vars| {
                    let c = g.conv2d(vars[0], vars[1], 1, 1, PadMode::Replicate)?;
                    let s = g.sigmoid(c);
                    let e = g.exp(s);
                    Ok(g.mean(e))
                },
            )
            .unwrap();
            assert!(
                report.passed(),
                "composite trial {trial}: max rel err {:.2e}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn random_three_layer_net_gradient_matches_finite_differences() {
        let mut rng = stream(16, "test/fd-net");
        let x = random_tensor(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let k1 = random_tensor(&mut rng, &[2, 1, 3, 3], -0.5, 0.5);
        let b1 = random_tensor(&mut rng, &[2], -0.1, 0.1);
        let k2 = random_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
        let b2 = random_tensor(&mut rng, &[2], -0.1, 0.1);
        let k3 = random_tensor(&mut rng, &[1, 2, 3, 3], -0.5, 0.5);
        let target = random_tensor(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let report = check_gradients(
            &[k1, b1, k2, b2, k3],
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            move |g, vars| {
                let xv = g.constant(x.clone());
                let c1 = g.conv2d(xv, vars[0], 1, 1, PadMode::Zero)?;
                let c1 = g.bias_add(c1, vars[1])?;
                let a1 = g.sigmoid(c1);
                let c2 = g.conv2d(a1, vars[2], 1, 1, PadMode::Zero)?;
                let c2 = g.bias_add(c2, vars[3])?;
                let a2 = g.sigmoid(c2);
                let c3 = g.conv2d(a2, vars[4], 1, 1, PadMode::Zero)?;
                let out = g.sigmoid(c3);
                let tv = g.constant(target.clone());
                let diff = g.sub(out, tv)?;
                let sq = g.mul(diff, diff)?;
                Ok(g.mean(sq))
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "3-layer net: max rel err {:.2e} over {} elements",
            report.max_rel_err,
            report.checked
        );
    }

    #[test]
    fn rng_sanity_gen_range_is_seeded() {
        let mut a = stream(3, "x");
        let mut b = stream(3, "x");
        assert_eq!(a.gen_range(0..100), b.gen_range(0..100));
    }
}
