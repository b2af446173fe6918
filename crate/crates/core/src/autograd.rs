//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node holding its value; [`Graph::backward`]
//! walks the tape once in reverse. One graph is built per sample.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::losses::{self, BbceReduction};
use crate::params::{ParamId, ParamStore};
use crate::ssf;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Resize(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ChannelScale {
        input: Var,
        gates: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Gram(Var),
    SelectChannels(Var, Vec<usize>),
    Reshape(Var),
    Bbce {
        pred: Var,
        grad: Vec<f64>,
    },
    Mae {
        pred: Var,
        grad: Vec<f64>,
    },
    BackgroundLoss {
        p_bg: Var,
        p_sd: Var,
        grad_bg: Vec<f64>,
        grad_sd: Vec<f64>,
    },
    PairLoss {
        a: Var,
        b: Var,
        grad_a: Vec<f64>,
        grad_b: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// A leaf that receives gradients (used for checking gradients of
    /// intermediate quantities).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// Parameter gradients after [`Graph::backward`]; parameters that did
    /// not take part in the graph are absent.
    pub fn param_grads<'g>(&self, grads: &'g Gradients) -> Vec<(ParamId, &'g Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.shape().len() != 3 || w.shape().len() != 4 {
            return Err(Error::InvalidInput(format!(
                "conv2d expects [C,H,W] input and [O,I,K,K] weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (c, h, wd) = x.dims3();
        let (o, gi, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if groups == 0 || c % groups != 0 || o % groups != 0 || gi * groups != c || w.shape()[3] != k {
            return Err(Error::InvalidInput(format!(
                "conv2d weight {:?} incompatible with input {:?} and groups {groups}",
                w.shape(),
                x.shape()
            )));
        }
        if h + 2 * padding < k || wd + 2 * padding < k || stride == 0 {
            return Err(Error::InvalidInput(format!(
                "conv2d kernel {k} does not fit input {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: wd,
            out_c: o,
            kernel: k,
            stride,
            padding,
            groups,
        };
        let b = bias.map(|b| self.value(b).data());
        if let Some(b) = b {
            if b.len() != o {
                return Err(Error::shape(&[o], &[b.len()]));
            }
        }
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b);
        let value = Tensor::from_vec(&[o, geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Swish(a), &[a])
    }

    /// Bilinear resize of a `[C, H, W]` grid.
    pub fn resize(&mut self, a: Var, height: usize, width: usize) -> Var {
        let x = self.value(a);
        let dims = x.dims3();
        if (dims.1, dims.2) == (height, width) {
            return a;
        }
        let out = kernels::resize_bilinear(x.data(), dims, (height, width));
        let v = Tensor::from_vec(&[dims.0, height, width], out).expect("resize shape");
        self.push(v, Op::Resize(a), &[a])
    }

    /// Channel concatenation of equally sized `[C_i, H, W]` grids.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let (_, h, w) = self.value(*first).dims3();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.dims3();
            if (ph, pw) != (h, w) {
                return Err(Error::shape(&[c, h, w], t.shape()));
            }
            channels += c;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&[channels, h, w], data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (c, h, w) = x.dims3();
        let n = (h * w) as f64;
        let data = (0..c).map(|ch| x.channel(ch).iter().sum::<f64>() / n).collect();
        let v = Tensor::from_vec(&[c], data).expect("pool shape");
        self.push(v, Op::GlobalAvgPool(a), &[a])
    }

    /// `W·x + b` with `W` stored as `[out, in]`; `x` is flattened.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if w.shape().len() != 2 || w.shape()[1] != x.numel() {
            return Err(Error::InvalidInput(format!(
                "linear weight {:?} cannot take an input of {} values",
                w.shape(),
                x.numel()
            )));
        }
        let out_dim = w.shape()[0];
        let mut y = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.numel() != out_dim {
                    return Err(Error::shape(&[out_dim], b.shape()));
                }
                b.data().to_vec()
            }
            None => vec![0.0; out_dim],
        };
        kernels::gemm(out_dim, x.numel(), 1, w.data(), false, x.data(), false, 1.0, &mut y);
        let v = Tensor::from_vec(&[out_dim], y)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            v,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &parents,
        ))
    }

    /// Multiplies channel `c` of a `[C, H, W]` grid by `gates[c]`.
    pub fn channel_scale(&mut self, input: Var, gates: Var) -> Result<Var> {
        let x = self.value(input);
        let g = self.value(gates);
        let (c, h, w) = x.dims3();
        if g.numel() != c {
            return Err(Error::shape(&[c], g.shape()));
        }
        let mut data = x.data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            let k = g.data()[ch];
            plane.iter_mut().for_each(|v| *v *= k);
        }
        let v = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(v, Op::ChannelScale { input, gates }, &[input, gates]))
    }

    /// Batch normalisation with frozen running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::InvalidInput(format!(
                "batch norm over {c} channels given mismatched statistics"
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = x.data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            let k = g[ch] * inv_std[ch];
            for v in plane {
                *v = (*v - mean[ch]) * k + b[ch];
            }
        }
        let v = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                mean: mean.to_vec(),
            },
            &[input, gamma, beta],
        ))
    }

    /// Channel Gram matrix `M[x][y] = <F_x, F_y>` of a `[C, H, W]` grid.
    pub fn gram(&mut self, a: Var) -> Var {
        let m = ssf::gram_raw(self.value(a));
        self.push(m, Op::Gram(a), &[a])
    }

    /// Keeps the listed channels of a `[C, H, W]` grid, in order.
    pub fn select_channels(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (c, h, w) = x.dims3();
        if indices.len() == c && indices.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(a);
        }
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            if i >= c {
                return Err(Error::InvalidInput(format!("channel {i} out of range for {c}")));
            }
            data.extend_from_slice(x.channel(i));
        }
        let v = Tensor::from_vec(&[indices.len(), h, w], data)?;
        Ok(self.push(v, Op::SelectChannels(a, indices.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn bbce(&mut self, pred: Var, gt: &[f64], eps: f64, reduction: BbceReduction) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != gt.len() {
            return Err(Error::shape(&[gt.len()], p.shape()));
        }
        let (loss, grad) = losses::bbce_raw(p.data(), gt, eps, reduction);
        Ok(self.push(Tensor::scalar(loss), Op::Bbce { pred, grad }, &[pred]))
    }

    pub fn mae(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::shape(&[target.len()], p.shape()));
        }
        let (loss, grad) = losses::mae_raw(p.data(), target);
        Ok(self.push(Tensor::scalar(loss), Op::Mae { pred, grad }, &[pred]))
    }

    /// Masked background loss; `masked_target` is `image ⊗ (1 − gt)`.
    pub fn background_loss(&mut self, p_bg: Var, p_sd: Var, masked_target: &[f64]) -> Result<Var> {
        let (bg, sd) = (self.value(p_bg), self.value(p_sd));
        if bg.numel() != masked_target.len() || bg.numel() != 3 * sd.numel() {
            return Err(Error::InvalidInput(format!(
                "background loss shapes disagree: p_bg {:?}, p_sd {:?}, target {}",
                bg.shape(),
                sd.shape(),
                masked_target.len()
            )));
        }
        let (loss, grad_bg, grad_sd) = losses::background_raw(bg.data(), sd.data(), masked_target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BackgroundLoss {
                p_bg,
                p_sd,
                grad_bg,
                grad_sd,
            },
            &[p_bg, p_sd],
        ))
    }

    /// `1 − cos(a, b)`.
    pub fn consistency_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::shape(x.shape(), y.shape()));
        }
        let (loss, grad_a, grad_b) = ssf::consistency_raw(x.data(), y.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PairLoss {
                a,
                b,
                grad_a,
                grad_b,
            },
            &[a, b],
        ))
    }

    /// `(a·b)² / C²`.
    pub fn differentiate_loss(&mut self, a: Var, b: Var, channels: usize) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::shape(x.shape(), y.shape()));
        }
        let (loss, grad_a, grad_b) = ssf::differentiate_raw(x.data(), y.data(), channels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PairLoss {
                a,
                b,
                grad_a,
                grad_b,
            },
            &[a, b],
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) {
        if !self.needs(var) {
            return;
        }
        let t = Tensor::from_vec(self.shape(var), delta).expect("gradient shape");
        self.accumulate(grads, var, t);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    need,
                );
                if let Some(d) = cg.input {
                    self.accumulate_vec(grads, *input, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate_vec(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    self.accumulate_vec(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Swish(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Resize(a) => {
                let dims = self.value(*a).dims3();
                let (_, oh, ow) = node.value.dims3();
                let d = kernels::resize_bilinear_backward(g.data(), dims, (oh, ow));
                self.accumulate_vec(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        self.accumulate_vec(grads, p, g.data()[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GlobalAvgPool(a) => {
                let (c, h, w) = self.value(*a).dims3();
                let n = h * w;
                let mut d = vec![0.0; c * n];
                for (ch, plane) in d.chunks_mut(n).enumerate() {
                    plane.fill(g.data()[ch] / n as f64);
                }
                self.accumulate_vec(grads, *a, d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                if self.needs(*input) {
                    let mut dx = vec![0.0; in_dim];
                    kernels::gemm(in_dim, out_dim, 1, w.data(), true, g.data(), false, 0.0, &mut dx);
                    self.accumulate_vec(grads, *input, dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    kernels::gemm(out_dim, 1, in_dim, g.data(), false, x.data(), false, 0.0, &mut dw);
                    self.accumulate_vec(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    self.accumulate_vec(grads, *b, g.data().to_vec());
                }
            }
            Op::ChannelScale { input, gates } => {
                let x = self.value(*input);
                let gate = self.value(*gates);
                let (_, h, w) = x.dims3();
                let n = h * w;
                if self.needs(*input) {
                    let mut d = g.data().to_vec();
                    for (ch, plane) in d.chunks_mut(n).enumerate() {
                        let k = gate.data()[ch];
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate_vec(grads, *input, d);
                }
                if self.needs(*gates) {
                    let d = g
                        .data()
                        .chunks(n)
                        .zip(x.data().chunks(n))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate_vec(grads, *gates, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                mean,
            } => {
                let x = self.value(*input);
                let gm = self.value(*gamma).data();
                let (_, h, w) = x.dims3();
                let n = h * w;
                if self.needs(*input) {
                    let mut d = g.data().to_vec();
                    for (ch, plane) in d.chunks_mut(n).enumerate() {
                        let k = gm[ch] * inv_std[ch];
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate_vec(grads, *input, d);
                }
                let (mut dg, mut db) = (Vec::new(), Vec::new());
                for (ch, (gp, xp)) in g.data().chunks(n).zip(x.data().chunks(n)).enumerate() {
                    dg.push(
                        gp.iter()
                            .zip(xp)
                            .map(|(a, b)| a * (b - mean[ch]) * inv_std[ch])
                            .sum(),
                    );
                    db.push(gp.iter().sum());
                }
                self.accumulate_vec(grads, *gamma, dg);
                self.accumulate_vec(grads, *beta, db);
            }
            Op::Gram(a) => {
                let f = self.value(*a);
                let (c, h, w) = f.dims3();
                let n = h * w;
                let sym: Vec<f64> = (0..c * c)
                    .map(|i| g.data()[i] + g.data()[(i % c) * c + i / c])
                    .collect();
                let mut d = vec![0.0; c * n];
                kernels::gemm(c, c, n, &sym, false, f.data(), false, 0.0, &mut d);
                self.accumulate_vec(grads, *a, d);
            }
            Op::SelectChannels(a, indices) => {
                let (c, h, w) = self.value(*a).dims3();
                let n = h * w;
                let mut d = vec![0.0; c * n];
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in d[i * n..(i + 1) * n].iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                        *dst += src;
                    }
                }
                self.accumulate_vec(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate_vec(grads, *a, g.data().to_vec()),
            Op::Bbce { pred, grad } | Op::Mae { pred, grad } => {
                let k = g.item();
                self.accumulate_vec(grads, *pred, grad.iter().map(|x| x * k).collect());
            }
            Op::BackgroundLoss {
                p_bg,
                p_sd,
                grad_bg,
                grad_sd,
            } => {
                let k = g.item();
                self.accumulate_vec(grads, *p_bg, grad_bg.iter().map(|x| x * k).collect());
                self.accumulate_vec(grads, *p_sd, grad_sd.iter().map(|x| x * k).collect());
            }
            Op::PairLoss {
                a,
                b,
                grad_a,
                grad_b,
            } => {
                let k = g.item();
                self.accumulate_vec(grads, *a, grad_a.iter().map(|x| x * k).collect());
                self.accumulate_vec(grads, *b, grad_b.iter().map(|x| x * k).collect());
            }
            Op::WeightedSum(terms) => {
                let k = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(w * k));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
