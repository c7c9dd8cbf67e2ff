use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` inside the loss.
pub const BCE_EPSILON: f64 = 1e-7;
/// Added to the variance before normalizing.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by the supplied running statistics.
    Inference,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Conv1d {
        seq: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    MaxOverTime {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        inputs: Vec<Var>,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Row {
        input: Var,
        index: usize,
    },
    Concat(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Bce {
        p: Var,
        label: f64,
    },
    Mean(Vec<Var>),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Embedding {
        table: ParamId,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every parent index is smaller
/// than its child's and reverse index order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    skip_param_grads: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass leaves parameter gradients alone and only
    /// differentiates with respect to inputs and intermediate nodes.
    pub fn inputs_only() -> Self {
        Self {
            skip_param_grads: true,
            ..Self::default()
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input tensor; `requires_grad` makes its gradient available.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), !self.skip_param_grads);
        self.params.insert(id, v);
        v
    }

    /// `out[i] = Σ_j w[i][j]·x[j] + b[i]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("dense", ws, xs));
        }
        if bs != [ws[0]] {
            return Err(shape_err("dense bias", bs, &ws[..1]));
        }
        let (m, n) = (ws[0], ws[1]);
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                bv[i] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::vector(out), Op::Dense { x, w, b }, needs))
    }

    /// Cross-correlation of an `H×W×C_in` input with `K×K×C_in×C_out` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        if is.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != is[2] {
            return Err(shape_err("conv2d", &is, &ks));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d: stride must be positive"));
        }
        let (h, w, cin) = (is[0], is[1], is[2]);
        let (k, cout) = (ks[0], ks[3]);
        if k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d bias", self.value(b).shape(), &[cout]));
            }
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let x = self.value(input).data();
        let kv = self.value(kernels).data();
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = (oy * wo + ox) * cout;
                let acc = &mut out[obase..obase + cout];
                if let Some(b) = bias {
                    acc.copy_from_slice(self.nodes[b.0].value.data());
                }
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    if iy < padding || iy - padding >= h {
                        continue;
                    }
                    let iy = iy - padding;
                    for kx in 0..k {
                        let ix = ox * stride + kx;
                        if ix < padding || ix - padding >= w {
                            continue;
                        }
                        let ix = ix - padding;
                        let ibase = (iy * w + ix) * cin;
                        let kbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = x[ibase + ci];
                            let krow = &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (a, kw) in acc.iter_mut().zip(krow) {
                                *a += v * kw;
                            }
                        }
                    }
                }
            }
        }
        let mut parents = vec![input, kernels];
        parents.extend(bias);
        let needs = self.needs(&parents);
        Ok(self.push(
            Tensor::new(vec![ho, wo, cout], out)?,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Valid 1-D convolution of an `L×D` sequence with a `width×D×filters` kernel.
    pub fn conv1d(&mut self, seq: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let ss = self.value(seq).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if ss.len() != 2 || ks.len() != 3 || ks[1] != ss[1] {
            return Err(shape_err("conv1d", &ss, &ks));
        }
        let (l, d) = (ss[0], ss[1]);
        let (width, filters) = (ks[0], ks[2]);
        if width == 0 || l < width {
            return Err(Error::dim(format!(
                "conv1d: sequence length {l} shorter than kernel width {width}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [filters] {
                return Err(shape_err("conv1d bias", self.value(b).shape(), &[filters]));
            }
        }
        let t_out = l - width + 1;
        let x = self.value(seq).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; t_out * filters];
        for t in 0..t_out {
            let acc = &mut out[t * filters..(t + 1) * filters];
            if let Some(b) = bias {
                acc.copy_from_slice(self.nodes[b.0].value.data());
            }
            for j in 0..width {
                for dd in 0..d {
                    let v = x[(t + j) * d + dd];
                    let kbase = (j * d + dd) * filters;
                    for (a, kw) in acc.iter_mut().zip(&kv[kbase..kbase + filters]) {
                        *a += v * kw;
                    }
                }
            }
        }
        let mut parents = vec![seq, kernel];
        parents.extend(bias);
        let needs = self.needs(&parents);
        Ok(self.push(
            Tensor::new(vec![t_out, filters], out)?,
            Op::Conv1d { seq, kernel, bias },
            needs,
        ))
    }

    /// Per-column maximum of a `T×F` map; ties resolve to the lowest `t`.
    pub fn max_over_time(&mut self, featmap: Var) -> Result<Var> {
        let s = self.value(featmap).shape().to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim(format!(
                "max_over_time: need a non-empty T×F map, got {s:?}"
            )));
        }
        let (t, f) = (s[0], s[1]);
        let x = self.value(featmap).data();
        let mut out = vec![f64::NEG_INFINITY; f];
        let mut argmax = vec![0; f];
        for ti in 0..t {
            for fi in 0..f {
                let v = x[ti * f + fi];
                if v > out[fi] {
                    out[fi] = v;
                    argmax[fi] = ti;
                }
            }
        }
        let needs = self.needs(&[featmap]);
        Ok(self.push(
            Tensor::vector(out),
            Op::MaxOverTime {
                input: featmap,
                argmax,
            },
            needs,
        ))
    }

    /// Windowed per-channel maximum over an `H×W×C` input.
    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("max_pool2d: need H×W×C, got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if window == 0 || stride == 0 {
            return Err(Error::usage("max_pool2d: window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::dim(format!(
                "max_pool2d: window {window} exceeds extent {h}x{w}"
            )));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![f64::NEG_INFINITY; ho * wo * c];
        let mut argmax = vec![0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = (oy * wo + ox) * c;
                for wy in 0..window {
                    for wx in 0..window {
                        let ibase = ((oy * stride + wy) * w + ox * stride + wx) * c;
                        for ch in 0..c {
                            let v = x[ibase + ch];
                            if v > out[obase + ch] {
                                out[obase + ch] = v;
                                argmax[obase + ch] = ibase + ch;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![ho, wo, c], out)?,
            Op::MaxPool2d { input, argmax },
            needs,
        ))
    }

    /// Mean over the spatial axes of an `H×W×C` map, giving a length-`C` vector.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 || s[0] * s[1] == 0 {
            return Err(Error::dim(format!("global_avg_pool: need H×W×C, got {s:?}")));
        }
        let c = s[2];
        let n = (s[0] * s[1]) as f64;
        let mut out = vec![0.0; c];
        for px in self.value(input).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool(input), needs))
    }

    /// Batch normalization over `inputs` (one rank-1 feature vector per
    /// sample). Returns an `N×F` node; use [`Tape::row`] to split it.
    pub fn batch_norm(
        &mut self,
        inputs: &[Var],
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::usage("batch_norm: empty batch"));
        }
        let f = self.value(inputs[0]).len();
        for &v in inputs {
            if self.value(v).shape() != [f] {
                return Err(shape_err("batch_norm", self.value(v).shape(), &[f]));
            }
        }
        for (what, t) in [("gamma", gamma), ("beta", beta)] {
            if self.value(t).shape() != [f] {
                return Err(shape_err(
                    &format!("batch_norm {what}"),
                    self.value(t).shape(),
                    &[f],
                ));
            }
        }
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::dim("batch_norm: running statistics length"));
        }
        let n = inputs.len();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; f];
                for &v in inputs {
                    for (m, x) in mean.iter_mut().zip(self.value(v).data()) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for &v in inputs {
                    for ((s, x), m) in var.iter_mut().zip(self.value(v).data()).zip(&mean) {
                        *s += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            BnMode::Inference => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * f);
        let mut out = Vec::with_capacity(n * f);
        for &v in inputs {
            for (j, x) in self.value(v).data().iter().enumerate() {
                let xh = (x - mean[j]) * inv_std[j];
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let mut parents = inputs.to_vec();
        parents.extend([gamma, beta]);
        let needs = self.needs(&parents);
        Ok(self.push(
            Tensor::new(vec![n, f], out)?,
            Op::BatchNorm {
                inputs: inputs.to_vec(),
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
            needs,
        ))
    }

    /// Batch mean and (biased) variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, var: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[var.0].op {
            Op::BatchNorm {
                mode: BnMode::Train,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Row `index` of an `N×F` node as a length-`F` vector.
    pub fn row(&mut self, input: Var, index: usize) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::dim(format!("row {index} of shape {s:?}")));
        }
        let f = s[1];
        let data = self.value(input).data()[index * f..(index + 1) * f].to_vec();
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::vector(data), Op::Row { input, index }, needs))
    }

    /// `a ⧺ b` for rank-1 feature vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(shape_err("concat (flat inputs required)", sa, sb));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::vector(data), Op::Concat(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// Binary cross-entropy of a single probability against a 0/1 label.
    pub fn bce_loss(&mut self, p: Var, label: f64) -> Result<Var> {
        if label != 0.0 && label != 1.0 {
            return Err(Error::usage(format!("bce_loss: label {label} not in {{0,1}}")));
        }
        let pv = self.value(p).item()?;
        let pc = pv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        let needs = self.needs(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, label }, needs))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::usage("mean of no values"));
        }
        let mut total = 0.0;
        for &x in xs {
            total += self.value(x).item()?;
        }
        let needs = self.needs(xs);
        Ok(self.push(
            Tensor::scalar(total / xs.len() as f64),
            Op::Mean(xs.to_vec()),
            needs,
        ))
    }

    /// Sum of every element.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// `Σ_i x_i·weights_i` with constant weights, any shape of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} weights for shape {:?}",
                weights.len(),
                self.value(x).shape()
            )));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// Gathers rows of a `V×D` parameter table. Row 0 is padding: it reads
    /// as stored and never receives gradient.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = store.value(table);
        if t.rank() != 2 {
            return Err(Error::dim(format!("embedding table shape {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Lookup(format!("token id {id} outside vocabulary of {v}")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated (`+=`) into `store`; gradients of
    /// every reachable node are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads, store)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.grad_mut(*id).add_assign(g)?,
            Op::Dense { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (m, n) = (gd.len(), xv.len());
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[j] += wv[i * n + j] * gd[i];
                        }
                    }
                    accumulate(grads, *x, &[n], &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dw[i * n + j] = gd[i] * xv[j];
                        }
                    }
                    accumulate(grads, *w, &[m, n], &dw);
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, &[m], gd);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let is = self.value(*input).shape();
                let ks = self.value(*kernels).shape();
                let (h, w, cin) = (is[0], is[1], is[2]);
                let (k, cout) = (ks[0], ks[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[0], os[1]);
                let x = self.value(*input).data();
                let kv = self.value(*kernels).data();
                let want_x = self.nodes[input.0].needs_grad;
                let want_k = self.nodes[kernels.0].needs_grad;
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut dk = vec![0.0; if want_k { kv.len() } else { 0 }];
                let mut db = vec![0.0; cout];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let obase = (oy * wo + ox) * cout;
                        let go = &gd[obase..obase + cout];
                        for (acc, gv) in db.iter_mut().zip(go) {
                            *acc += gv;
                        }
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < *padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < *padding || ix - padding >= w {
                                    continue;
                                }
                                let ix = ix - padding;
                                let ibase = (iy * w + ix) * cin;
                                let kbase = (ky * k + kx) * cin * cout;
                                for ci in 0..cin {
                                    let off = kbase + ci * cout;
                                    if want_x {
                                        let krow = &kv[off..off + cout];
                                        dx[ibase + ci] +=
                                            krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if want_k {
                                        let v = x[ibase + ci];
                                        for (d, gv) in dk[off..off + cout].iter_mut().zip(go) {
                                            *d += v * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *input, &[h, w, cin], &dx);
                }
                if want_k {
                    accumulate(grads, *kernels, &[k, k, cin, cout], &dk);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].needs_grad {
                        accumulate(grads, *b, &[cout], &db);
                    }
                }
            }
            Op::Conv1d { seq, kernel, bias } => {
                let ss = self.value(*seq).shape();
                let ks = self.value(*kernel).shape();
                let (l, d) = (ss[0], ss[1]);
                let (width, filters) = (ks[0], ks[2]);
                let t_out = l - width + 1;
                let x = self.value(*seq).data();
                let kv = self.value(*kernel).data();
                let want_x = self.nodes[seq.0].needs_grad;
                let want_k = self.nodes[kernel.0].needs_grad;
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut dk = vec![0.0; if want_k { kv.len() } else { 0 }];
                let mut db = vec![0.0; filters];
                for t in 0..t_out {
                    let go = &gd[t * filters..(t + 1) * filters];
                    for (acc, gv) in db.iter_mut().zip(go) {
                        *acc += gv;
                    }
                    for j in 0..width {
                        for dd in 0..d {
                            let xi = (t + j) * d + dd;
                            let off = (j * d + dd) * filters;
                            if want_x {
                                dx[xi] += kv[off..off + filters]
                                    .iter()
                                    .zip(go)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if want_k {
                                let v = x[xi];
                                for (dv, gv) in dk[off..off + filters].iter_mut().zip(go) {
                                    *dv += v * gv;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *seq, &[l, d], &dx);
                }
                if want_k {
                    accumulate(grads, *kernel, &[width, d, filters], &dk);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].needs_grad {
                        accumulate(grads, *b, &[filters], &db);
                    }
                }
            }
            Op::MaxOverTime { input, argmax } => {
                let s = self.value(*input).shape().to_vec();
                let f = s[1];
                let mut dx = vec![0.0; s[0] * f];
                for (fi, &t) in argmax.iter().enumerate() {
                    dx[t * f + fi] += gd[fi];
                }
                accumulate(grads, *input, &s, &dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let s = self.value(*input).shape().to_vec();
                let mut dx = vec![0.0; self.value(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                accumulate(grads, *input, &s, &dx);
            }
            Op::GlobalAvgPool(input) => {
                let s = self.value(*input).shape().to_vec();
                let c = s[2];
                let n = (s[0] * s[1]) as f64;
                let mut dx = vec![0.0; s[0] * s[1] * c];
                for px in dx.chunks_exact_mut(c) {
                    for (d, gv) in px.iter_mut().zip(gd) {
                        *d = gv / n;
                    }
                }
                accumulate(grads, *input, &s, &dx);
            }
            Op::BatchNorm {
                inputs,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                ..
            } => {
                let n = inputs.len();
                let f = inv_std.len();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for s in 0..n {
                    for j in 0..f {
                        dgamma[j] += gd[s * f + j] * xhat[s * f + j];
                        dbeta[j] += gd[s * f + j];
                    }
                }
                if self.needs(inputs) {
                    match mode {
                        BnMode::Train => {
                            // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            let mut sum_dxhat = vec![0.0; f];
                            let mut sum_dxhat_xhat = vec![0.0; f];
                            for s in 0..n {
                                for j in 0..f {
                                    let dxh = gd[s * f + j] * gam[j];
                                    sum_dxhat[j] += dxh;
                                    sum_dxhat_xhat[j] += dxh * xhat[s * f + j];
                                }
                            }
                            let nf = n as f64;
                            for (s, &v) in inputs.iter().enumerate() {
                                let dx: Vec<f64> = (0..f)
                                    .map(|j| {
                                        let dxh = gd[s * f + j] * gam[j];
                                        inv_std[j] / nf
                                            * (nf * dxh
                                                - sum_dxhat[j]
                                                - xhat[s * f + j] * sum_dxhat_xhat[j])
                                    })
                                    .collect();
                                accumulate(grads, v, &[f], &dx);
                            }
                        }
                        BnMode::Inference => {
                            for (s, &v) in inputs.iter().enumerate() {
                                let dx: Vec<f64> =
                                    (0..f).map(|j| gd[s * f + j] * gam[j] * inv_std[j]).collect();
                                accumulate(grads, v, &[f], &dx);
                            }
                        }
                    }
                }
                accumulate(grads, *gamma, &[f], &dgamma);
                accumulate(grads, *beta, &[f], &dbeta);
            }
            Op::Row { input, index } => {
                let s = self.value(*input).shape().to_vec();
                let f = s[1];
                let mut dx = vec![0.0; s[0] * f];
                dx[index * f..(index + 1) * f].copy_from_slice(gd);
                accumulate(grads, *input, &s, &dx);
            }
            Op::Concat(a, b) => {
                let p = self.value(*a).len();
                accumulate(grads, *a, &[p], &gd[..p]);
                accumulate(grads, *b, &[gd.len() - p], &gd[p..]);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Bce { p, label } => {
                let pv = self.value(*p).data()[0];
                let d = if (BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&pv) {
                    (pv - label) / (pv * (1.0 - pv))
                } else {
                    0.0
                };
                accumulate(grads, *p, self.value(*p).shape(), &[gd[0] * d]);
            }
            Op::Mean(xs) => {
                let share = gd[0] / xs.len() as f64;
                for &x in xs {
                    accumulate(grads, x, self.value(x).shape(), &[share]);
                }
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                let dx = vec![gd[0]; self.value(*x).len()];
                accumulate(grads, *x, &s, &dx);
            }
            Op::WeightedSum { x, weights } => {
                let s = self.value(*x).shape().to_vec();
                let dx: Vec<f64> = weights.iter().map(|w| w * gd[0]).collect();
                accumulate(grads, *x, &s, &dx);
            }
            Op::Embedding { .. } if self.skip_param_grads => {}
            Op::Embedding { table, ids } => {
                let d = node.value.shape()[1];
                let tg = store.grad_mut(*table).data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    for (t, gv) in tg[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&gd[row * d..(row + 1) * d])
                    {
                        *t += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], delta: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, d) in existing.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
