//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and enough
//! information to route an incoming gradient back to its inputs. Nodes are
//! appended in evaluation order, so walking the tape backwards visits every
//! node after all of its consumers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grad_inputs[i]` arrives zeroed with the length of `inputs[i]`; the rule
/// writes the vector-Jacobian product for each input into it.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
        grad_inputs: &mut [Vec<f64>],
    );
}

#[derive(Debug, Clone, Copy)]
struct Conv2dSpec {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Select(Var, usize),
    Reshape(Var),
    ReduceSum(Var),
    Conv2d(Conv2dSpec),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        softmax: Vec<f64>,
    },
    AbsError {
        pred: Var,
        target: f64,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `var` into `tensor`'s gradient buffer. Tensors
    /// that are unreachable from the loss are left untouched.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) if tensor.requires_grad() => tensor.accumulate_grad(g),
            _ => Ok(()),
        }
    }
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any input of a piecewise-smooth op (leaky ReLU,
    /// absolute error) from its kink; `None` if the tape has no such op.
    /// Finite-difference checks are only meaningful where this is well above
    /// the step size times the input's sensitivity.
    pub fn min_kink_distance(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::LeakyRelu(a, _) => self.nodes[a.0]
                    .value
                    .iter()
                    .map(|x| x.abs())
                    .reduce(f64::min),
                Op::AbsError { pred, target } => self.nodes[pred.0]
                    .value
                    .iter()
                    .map(|x| (x - target).abs())
                    .reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf. It participates in backward iff the tensor
    /// requires gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() || shape.contains(&0) {
            return Err(shape_err(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    // Same-shape or scalar-broadcast operands; returns the output shape.
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let value = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok((shape, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, v, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(s, v, rg, Op::Div(a, b)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(s, v, rg, Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(s, v, rg, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                let row = &vb[p * n..(p + 1) * n];
                for (o, y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::IndexOutOfRange {
                what: "select",
                index,
                len: shape.first().copied().unwrap_or(0),
            });
        }
        let rest: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[1..].to_vec()
        };
        let stride = numel(&rest);
        let v = self.value(a)[index * stride..(index + 1) * stride].to_vec();
        let rg = self.rg(a);
        Ok(self.push(rest, v, rg, Op::Select(a, index)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} → {shape:?}", self.shape(a)),
            ));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, v, rg, Op::Reshape(a)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::ReduceSum(a))
    }

    /// 2-D convolution of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`,
    /// optional per-channel bias `[C_out]`, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {si:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{w}"),
            ));
        }
        if let Some(bv) = bias {
            if self.value(bv).len() != cout {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} channels", self.shape(bv)),
                ));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let (x, k) = (self.value(input), self.value(weight));
        let mut out = vec![0.0; b * cout * oh * ow];
        for n in 0..b {
            for co in 0..cout {
                let base = bias.map_or(0.0, |bv| self.value(bv)[co]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = base;
                        for ci in 0..cin {
                            let xin = &x[((n * cin + ci) * h) * w..((n * cin + ci + 1) * h) * w];
                            let kk =
                                &k[((co * cin + ci) * kh) * kw..((co * cin + ci + 1) * kh) * kw];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += row[ix as usize] * kk[ky * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        let spec = Conv2dSpec {
            input,
            weight,
            bias,
            stride,
            padding,
        };
        Ok(self.push(vec![b, cout, oh, ow], out, rg, Op::Conv2d(spec)))
    }

    /// `[B, C, H, W] → [B, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{s:?}")));
        }
        let area = s[2] * s[3];
        let v: Vec<f64> = self
            .value(a)
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![s[0], s[1]], v, rg, Op::GlobalAvgPool(a)))
    }

    /// `[B, C1, H, W] ⧺ [B, C2, H, W] → [B, C1 + C2, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", format!("{sa:?} ⧺ {sb:?}")));
        }
        let (ca, cb, area) = (sa[1], sb[1], sa[2] * sa[3]);
        let mut v = Vec::with_capacity(sa[0] * (ca + cb) * area);
        for n in 0..sa[0] {
            v.extend_from_slice(&self.value(a)[n * ca * area..(n + 1) * ca * area]);
            v.extend_from_slice(&self.value(b)[n * cb * area..(n + 1) * cb * area]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![sa[0], ca + cb, sa[2], sa[3]],
            v,
            rg,
            Op::ConcatChannels(a, b),
        ))
    }

    /// `-log softmax(logits)[label]`, stabilised by max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy label",
                index: label,
                len: z.len(),
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() - (z[label] - max);
        let softmax = exps.into_iter().map(|e| e / sum).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
        ))
    }

    /// `|pred - target|` for a single-element `pred`; the subgradient at zero
    /// error is 0.
    pub fn mean_absolute_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != 1 {
            return Err(shape_err(
                "mean_absolute_error",
                format!("prediction {:?}", self.shape(pred)),
            ));
        }
        if !(p[0].is_finite() && target.is_finite()) {
            return Err(Error::NonFinite("mean_absolute_error"));
        }
        let v = (p[0] - target).abs();
        let rg = self.rg(pred);
        Ok(self.push(vec![1], vec![v], rg, Op::AbsError { pred, target }))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(shape_err(
                rule.name(),
                format!("{shape:?} vs {} values", value.len()),
            ));
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.route(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    // Accumulates d(loss)/d(operand) for a broadcasting binary op, where
    // `local(i)` is the elementwise partial for output element i.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        let scalar = self.value(v).len() == 1 && g.len() > 1;
        self.acc(grads, v, |slot| {
            if scalar {
                slot[0] += (0..g.len()).map(|i| g[i] * local(i)).sum::<f64>();
            } else {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += g[i] * local(i);
                }
            }
        });
    }

    fn route(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let at = |v: Var, j: usize| {
            let x = &self.nodes[v.0].value;
            if x.len() == 1 {
                x[0]
            } else {
                x[j]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| 1.0);
                self.acc_broadcast(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| 1.0);
                self.acc_broadcast(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                self.acc_broadcast(grads, *a, g, |j| at(*b, j));
                self.acc_broadcast(grads, *b, g, |j| at(*a, j));
            }
            Op::Div(a, b) => {
                self.acc_broadcast(grads, *a, g, |j| 1.0 / at(*b, j));
                self.acc_broadcast(grads, *b, g, |j| -out[j] / at(*b, j));
            }
            Op::Scale(a, c) => self.acc(grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
            }),
            Op::Exp(a) => self.acc(grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j];
                }
            }),
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * 2.0 * x[j];
                    }
                })
            }
            Op::Sqrt(a) => self.acc(grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * 0.5 / out[j];
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[a.0].value;
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        s[j] += if x[j] > 0.0 { g[j] } else { slope * g[j] };
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // dA = G Bᵀ
                self.acc(grads, *a, |s| {
                    for r in 0..m {
                        for p in 0..k {
                            let row = &vb[p * n..(p + 1) * n];
                            s[r * k + p] += g[r * n..(r + 1) * n]
                                .iter()
                                .zip(row)
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ G
                self.acc(grads, *b, |s| {
                    for r in 0..m {
                        for p in 0..k {
                            let x = va[r * k + p];
                            for (sv, gv) in
                                s[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n])
                            {
                                *sv += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Select(a, index) => {
                let stride = g.len();
                self.acc(grads, *a, |s| {
                    for (sv, gv) in s[index * stride..(index + 1) * stride].iter_mut().zip(g) {
                        *sv += gv;
                    }
                })
            }
            Op::Reshape(a) => self.acc(grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            }),
            Op::ReduceSum(a) => self.acc(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Conv2d(spec) => self.conv2d_backward(spec, &node.shape, g, grads),
            Op::GlobalAvgPool(a) => {
                let s = &self.nodes[a.0].shape;
                let area = s[2] * s[3];
                self.acc(grads, *a, |sv| {
                    for (j, v) in sv.iter_mut().enumerate() {
                        *v += g[j / area] / area as f64;
                    }
                })
            }
            Op::ConcatChannels(a, b) => {
                let (ca, cb) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                let area = node.shape[2] * node.shape[3];
                let batch = node.shape[0];
                self.acc(grads, *a, |s| {
                    for n in 0..batch {
                        let src = &g[n * (ca + cb) * area..][..ca * area];
                        s[n * ca * area..(n + 1) * ca * area]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
                self.acc(grads, *b, |s| {
                    for n in 0..batch {
                        let src = &g[(n * (ca + cb) + ca) * area..][..cb * area];
                        s[n * cb * area..(n + 1) * cb * area]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => self.acc(grads, *logits, |s| {
                for (j, sv) in s.iter_mut().enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    *sv += g[0] * (softmax[j] - onehot);
                }
            }),
            Op::AbsError { pred, target } => {
                let p = self.nodes[pred.0].value[0];
                let sign = if p > *target {
                    1.0
                } else if p < *target {
                    -1.0
                } else {
                    0.0
                };
                self.acc(grads, *pred, |s| s[0] += g[0] * sign);
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].value.as_slice())
                    .collect();
                let mut local: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
                rule.backward(&values, out, g, &mut local);
                for (v, l) in inputs.iter().zip(local) {
                    self.acc(grads, *v, |s| {
                        s.iter_mut().zip(&l).for_each(|(s, l)| *s += l)
                    });
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        spec: &Conv2dSpec,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let si = &self.nodes[spec.input.0].shape;
        let sw = &self.nodes[spec.weight.0].shape;
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let (stride, pad) = (spec.stride, spec.padding as isize);
        let x = &self.nodes[spec.input.0].value;
        let k = &self.nodes[spec.weight.0].value;

        if let Some(bias) = spec.bias {
            self.acc(grads, bias, |s| {
                for n in 0..b {
                    for (co, sv) in s.iter_mut().enumerate() {
                        *sv += g[(n * cout + co) * oh * ow..][..oh * ow]
                            .iter()
                            .sum::<f64>();
                    }
                }
            });
        }

        let geom = ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        };

        if self.rg(spec.weight) {
            let mut gw = vec![0.0; k.len()];
            geom.for_each_tap(g, |xi, ki, go| gw[ki] += go * x[xi]);
            self.acc(grads, spec.weight, |s| {
                s.iter_mut().zip(&gw).for_each(|(s, v)| *s += v)
            });
        }
        if self.rg(spec.input) {
            let mut gx = vec![0.0; x.len()];
            geom.for_each_tap(g, |xi, ki, go| gx[xi] += go * k[ki]);
            self.acc(grads, spec.input, |s| {
                s.iter_mut().zip(&gx).for_each(|(s, v)| *s += v)
            });
        }
    }
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: isize,
}

impl ConvGeom {
    // Visits every (input index, kernel index, output gradient) triple that
    // contributed to the forward result.
    #[inline]
    fn for_each_tap(&self, g: &[f64], mut f: impl FnMut(usize, usize, f64)) {
        let (h, w) = (self.h as isize, self.w as isize);
        for n in 0..self.b {
            for co in 0..self.cout {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let go = g[((n * self.cout + co) * self.oh + oy) * self.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..self.cin {
                            for ky in 0..self.kh {
                                let iy = (oy * self.stride + ky) as isize - self.pad;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = (ox * self.stride + kx) as isize - self.pad;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    let xi = ((n * self.cin + ci) * self.h + iy as usize) * self.w
                                        + ix as usize;
                                    let ki = ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
                                    f(xi, ki, go);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
