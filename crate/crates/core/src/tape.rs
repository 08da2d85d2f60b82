//! Reverse-mode automatic differentiation over a linear op tape.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in exact reverse
//! order and accumulates gradients additively, so a value consumed by several
//! ops receives the sum of their contributions.
//!
//! Feature maps are channels-last `[N, H, W, D]`. Ops that talk about a
//! "spatial" extent treat every axis between the leading batch axis and the
//! trailing channel axis as spatial.

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Added inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    MulChannel {
        x: Var,
        v: Var,
    },
    ScaleByGate {
        x: Var,
        gate: Var,
    },
    WeightedSpatialSum {
        weights: Var,
        x: Var,
    },
    MeanSpatial(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    SumAbs(Var),
    SumSq(Var),
    Scale(Var, f64),
    CrossEntropy {
        probs: Var,
        targets: Vec<f64>,
        class_weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(String, Var)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c = op(a) * op(b) + beta * c` on row-major buffers; `op(a)` is `m x k`,
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply derives from
    // (m, k, n) and the strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolls 3x3 same-padded patches: row `(n, y, x)`, column `(ky, kx, c)`.
fn im2col3(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let kc = 9 * c;
    let mut cols = vec![0.0; n * h * w * kc];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kc;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3_add(cols: &[f64], dx: &mut [f64], n: usize, h: usize, w: usize, c: usize) {
    let kc = 9 * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kc;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf that receives a gradient (not bound to a named parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Places a parameter on the tape and remembers its name so that
    /// [`Tape::param_grads`] can report gradients per parameter.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.push(p.shape().to_vec(), p.data().to_vec(), Op::Leaf, true);
        self.bound.push((p.name.clone(), v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter name, gradient)` for every bound parameter, in binding
    /// order. Unreached parameters report a zero gradient.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.bound
    }

    // ----- ops ---------------------------------------------------------

    /// `x[.., c_in] . w[c_in, c_out] + b[c_out]`: dense layer on vectors and
    /// point-wise (1x1) convolution on feature maps.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::Rank {
                op: "linear",
                expected: 2,
                shape: ws,
            });
        }
        let (cin, cout) = (ws[0], ws[1]);
        let last = *xs.last().expect("shape has rank >= 1");
        if last != cin {
            return Err(Error::dim("linear", "input channels", cin, last));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != cout {
                return Err(Error::dim("linear", "bias", cout, numel(bs)));
            }
        }
        let m = numel(&xs) / cin;
        let mut out = vec![0.0; m * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(m, cin, cout, self.value(x), false, self.value(w), false, &mut out, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    /// Same-padded, stride-1 3x3 convolution. `w` is `[3, 3, c_in, c_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::Rank {
                op: "conv3x3",
                expected: 4,
                shape: xs,
            });
        }
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 {
            return Err(Error::Rank {
                op: "conv3x3 kernel [3,3,c_in,c_out]",
                expected: 4,
                shape: ws,
            });
        }
        let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        if ws[2] != cin {
            return Err(Error::dim("conv3x3", "input channels", ws[2], cin));
        }
        let cout = ws[3];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != cout {
                return Err(Error::dim("conv3x3", "bias", cout, numel(bs)));
            }
        }
        let m = n * h * wd;
        let cols = im2col3(self.value(x), n, h, wd, cin);
        let mut out = vec![0.0; m * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(m, 9 * cin, cout, &cols, false, self.value(w), false, &mut out, 1.0);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(vec![n, h, wd, cout], out, Op::Conv3x3 { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Rank {
                op: "softmax axis",
                expected: axis + 1,
                shape,
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance (variance + [`LAYER_NORM_EPS`]), then applies `scale`/`shift`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for (v, axis) in [(scale, "layer_norm scale"), (shift, "layer_norm shift")] {
            if numel(self.shape(v)) != d {
                return Err(Error::dim("layer_norm", axis, d, numel(self.shape(v))));
            }
        }
        let xv = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * sc[j] + sh[j];
            }
        }
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch norm with statistics over every axis but the last.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        self.check_channel_vec("batch_norm", gamma, c)?;
        self.check_channel_vec("batch_norm", beta, c)?;
        let xv = self.value(x);
        let m = xv.len() / c;
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|a| *a /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        self.check_channel_vec("batch_norm", gamma, c)?;
        self.check_channel_vec("batch_norm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics", c, mean.len()));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false))
    }

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        let n = numel(self.shape(v));
        if n != c {
            return Err(Error::dim(op, "channels", c, n));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let j = i % c;
            let xh = (v - mean[j]) * inv_std[j];
            xhat[i] = xh;
            out[i] = g[j] * xh + b[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Multiplies by a precomputed mask (`0` for dropped units, `1/keep`
    /// for kept ones).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim("dropout", "mask", xv.len(), mask.len()));
        }
        let out = xv.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// Inverted dropout whose keep decisions come from `rng`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut crate::rng::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .unwrap_or(sa.len().min(sb.len()));
            return Err(Error::Dimension {
                op,
                axis: AXIS_NAMES.get(axis).copied().unwrap_or("trailing"),
                expected: sa.get(axis).copied().unwrap_or(0),
                got: sb.get(axis).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Checks `v` is `[N, D]` against a `[N, .., D]` map; returns `(n, s, d)`.
    fn channel_vec_dims(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.len() < 2 {
            return Err(Error::Rank {
                op,
                expected: 4,
                shape: xs.to_vec(),
            });
        }
        let n = xs[0];
        let d = *xs.last().unwrap();
        if vs.len() != 2 {
            return Err(Error::Rank {
                op,
                expected: 2,
                shape: vs.to_vec(),
            });
        }
        if vs[0] != n {
            return Err(Error::dim(op, "batch", n, vs[0]));
        }
        if vs[1] != d {
            return Err(Error::dim(op, "depth", d, vs[1]));
        }
        Ok((n, numel(xs) / (n * d), d))
    }

    /// Adds a per-sample `[N, D]` vector at every spatial position of an
    /// `[N, H, W, D]` map.
    pub fn broadcast_add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, s, d) = self.channel_vec_dims("broadcast_add_channel", x, v)?;
        let (xv, vv) = (self.value(x), self.value(v));
        let mut out = xv.to_vec();
        for b in 0..n {
            let vec = &vv[b * d..(b + 1) * d];
            for p in 0..s {
                let base = (b * s + p) * d;
                for (o, a) in out[base..base + d].iter_mut().zip(vec) {
                    *o += a;
                }
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddChannel { x, v }, rg))
    }

    /// Scales every spatial position of an `[N, H, W, D]` map channel-wise by
    /// a per-sample `[N, D]` vector.
    pub fn broadcast_mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, s, d) = self.channel_vec_dims("broadcast_mul_channel", x, v)?;
        let (xv, vv) = (self.value(x), self.value(v));
        let mut out = xv.to_vec();
        for b in 0..n {
            let vec = &vv[b * d..(b + 1) * d];
            for p in 0..s {
                let base = (b * s + p) * d;
                for (o, a) in out[base..base + d].iter_mut().zip(vec) {
                    *o *= a;
                }
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulChannel { x, v }, rg))
    }

    /// `[N, H, W, 1]` gate times `[N, H, W, D]` map, broadcast over channels.
    pub fn scale_by_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate).to_vec();
        if gs.len() != xs.len() || *gs.last().unwrap() != 1 {
            return Err(Error::dim("scale_by_gate", "gate channels", 1, *gs.last().unwrap()));
        }
        for (i, (a, b)) in xs.iter().zip(&gs).enumerate().take(xs.len() - 1) {
            if a != b {
                return Err(Error::dim("scale_by_gate", AXIS_NAMES[i.min(3)], *a, *b));
            }
        }
        let d = *xs.last().unwrap();
        let (xv, gv) = (self.value(x), self.value(gate));
        let mut out = xv.to_vec();
        for (p, g) in gv.iter().enumerate() {
            out[p * d..(p + 1) * d].iter_mut().for_each(|o| *o *= g);
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(xs, out, Op::ScaleByGate { x, gate }, rg))
    }

    /// Contracts an `[N, H, W(, 1)]` weight map against an `[N, H, W, D]`
    /// map, giving `[N, D]`.
    pub fn weighted_spatial_sum(&mut self, weights: Var, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Rank {
                op: "weighted_spatial_sum",
                expected: 4,
                shape: xs,
            });
        }
        let n = xs[0];
        let d = *xs.last().unwrap();
        let s = numel(&xs) / (n * d);
        let ws = self.shape(weights);
        if ws[0] != n {
            return Err(Error::dim("weighted_spatial_sum", "batch", n, ws[0]));
        }
        if numel(ws) != n * s {
            return Err(Error::dim("weighted_spatial_sum", "spatial", n * s, numel(ws)));
        }
        let (wv, xv) = (self.value(weights), self.value(x));
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            let o = &mut out[b * d..(b + 1) * d];
            for p in 0..s {
                let a = wv[b * s + p];
                let row = &xv[(b * s + p) * d..(b * s + p + 1) * d];
                for (oj, r) in o.iter_mut().zip(row) {
                    *oj += a * r;
                }
            }
        }
        let rg = self.rg(&[weights, x]);
        Ok(self.push(vec![n, d], out, Op::WeightedSpatialSum { weights, x }, rg))
    }

    /// Global average pool `[N, .., D] -> [N, D]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Rank {
                op: "mean_spatial",
                expected: 4,
                shape: xs,
            });
        }
        let n = xs[0];
        let d = *xs.last().unwrap();
        let s = numel(&xs) / (n * d);
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for p in 0..s {
                let row = &xv[(b * s + p) * d..(b * s + p + 1) * d];
                for (o, r) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= s as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, d], out, Op::MeanSpatial(x), rg))
    }

    /// 2x2 max pool, stride 2. Odd extents are padded on the bottom/right;
    /// padded cells never win.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Rank {
                op: "max_pool2",
                expected: 4,
                shape: xs,
            });
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x);
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for dy in 0..2 {
                            let y = 2 * oy + dy;
                            if y >= h {
                                continue;
                            }
                            for dx in 0..2 {
                                let xx = 2 * ox + dx;
                                if xx >= w {
                                    continue;
                                }
                                let i = ((b * h + y) * w + xx) * c + ch;
                                if xv[i] > best {
                                    best = xv[i];
                                    at = i;
                                }
                            }
                        }
                        let o = ((b * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, oh, ow, c], out, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.abs()).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumAbs(x), rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumSq(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    /// Mean over the batch of `-sum_c w_c t_c ln(p_c + 1e-12)`.
    ///
    /// `targets` must be one-hot rows of the same `[N, C]` shape as `probs`.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        targets: &[f64],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        if ps.len() != 2 {
            return Err(Error::Rank {
                op: "cross_entropy",
                expected: 2,
                shape: ps,
            });
        }
        let (n, c) = (ps[0], ps[1]);
        if targets.len() != n * c {
            return Err(Error::dim("cross_entropy", "targets", n * c, targets.len()));
        }
        for (i, row) in targets.chunks(c).enumerate() {
            let ones = row.iter().filter(|&&t| t == 1.0).count();
            let zeros = row.iter().filter(|&&t| t == 0.0).count();
            if ones != 1 || zeros != c - 1 {
                return Err(Error::Contract(format!("target row {i} is not one-hot: {row:?}")));
            }
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::dim("cross_entropy", "class weights", c, w.len()));
            }
        }
        let pv = self.value(probs);
        let mut loss = 0.0;
        for (i, (&p, &t)) in pv.iter().zip(targets).enumerate() {
            if t != 0.0 {
                let w = class_weights.map_or(1.0, |w| w[i % c]);
                loss -= w * t * (p + LOG_EPS).ln();
            }
        }
        loss /= n as f64;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                class_weights: class_weights.map(<[f64]>::to_vec),
            },
            rg,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// requires one. Replaces any gradients from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].data.len();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = &self.nodes[w.0].shape;
                let (cin, cout) = (ws[0], ws[1]);
                let m = len(*x) / cin;
                if wants(*x) {
                    add_into(&mut grads[x.0], m * cin, |g| {
                        gemm(m, cout, cin, gy, false, val(*w), true, g, 1.0)
                    });
                }
                if wants(*w) {
                    add_into(&mut grads[w.0], cin * cout, |g| {
                        gemm(cin, m, cout, val(*x), true, gy, false, g, 1.0)
                    });
                }
                if let Some(b) = b {
                    if wants(*b) {
                        add_into(&mut grads[b.0], cout, |g| {
                            for row in gy.chunks(cout) {
                                for (a, r) in g.iter_mut().zip(row) {
                                    *a += r;
                                }
                            }
                        });
                    }
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.nodes[w.0].shape[3];
                let m = n * h * wd;
                if wants(*w) {
                    let cols = im2col3(val(*x), n, h, wd, cin);
                    add_into(&mut grads[w.0], 9 * cin * cout, |g| {
                        gemm(9 * cin, m, cout, &cols, true, gy, false, g, 1.0)
                    });
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; m * 9 * cin];
                    gemm(m, cout, 9 * cin, gy, false, val(*w), true, &mut dcols, 0.0);
                    add_into(&mut grads[x.0], m * cin, |g| {
                        col2im3_add(&dcols, g, n, h, wd, cin)
                    });
                }
                if let Some(b) = b {
                    if wants(*b) {
                        add_into(&mut grads[b.0], cout, |g| {
                            for row in gy.chunks(cout) {
                                for (a, r) in g.iter_mut().zip(row) {
                                    *a += r;
                                }
                            }
                        });
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for ((a, &v), &d) in g.iter_mut().zip(xv).zip(gy) {
                            if v > 0.0 {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = &node.data;
                    add_into(&mut grads[x.0], y.len(), |g| {
                        for ((a, &s), &d) in g.iter_mut().zip(y).zip(gy) {
                            *a += d * s * (1.0 - s);
                        }
                    });
                }
            }
            Op::Softmax {
                x,
                outer,
                len: l,
                inner,
            } => {
                if wants(*x) {
                    let y = &node.data;
                    add_into(&mut grads[x.0], y.len(), |g| {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let at = |k: usize| (o * l + k) * inner + i;
                                let dot: f64 = (0..*l).map(|k| gy[at(k)] * y[at(k)]).sum();
                                for k in 0..*l {
                                    g[at(k)] += y[at(k)] * (gy[at(k)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = val(*scale).len();
                let sc = val(*scale);
                if wants(*scale) {
                    add_into(&mut grads[scale.0], d, |g| {
                        for (row_g, row_x) in gy.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                g[j] += row_g[j] * row_x[j];
                            }
                        }
                    });
                }
                if wants(*shift) {
                    add_into(&mut grads[shift.0], d, |g| {
                        for row_g in gy.chunks(d) {
                            for j in 0..d {
                                g[j] += row_g[j];
                            }
                        }
                    });
                }
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        let dn = d as f64;
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &gy[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dxh = gr[j] * sc[j];
                                s1 += dxh;
                                s2 += dxh * xr[j];
                            }
                            for j in 0..d {
                                let dxh = gr[j] * sc[j];
                                g[r * d + j] += is / dn * (dn * dxh - s1 - xr[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gm = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, &d) in gy.iter().enumerate() {
                    sum_dy[i % c] += d;
                    sum_dy_xhat[i % c] += d * xhat[i];
                }
                if wants(*gamma) {
                    add_into(&mut grads[gamma.0], c, |g| {
                        g.iter_mut().zip(&sum_dy_xhat).for_each(|(a, s)| *a += s)
                    });
                }
                if wants(*beta) {
                    add_into(&mut grads[beta.0], c, |g| {
                        g.iter_mut().zip(&sum_dy).for_each(|(a, s)| *a += s)
                    });
                }
                if wants(*x) {
                    let m = (gy.len() / c) as f64;
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        for (i, &d) in gy.iter().enumerate() {
                            let j = i % c;
                            let k = gm[j] * inv_std[j];
                            g[i] += if *batch_stats {
                                k / m * (m * d - sum_dy[j] - xhat[i] * sum_dy_xhat[j])
                            } else {
                                k * d
                            };
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], mask.len(), |g| {
                        for ((a, m), d) in g.iter_mut().zip(mask).zip(gy) {
                            *a += m * d;
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(&mut grads[v.0], gy.len(), |g| {
                            g.iter_mut().zip(gy).for_each(|(s, d)| *s += d)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if wants(*v) {
                        let ov = val(*other);
                        add_into(&mut grads[v.0], gy.len(), |g| {
                            for ((s, d), o) in g.iter_mut().zip(gy).zip(ov) {
                                *s += d * o;
                            }
                        });
                    }
                }
            }
            Op::AddChannel { x, v } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        g.iter_mut().zip(gy).for_each(|(s, d)| *s += d)
                    });
                }
                if wants(*v) {
                    let vs = &self.nodes[v.0].shape;
                    let (n, d) = (vs[0], vs[1]);
                    let s = gy.len() / (n * d);
                    add_into(&mut grads[v.0], n * d, |g| {
                        for b in 0..n {
                            for p in 0..s {
                                let row = &gy[(b * s + p) * d..(b * s + p + 1) * d];
                                for (a, r) in g[b * d..(b + 1) * d].iter_mut().zip(row) {
                                    *a += r;
                                }
                            }
                        }
                    });
                }
            }
            Op::MulChannel { x, v } => {
                let vs = &self.nodes[v.0].shape;
                let (n, d) = (vs[0], vs[1]);
                let s = gy.len() / (n * d);
                let (xv, vv) = (val(*x), val(*v));
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        for (i, (a, dy)) in g.iter_mut().zip(gy).enumerate() {
                            let b = i / (s * d);
                            *a += dy * vv[b * d + i % d];
                        }
                    });
                }
                if wants(*v) {
                    add_into(&mut grads[v.0], n * d, |g| {
                        for (i, (dy, xi)) in gy.iter().zip(xv).enumerate() {
                            let b = i / (s * d);
                            g[b * d + i % d] += dy * xi;
                        }
                    });
                }
            }
            Op::ScaleByGate { x, gate } => {
                let gv = val(*gate);
                let xv = val(*x);
                let d = xv.len() / gv.len();
                if wants(*x) {
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for (i, (a, dy)) in g.iter_mut().zip(gy).enumerate() {
                            *a += dy * gv[i / d];
                        }
                    });
                }
                if wants(*gate) {
                    add_into(&mut grads[gate.0], gv.len(), |g| {
                        for (p, a) in g.iter_mut().enumerate() {
                            let r = p * d..(p + 1) * d;
                            *a += gy[r.clone()].iter().zip(&xv[r]).map(|(u, v)| u * v).sum::<f64>();
                        }
                    });
                }
            }
            Op::WeightedSpatialSum { weights, x } => {
                let xs = &self.nodes[x.0].shape;
                let n = xs[0];
                let d = *xs.last().unwrap();
                let s = len(*x) / (n * d);
                let (wv, xv) = (val(*weights), val(*x));
                if wants(*weights) {
                    add_into(&mut grads[weights.0], n * s, |g| {
                        for b in 0..n {
                            let go = &gy[b * d..(b + 1) * d];
                            for p in 0..s {
                                let row = &xv[(b * s + p) * d..(b * s + p + 1) * d];
                                g[b * s + p] += go.iter().zip(row).map(|(u, v)| u * v).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*x) {
                    add_into(&mut grads[x.0], n * s * d, |g| {
                        for b in 0..n {
                            let go = &gy[b * d..(b + 1) * d];
                            for p in 0..s {
                                let a = wv[b * s + p];
                                let row = &mut g[(b * s + p) * d..(b * s + p + 1) * d];
                                for (r, u) in row.iter_mut().zip(go) {
                                    *r += a * u;
                                }
                            }
                        }
                    });
                }
            }
            Op::MeanSpatial(x) => {
                if wants(*x) {
                    let n = node.shape[0];
                    let d = node.shape[1];
                    let s = len(*x) / (n * d);
                    add_into(&mut grads[x.0], n * s * d, |g| {
                        for (i, a) in g.iter_mut().enumerate() {
                            let b = i / (s * d);
                            *a += gy[b * d + i % d] / s as f64;
                        }
                    });
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], len(*x), |g| {
                        for (&src, &d) in argmax.iter().zip(gy) {
                            g[src] += d;
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        g.iter_mut().zip(gy).for_each(|(s, d)| *s += d)
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], len(*x), |g| g.iter_mut().for_each(|s| *s += gy[0]));
                }
            }
            Op::SumAbs(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for (s, v) in g.iter_mut().zip(xv) {
                            // subgradient 0 at the kink
                            if *v > 0.0 {
                                *s += gy[0];
                            } else if *v < 0.0 {
                                *s -= gy[0];
                            }
                        }
                    });
                }
            }
            Op::SumSq(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for (s, v) in g.iter_mut().zip(xv) {
                            *s += 2.0 * v * gy[0];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.len(), |g| {
                        g.iter_mut().zip(gy).for_each(|(s, d)| *s += c * d)
                    });
                }
            }
            Op::CrossEntropy {
                probs,
                targets,
                class_weights,
            } => {
                if wants(*probs) {
                    let pv = val(*probs);
                    let ps = &self.nodes[probs.0].shape;
                    let (n, c) = (ps[0], ps[1]);
                    add_into(&mut grads[probs.0], pv.len(), |g| {
                        for (i, (a, (&p, &t))) in g.iter_mut().zip(pv.iter().zip(targets)).enumerate() {
                            if t != 0.0 {
                                let w = class_weights.as_ref().map_or(1.0, |w| w[i % c]);
                                *a -= gy[0] * w * t / ((p + LOG_EPS) * n as f64);
                            }
                        }
                    });
                }
            }
        }
    }
}

const AXIS_NAMES: [&str; 4] = ["batch", "height", "width", "channels"];
