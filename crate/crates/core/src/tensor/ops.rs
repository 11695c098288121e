//! Elementwise, reduction and shape operations with their backward rules.

use super::tape::{GradSink, Node, Op, Tape, Var};
use super::{check_shape, numel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
    Neg,
    Reciprocal,
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 8] = [
        UnaryKind::Relu,
        UnaryKind::Sigmoid,
        UnaryKind::Exp,
        UnaryKind::Log,
        UnaryKind::Sqrt,
        UnaryKind::Abs,
        UnaryKind::Neg,
        UnaryKind::Reciprocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
            UnaryKind::Neg => "neg",
            UnaryKind::Reciprocal => "reciprocal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    pub const ALL: [BinaryKind; 4] = [
        BinaryKind::Add,
        BinaryKind::Sub,
        BinaryKind::Mul,
        BinaryKind::Div,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// For every element of `out_shape`, the flat index of the element of
/// `small` it reads from under singleton expansion.
fn expansion_map(op: &'static str, out_shape: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if out_shape.len() != small.len()
        || out_shape
            .iter()
            .zip(small)
            .any(|(&o, &s)| s != o && s != 1)
    {
        return Err(Error::ShapeMismatch {
            op,
            lhs: out_shape.to_vec(),
            rhs: small.to_vec(),
        });
    }
    let rank = small.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

impl Tape {
    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let xs = &node.data;
        let check = |bad: fn(f64) -> bool| -> Result<()> {
            match xs.iter().position(|&v| bad(v)) {
                Some(index) => Err(Error::Domain {
                    op: kind.name(),
                    index,
                    value: xs[index],
                }),
                None => Ok(()),
            }
        };
        match kind {
            UnaryKind::Log | UnaryKind::Sqrt => check(|v| !(v > 0.0))?,
            UnaryKind::Reciprocal => check(|v| v == 0.0)?,
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Abs => f64::abs,
            UnaryKind::Neg => |v| -v,
            UnaryKind::Reciprocal => f64::recip,
        };
        let data = xs.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, data, Op::Unary { x: x.0, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("exp is total")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x).expect("abs is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x).expect("neg is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Reciprocal, x)
    }

    /// `a ∘ b`, with `b` expanded over singleton extents to `a`'s shape.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let bmap = if na.shape == nb.shape {
            None
        } else {
            Some(expansion_map(kind.name(), &na.shape, &nb.shape)?)
        };
        if kind == BinaryKind::Div {
            if let Some(index) = nb.data.iter().position(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    index,
                    value: 0.0,
                });
            }
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |p, q| p + q,
            BinaryKind::Sub => |p, q| p - q,
            BinaryKind::Mul => |p, q| p * q,
            BinaryKind::Div => |p, q| p / q,
        };
        let data: Vec<f64> = match &bmap {
            None => na.data.iter().zip(&nb.data).map(|(&p, &q)| f(p, q)).collect(),
            Some(map) => na
                .data
                .iter()
                .zip(map)
                .map(|(&p, &j)| f(p, nb.data[j]))
                .collect(),
        };
        let shape = na.shape.clone();
        Ok(self.push(
            shape,
            data,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                bmap,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let node = &self.nodes[x.0];
        let data = node.data.iter().map(|v| v * c).collect();
        let shape = node.shape.clone();
        self.push(shape, data, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let node = &self.nodes[x.0];
        let data = node.data.iter().map(|v| v + c).collect();
        let shape = node.shape.clone();
        self.push(shape, data, Op::AddScalar { x: x.0 })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let node = &self.nodes[x.0];
        let data = node.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = node.shape.clone();
        self.push(shape, data, Op::Clamp { x: x.0, lo, hi })
    }

    /// Elementwise Huber-style penalty: `0.5 x²/β` inside `|x| < β`,
    /// `|x| − 0.5 β` outside.
    pub fn smooth_l1_elementwise(&mut self, x: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smooth_l1 beta must be > 0, got {beta}"
            )));
        }
        let node = &self.nodes[x.0];
        let data = node
            .data
            .iter()
            .map(|&v| {
                if v.abs() < beta {
                    0.5 * v * v / beta
                } else {
                    v.abs() - 0.5 * beta
                }
            })
            .collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, data, Op::SmoothL1 { x: x.0, beta }))
    }

    /// Softmax jointly over a contiguous, ascending set of axes.
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let shape = &node.shape;
        let Some((&first, &last)) = axes.first().zip(axes.last()) else {
            return Err(Error::InvalidArgument("softmax: empty axis set".into()));
        };
        if last >= shape.len() || axes.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::InvalidArgument(format!(
                "softmax: axes {axes:?} must be contiguous, ascending and below rank {}",
                shape.len()
            )));
        }
        let outer = numel(&shape[..first]);
        let group = numel(&shape[first..=last]);
        let inner = numel(&shape[last + 1..]);
        let xs = &node.data;
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |g: usize| (o * group + g) * inner + i;
                let max = (0..group).map(|g| xs[at(g)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for g in 0..group {
                    let e = (xs[at(g)] - max).exp();
                    out[at(g)] = e;
                    total += e;
                }
                for g in 0..group {
                    out[at(g)] /= total;
                }
            }
        }
        let shape = shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x: x.0,
                outer,
                group,
                inner,
            },
        ))
    }

    /// Per-sample, per-channel mean and biased variance over the spatial
    /// axes of an `(N, C, H, W)` tensor. Both outputs are `(N, C, 1, 1)`.
    pub fn reduce_moments(&mut self, x: Var) -> Result<(Var, Var)> {
        let node = &self.nodes[x.0];
        if node.shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "reduce_moments",
                detail: format!("expected (N, C, H, W), got {:?}", node.shape),
            });
        }
        let (n, c) = (node.shape[0], node.shape[1]);
        let m = node.shape[2] * node.shape[3];
        let mut mean = Vec::with_capacity(n * c);
        let mut var = Vec::with_capacity(n * c);
        for plane in node.data.chunks_exact(m) {
            let mu = plane.iter().sum::<f64>() / m as f64;
            let v = plane.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / m as f64;
            mean.push(mu);
            var.push(v);
        }
        let shape = vec![n, c, 1, 1];
        let mv = self.push(shape.clone(), mean.clone(), Op::SpatialMean { x: x.0 });
        let vv = self.push(shape, var, Op::SpatialVar { x: x.0, mean });
        Ok((mv, vv))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = &self.nodes[x.0].data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { x: x.0 })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("concat: no inputs".into()));
        };
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut total_axis = 0;
        let mut spans = Vec::with_capacity(xs.len());
        for v in xs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total_axis += s[axis];
            spans.push(s[axis] * inner);
        }
        let row: usize = spans.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (v, &span) in xs.iter().zip(&spans) {
                data.extend_from_slice(&self.nodes[v.0].data[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                outer,
                spans,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        let node = &self.nodes[x.0];
        if numel(shape) != node.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = node.data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x: x.0 }))
    }

    /// Collapses every axis after the first: `(N, ...) -> (N, rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        let shape = [s[0], numel(&s[1..])];
        self.reshape(x, &shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        let s = &node.shape;
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow: [{start}, {}) along axis {axis} of {s:?}",
                start + len
            )));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let span_in = s[axis] * inner;
        let span_out = len * inner;
        let offset = start * inner;
        let mut data = Vec::with_capacity(outer * span_out);
        for o in 0..outer {
            let base = o * span_in + offset;
            data.extend_from_slice(&node.data[base..base + span_out]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        Ok(self.push(
            shape,
            data,
            Op::Narrow {
                x: x.0,
                outer,
                span_in,
                offset,
                span_out,
            },
        ))
    }

    /// Explicit singleton expansion to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let map = expansion_map("expand", shape, &node.shape)?;
        let data = map.iter().map(|&j| node.data[j]).collect();
        Ok(self.push(shape.to_vec(), data, Op::Expand { x: x.0, map }))
    }

    /// Adaptive average pooling of an `(N, C, H, W)` tensor to `(oh, ow)`.
    pub fn mean_pool2d(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let node = &self.nodes[x.0];
        let s = &node.shape;
        let (oh, ow) = out_hw;
        if s.len() != 4 || oh == 0 || ow == 0 || oh > s[2] || ow > s[3] {
            return Err(Error::InvalidShape {
                op: "mean_pool2d",
                detail: format!("cannot pool {s:?} to {out_hw:?}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &node.data[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (r0, r1) = pool_window(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_window(j, w, ow);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    data.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(
            shape,
            data,
            Op::MeanPool {
                x: x.0,
                in_hw: (h, w),
                out_hw,
                planes,
            },
        ))
    }

    /// Elementwise product with a constant factor of the same length.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let node = &self.nodes[x.0];
        if factor.len() != node.data.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: node.shape.clone(),
                rhs: vec![factor.len()],
            });
        }
        let data = node.data.iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, data, Op::MulConst { x: x.0, factor }))
    }

    /// For a `(rows, m)` input, the per-row mean absolute pairwise difference
    /// `(1/m²) Σ_i Σ_j |x_i − x_j|`, shape `(rows, 1)`. Evaluated by sorting
    /// in `O(m log m)` per row.
    pub fn pairwise_abs_mean(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "pairwise_abs_mean",
                detail: format!("expected (rows, m), got {:?}", node.shape),
            });
        }
        let (rows, m) = (node.shape[0], node.shape[1]);
        let mut data = Vec::with_capacity(rows);
        let mut sorted = vec![0.0; m];
        for row in node.data.chunks_exact(m) {
            sorted.copy_from_slice(row);
            sorted.sort_by(f64::total_cmp);
            // Σ_{i<j} (x_(j) − x_(i)) = Σ_k (2k − m + 1) x_(k)
            let half: f64 = sorted
                .iter()
                .enumerate()
                .map(|(k, v)| (2.0 * k as f64 - m as f64 + 1.0) * v)
                .sum();
            data.push(2.0 * half / (m * m) as f64);
        }
        Ok(self.push(vec![rows, 1], data, Op::PairwiseAbsMean { x: x.0, rows, m }))
    }
}

fn pool_window(i: usize, extent: usize, out: usize) -> (usize, usize) {
    let start = i * extent / out;
    let end = ((i + 1) * extent).div_ceil(out);
    (start, end)
}

pub(crate) fn backward(nodes: &[Node], node: &Node, op: &Op, g: &[f64], sink: &mut GradSink<'_>) {
    let y = &node.data;
    match op {
        Op::Unary { x, kind } => {
            let xs = &nodes[*x].data;
            let Some(gx) = sink.buf(*x) else { return };
            let rule = |gx: &mut [f64], d: &dyn Fn(usize) -> f64| {
                for (k, (a, gk)) in gx.iter_mut().zip(g).enumerate() {
                    *a += gk * d(k);
                }
            };
            match kind {
                UnaryKind::Relu => rule(gx, &|k| if xs[k] > 0.0 { 1.0 } else { 0.0 }),
                UnaryKind::Sigmoid => rule(gx, &|k| y[k] * (1.0 - y[k])),
                UnaryKind::Exp => rule(gx, &|k| y[k]),
                UnaryKind::Log => rule(gx, &|k| 1.0 / xs[k]),
                UnaryKind::Sqrt => rule(gx, &|k| 0.5 / y[k]),
                UnaryKind::Abs => rule(gx, &|k| sign(xs[k])),
                UnaryKind::Neg => rule(gx, &|_| -1.0),
                UnaryKind::Reciprocal => rule(gx, &|k| -y[k] * y[k]),
            }
        }
        Op::Binary { a, b, kind, bmap } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = sink.buf(*a) {
                match (kind, bmap) {
                    (BinaryKind::Add | BinaryKind::Sub, _) => {
                        ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                    }
                    (BinaryKind::Mul, None) => {
                        ga.iter_mut().zip(g).zip(bv).for_each(|((p, q), r)| *p += q * r);
                    }
                    (BinaryKind::Div, None) => {
                        ga.iter_mut().zip(g).zip(bv).for_each(|((p, q), r)| *p += q / r);
                    }
                    (BinaryKind::Mul, Some(m)) => {
                        ga.iter_mut().zip(g).zip(m).for_each(|((p, q), &j)| *p += q * bv[j]);
                    }
                    (BinaryKind::Div, Some(m)) => {
                        ga.iter_mut().zip(g).zip(m).for_each(|((p, q), &j)| *p += q / bv[j]);
                    }
                }
            }
            if let Some(gb) = sink.buf(*b) {
                let d = |k: usize, j: usize| match kind {
                    BinaryKind::Add => g[k],
                    BinaryKind::Sub => -g[k],
                    BinaryKind::Mul => g[k] * av[k],
                    BinaryKind::Div => -g[k] * av[k] / (bv[j] * bv[j]),
                };
                match bmap {
                    None => gb.iter_mut().enumerate().for_each(|(k, p)| *p += d(k, k)),
                    Some(m) => m.iter().enumerate().for_each(|(k, &j)| gb[j] += d(k, j)),
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = sink.buf(*x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = sink.buf(*x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xs = &nodes[*x].data;
            if let Some(gx) = sink.buf(*x) {
                for k in 0..g.len() {
                    if xs[k] >= *lo && xs[k] <= *hi {
                        gx[k] += g[k];
                    }
                }
            }
        }
        Op::SmoothL1 { x, beta } => {
            let xs = &nodes[*x].data;
            if let Some(gx) = sink.buf(*x) {
                for k in 0..g.len() {
                    let d = if xs[k].abs() < *beta {
                        xs[k] / beta
                    } else {
                        sign(xs[k])
                    };
                    gx[k] += g[k] * d;
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            group,
            inner,
        } => {
            let Some(gx) = sink.buf(*x) else { return };
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |q: usize| (o * group + q) * inner + i;
                    let dot: f64 = (0..*group).map(|q| g[at(q)] * y[at(q)]).sum();
                    for q in 0..*group {
                        gx[at(q)] += y[at(q)] * (g[at(q)] - dot);
                    }
                }
            }
        }
        Op::SpatialMean { x } => {
            let m = nodes[*x].data.len() / y.len();
            if let Some(gx) = sink.buf(*x) {
                for (plane, gp) in gx.chunks_exact_mut(m).zip(g) {
                    plane.iter_mut().for_each(|v| *v += gp / m as f64);
                }
            }
        }
        Op::SpatialVar { x, mean } => {
            let xs = &nodes[*x].data;
            let m = xs.len() / y.len();
            if let Some(gx) = sink.buf(*x) {
                for p in 0..y.len() {
                    let scale = 2.0 * g[p] / m as f64;
                    for k in p * m..(p + 1) * m {
                        gx[k] += scale * (xs[k] - mean[p]);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = sink.buf(*x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = sink.buf(*x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Concat { xs, outer, spans } => {
            let row: usize = spans.iter().sum();
            let mut offset = 0;
            for (&xi, &span) in xs.iter().zip(spans) {
                if let Some(gx) = sink.buf(xi) {
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + span];
                        gx[o * span..(o + 1) * span]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += span;
            }
        }
        Op::Narrow {
            x,
            outer,
            span_in,
            offset,
            span_out,
        } => {
            if let Some(gx) = sink.buf(*x) {
                for o in 0..*outer {
                    let dst = &mut gx[o * span_in + offset..o * span_in + offset + span_out];
                    let src = &g[o * span_out..(o + 1) * span_out];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Expand { x, map } => {
            if let Some(gx) = sink.buf(*x) {
                for (k, &j) in map.iter().enumerate() {
                    gx[j] += g[k];
                }
            }
        }
        Op::MeanPool {
            x,
            in_hw: (h, w),
            out_hw: (oh, ow),
            planes,
        } => {
            let Some(gx) = sink.buf(*x) else { return };
            for p in 0..*planes {
                for i in 0..*oh {
                    let (r0, r1) = pool_window(i, *h, *oh);
                    for j in 0..*ow {
                        let (c0, c1) = pool_window(j, *w, *ow);
                        let share = g[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            let base = p * h * w + r * w;
                            gx[base + c0..base + c1].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
            }
        }
        Op::MulConst { x, factor } => {
            if let Some(gx) = sink.buf(*x) {
                for k in 0..g.len() {
                    gx[k] += g[k] * factor[k];
                }
            }
        }
        Op::PairwiseAbsMean { x, rows, m } => {
            let xs = &nodes[*x].data;
            let Some(gx) = sink.buf(*x) else { return };
            let mut order: Vec<usize> = (0..*m).collect();
            for r in 0..*rows {
                let row = &xs[r * m..(r + 1) * m];
                order.iter_mut().enumerate().for_each(|(k, o)| *o = k);
                order.sort_by(|&p, &q| row[p].total_cmp(&row[q]));
                let scale = 2.0 * g[r] / (m * m) as f64;
                // d/dx_k Σ_i Σ_j |x_i − x_j| = 2 (#{x_j < x_k} − #{x_j > x_k})
                let mut start = 0;
                while start < *m {
                    let mut end = start + 1;
                    while end < *m && row[order[end]] == row[order[start]] {
                        end += 1;
                    }
                    let less = start as f64;
                    let greater = (*m - end) as f64;
                    for &k in &order[start..end] {
                        gx[r * m + k] += scale * (less - greater);
                    }
                    start = end;
                }
            }
        }
        Op::Leaf | Op::Linear { .. } | Op::Conv2d { .. } | Op::BatchNorm { .. } => {
            unreachable!("handled by the dedicated backward routines")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval<F: FnOnce(&mut Tape, Var) -> Result<Var>>(input: &[f64], f: F) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(input.to_vec()));
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).to_vec())
    }

    #[test]
    fn unary_examples() {
        assert_eq!(eval(&[-1.0, 0.0, 2.0], |t, x| Ok(t.relu(x))).unwrap(), [0.0, 0.0, 2.0]);
        assert_eq!(eval(&[0.0], |t, x| Ok(t.sigmoid(x))).unwrap(), [0.5]);
        // 1 / (1 + e^-0.5) evaluated with mpmath at 30 digits
        let s = eval(&[0.5], |t, x| Ok(t.sigmoid(x))).unwrap()[0];
        assert!((s - 0.622459331201854564638).abs() < 1e-15);
    }

    #[test]
    fn domain_violations_report_index() {
        let err = eval(&[1.0, 0.0, -1.0], |t, x| t.log(x)).unwrap_err();
        assert!(matches!(err, Error::Domain { index: 1, .. }));
        let err = eval(&[1.0, 2.0, -1.0], |t, x| t.sqrt(x)).unwrap_err();
        assert!(matches!(err, Error::Domain { index: 2, .. }));
        let err = eval(&[0.0], |t, x| t.reciprocal(x)).unwrap_err();
        assert!(matches!(err, Error::Domain { index: 0, .. }));
    }

    #[test]
    fn binary_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);
        let ones = tape.leaf(&Tensor::ones([2]));
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(a));

        let one = tape.leaf(&Tensor::from_vec(vec![1.0]));
        let zero = tape.leaf(&Tensor::from_vec(vec![0.0]));
        assert!(matches!(tape.div(one, zero), Err(Error::Domain { .. })));
    }

    #[test]
    fn broadcast_rule_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(&Tensor::new([2, 1], vec![10., 20.]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[11., 12., 13., 24., 25., 26.]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);

        let bad = tape.leaf(&Tensor::new([3, 1], vec![0.0; 3]).unwrap());
        let err = tape.add(a, bad).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        // only the second operand may be expanded
        assert!(tape.add(b, a).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(eval(&[0.0, 0.0], |t, x| t.softmax(x, &[0])).unwrap(), [0.5, 0.5]);
        let y = eval(&[1.0, 2.0], |t, x| t.softmax(x, &[0])).unwrap();
        // e/(e+e²) and e²/(e+e²), mpmath at 30 digits
        assert!((y[0] - 0.268941421369995120748840758).abs() < 1e-15);
        assert!((y[1] - 0.731058578630004879251159242).abs() < 1e-15);
        let shifted = eval(&[1.0 + 7.5, 2.0 + 7.5], |t, x| t.softmax(x, &[0])).unwrap();
        assert!((shifted[0] - y[0]).abs() < 1e-15);
        assert!(eval(&[1.0], |t, x| t.softmax(x, &[])).is_err());
    }

    #[test]
    fn softmax_over_spatial_axes_of_large_values() {
        let mut rng = crate::tensor::RngState::new(3);
        let mut t = Tensor::randn([2, 3, 4, 5], &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v *= 1e3);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.softmax(x, &[2, 3]).unwrap();
        for plane in tape.value(y).chunks_exact(20) {
            assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(tape.softmax(x, &[1, 3]).is_err());
    }

    #[test]
    fn moments_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new([1, 3, 1, 2], vec![3., 3., 0., 2., 5., 5.]).unwrap());
        let (m, v) = tape.reduce_moments(x).unwrap();
        assert_eq!(tape.shape(m), &[1, 3, 1, 1]);
        assert_eq!(tape.value(m), &[3.0, 1.0, 5.0]);
        assert_eq!(tape.value(v), &[0.0, 1.0, 0.0]);

        let one_px = tape.leaf(&Tensor::new([1, 1, 1, 1], vec![4.2]).unwrap());
        let (m, v) = tape.reduce_moments(one_px).unwrap();
        assert_eq!(tape.value(m), &[4.2]);
        assert_eq!(tape.value(v), &[0.0]);
        let flat = tape.leaf(&Tensor::zeros([2, 2]));
        assert!(tape.reduce_moments(flat).is_err());
    }

    #[test]
    fn shape_ops() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros([2, 2, 3, 3]));
        let b = tape.leaf(&Tensor::ones([2, 3, 3, 3]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5, 3, 3]);
        let bad = tape.leaf(&Tensor::ones([2, 3, 3, 2]));
        assert!(tape.concat(&[a, bad], 1).is_err());

        let k = tape.leaf(&Tensor::full([1, 2, 4, 6], 3.5));
        let p = tape.mean_pool2d(k, (2, 3)).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2, 3]);
        assert!(tape.value(p).iter().all(|&v| (v - 3.5).abs() < 1e-15));

        let f = tape.flatten(b).unwrap();
        assert_eq!(tape.shape(f), &[2, 27]);
        let n = tape.narrow(f, 1, 2, 5).unwrap();
        assert_eq!(tape.shape(n), &[2, 5]);
        assert!(tape.narrow(f, 1, 25, 5).is_err());
    }

    #[test]
    fn pairwise_abs_mean_matches_double_sum() {
        let mut rng = crate::tensor::RngState::new(11);
        let mut t = Tensor::randn([3, 17], &mut rng);
        // force ties
        t.data_mut()[5] = t.data()[6];
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.pairwise_abs_mean(x).unwrap();
        for (r, row) in t.data().chunks_exact(17).enumerate() {
            let brute: f64 = row
                .iter()
                .flat_map(|a| row.iter().map(move |b| (a - b).abs()))
                .sum::<f64>()
                / (17.0 * 17.0);
            assert!((tape.value(y)[r] - brute).abs() < 1e-13);
        }
    }
}
