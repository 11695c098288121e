use super::conv::{self, ConvGeom};
use super::norm;
use super::ops::{self, BinaryKind, UnaryKind};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever its backward rule needs.
pub(crate) enum Op {
    Leaf,
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        // flat index into `b` for every output element when `b` is expanded
        bmap: Option<Vec<usize>>,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddScalar {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    SmoothL1 {
        x: usize,
        beta: f64,
    },
    Softmax {
        x: usize,
        outer: usize,
        group: usize,
        inner: usize,
    },
    SpatialMean {
        x: usize,
    },
    SpatialVar {
        x: usize,
        mean: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        // per input: extent along the axis times the inner block size
        spans: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Narrow {
        x: usize,
        outer: usize,
        span_in: usize,
        offset: usize,
        span_out: usize,
    },
    Expand {
        x: usize,
        map: Vec<usize>,
    },
    MeanPool {
        x: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        planes: usize,
    },
    MulConst {
        x: usize,
        factor: Vec<f64>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        in_f: usize,
        out_f: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        dims: (usize, usize, usize),
    },
    PairwiseAbsMean {
        x: usize,
        rows: usize,
        m: usize,
    },
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a valid topological order because every op consumes existing
/// nodes only.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, data) = (node.shape.clone(), node.data.clone());
        self.push_leaf(shape, data, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node holds a valid tensor")
    }

    /// Single value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if the leaf does not require a
    /// gradient or backward has not reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a single-element `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(gout),
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward_node(&self.nodes, i, &gout, &mut sink);
        }
        Ok(())
    }
}

/// Destination for input gradients during the reverse sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Mutable gradient buffer for node `i`, or `None` when `i` needs no gradient.
    pub(crate) fn buf(&mut self, i: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].data.len();
        Some(self.grads[i].get_or_insert_with(|| vec![0.0; len]))
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Unary { x, .. }
        | Op::Scale { x, .. }
        | Op::AddScalar { x }
        | Op::Clamp { x, .. }
        | Op::SmoothL1 { x, .. }
        | Op::Softmax { x, .. }
        | Op::SpatialMean { x }
        | Op::SpatialVar { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::Reshape { x }
        | Op::Narrow { x, .. }
        | Op::Expand { x, .. }
        | Op::MeanPool { x, .. }
        | Op::MulConst { x, .. }
        | Op::PairwiseAbsMean { x, .. } => vec![*x],
        Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Concat { xs, .. } => xs.clone(),
        Op::Linear { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

fn backward_node(nodes: &[Node], i: usize, gout: &[f64], sink: &mut GradSink<'_>) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x, w, b, geom, cols, ..
        } => conv::conv2d_backward(nodes, *x, *w, *b, geom, cols, gout, sink),
        Op::Linear {
            x,
            w,
            b,
            rows,
            in_f,
            out_f,
        } => conv::linear_backward(nodes, *x, *w, *b, (*rows, *in_f, *out_f), gout, sink),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
            dims,
        } => norm::batchnorm_backward(
            nodes,
            (*x, *gamma, *beta),
            xhat,
            inv_std,
            *batch_stats,
            *dims,
            gout,
            sink,
        ),
        other => ops::backward(nodes, node, other, gout, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0, 3.0]).with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let d = tape.detach(y);
        let z = tape.add(y, d).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(d).is_none());
    }
}
