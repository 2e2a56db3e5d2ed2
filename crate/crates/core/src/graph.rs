//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so the node list is already a topological order and
//! backward is a single reverse sweep. A graph can be differentiated
//! exactly once; a second call to [`Graph::backward`] is an error.

use crate::error::{Error, Result};
use crate::layers;
use crate::layers::ConvParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Operation record: the op kind, its input node ids, and whatever the
/// forward pass computed that backward needs again (argmax indices,
/// softmax probabilities).
pub(crate) enum Op {
    Leaf,
    Param {
        name: String,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        p: ConvParams,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    RoiMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BilinearUpsample {
        x: NodeId,
        in_dims: Vec<usize>,
        factor: usize,
    },
    FullyConnected {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    SmoothL1 {
        x: NodeId,
    },
    SoftmaxXent {
        x: NodeId,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        n_eff: usize,
        k: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    Sum {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    /// out[i] = in[index[i]]; backward scatter-adds.
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value)
    }

    /// A leaf whose gradient is harvested by name after backward.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_unchecked(
            Op::Param {
                name: name.to_string(),
            },
            value,
        )
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        debug_assert!(value.all_finite(), "non-finite values in forward output");
        Ok(self.push_unchecked(op, value))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of all named parameters, in insertion order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param { name } => n.value.grad().map(|g| (name.as_str(), g)),
            _ => None,
        })
    }

    // -- arithmetic builders ------------------------------------------------

    fn binary_check(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_check(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(Op::Add { a, b }, out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_check(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        self.push(Op::Sub { a, b }, out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_check(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(Op::Mul { a, b }, out)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= k;
        }
        self.push(Op::Scale { x, k }, out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(dims)?;
        self.push(Op::Reshape { x }, out)
    }

    /// Permutation/selection: out[i] = in[index[i]].
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, out_dims: &[usize]) -> Result<NodeId> {
        let n: usize = out_dims.iter().product();
        if n != index.len() {
            return Err(Error::shape(format!(
                "gather index length {} does not match out dims {:?}",
                index.len(),
                out_dims
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n);
        for &i in &index {
            if i >= src.len() {
                return Err(Error::invalid(format!(
                    "gather index {i} out of range for {} elements",
                    src.len()
                )));
            }
            data.push(src[i]);
        }
        let out = Tensor::new(out_dims, data)?;
        self.push(Op::Gather { x, index }, out)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates the grad slot of every
    /// node that influences the loss (parameters included).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).dims().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &gout, &mut grads);
            self.nodes[i].value.set_grad(gout);
        }
        Ok(())
    }

    /// Dispatch one node's backward rule, accumulating into input grads.
    fn accumulate_inputs(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // split borrows: the node being differentiated vs the grad table
        let node = &self.nodes[i];
        let ensure = |grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; len]);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, p } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                ensure(grads, *x, xv.numel());
                ensure(grads, *w, wv.numel());
                ensure(grads, *b, self.value(*b).numel());
                // take the three buffers out to satisfy the borrow checker
                let mut gx = grads[x.0].take().unwrap();
                let mut gw = grads[w.0].take().unwrap();
                let mut gb = grads[b.0].take().unwrap();
                layers::conv2d_bwd(xv, wv, p, gout, &mut gx, &mut gw, &mut gb);
                grads[x.0] = Some(gx);
                grads[w.0] = Some(gw);
                grads[b.0] = Some(gb);
            }
            Op::MaxPool2d { x, argmax } | Op::RoiMaxPool { x, argmax } => {
                ensure(grads, *x, self.value(*x).numel());
                layers::maxpool2d_bwd(argmax, gout, grads[x.0].as_mut().unwrap());
            }
            Op::BilinearUpsample { x, in_dims, factor } => {
                ensure(grads, *x, self.value(*x).numel());
                layers::bilinear_bwd(in_dims, *factor, gout, grads[x.0].as_mut().unwrap());
            }
            Op::FullyConnected { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                ensure(grads, *x, xv.numel());
                ensure(grads, *w, wv.numel());
                ensure(grads, *b, self.value(*b).numel());
                let mut gx = grads[x.0].take().unwrap();
                let mut gw = grads[w.0].take().unwrap();
                let mut gb = grads[b.0].take().unwrap();
                layers::fully_connected_bwd(xv, wv, gout, &mut gx, &mut gw, &mut gb);
                grads[x.0] = Some(gx);
                grads[w.0] = Some(gw);
                grads[b.0] = Some(gb);
            }
            Op::Relu { x } => {
                ensure(grads, *x, self.value(*x).numel());
                layers::relu_bwd(self.value(*x), gout, grads[x.0].as_mut().unwrap());
            }
            Op::SmoothL1 { x } => {
                ensure(grads, *x, self.value(*x).numel());
                layers::smooth_l1_bwd(self.value(*x), gout, grads[x.0].as_mut().unwrap());
            }
            Op::SoftmaxXent {
                x,
                labels,
                probs,
                n_eff,
                k,
            } => {
                ensure(grads, *x, self.value(*x).numel());
                layers::softmax_xent_bwd(
                    probs,
                    labels,
                    *n_eff,
                    *k,
                    gout[0],
                    grads[x.0].as_mut().unwrap(),
                );
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    ensure(grads, *id, gout.len());
                    for (gi, g) in grads[id.0].as_mut().unwrap().iter_mut().zip(gout) {
                        *gi += g;
                    }
                }
            }
            Op::Sub { a, b } => {
                ensure(grads, *a, gout.len());
                for (gi, g) in grads[a.0].as_mut().unwrap().iter_mut().zip(gout) {
                    *gi += g;
                }
                ensure(grads, *b, gout.len());
                for (gi, g) in grads[b.0].as_mut().unwrap().iter_mut().zip(gout) {
                    *gi -= g;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                ensure(grads, *a, gout.len());
                for ((gi, g), v) in grads[a.0]
                    .as_mut()
                    .unwrap()
                    .iter_mut()
                    .zip(gout)
                    .zip(bv.data())
                {
                    *gi += g * v;
                }
                ensure(grads, *b, gout.len());
                for ((gi, g), v) in grads[b.0]
                    .as_mut()
                    .unwrap()
                    .iter_mut()
                    .zip(gout)
                    .zip(av.data())
                {
                    *gi += g * v;
                }
            }
            Op::Scale { x, k } => {
                ensure(grads, *x, gout.len());
                for (gi, g) in grads[x.0].as_mut().unwrap().iter_mut().zip(gout) {
                    *gi += k * g;
                }
            }
            Op::Sum { x } => {
                ensure(grads, *x, self.value(*x).numel());
                let g = gout[0];
                for gi in grads[x.0].as_mut().unwrap() {
                    *gi += g;
                }
            }
            Op::Reshape { x } => {
                ensure(grads, *x, gout.len());
                for (gi, g) in grads[x.0].as_mut().unwrap().iter_mut().zip(gout) {
                    *gi += g;
                }
            }
            Op::Gather { x, index } => {
                ensure(grads, *x, self.value(*x).numel());
                let gx = grads[x.0].as_mut().unwrap();
                for (&src, &g) in index.iter().zip(gout) {
                    gx[src] += g;
                }
            }
        }
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite-difference estimate with step `h`.
///
/// `f` builds a scalar loss from a single input node; the analytic side
/// runs backward once, the numeric side only ever evaluates forward.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(t.clone());
        let loss = f(&mut g, id)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(g.value(loss).dims().to_vec()));
        }
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new();
    let id = g.leaf(x.clone());
    let loss = f(&mut g, id)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(id) {
        Some(gr) => gr.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
