use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::autodiff::conv::ConvCtx;
use crate::autodiff::dense::BnCtx;
use crate::autodiff::softmax::SoftArgmaxCtx;
use crate::autodiff::{Float, Group, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A node whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp<T: Float> {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, given the gradient of the
    /// output. `None` for inputs that take no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

pub(crate) enum Op<T: Float> {
    Leaf,
    Param { group: Group, id: ParamId },
    Add,
    Sub,
    Mul,
    Scale(T),
    Relu,
    Sigmoid,
    SumAll,
    MeanAll,
    Reshape,
    FlattenCbhw { c: usize, b: usize, hw: usize },
    Concat0 { lens: Vec<usize> },
    Slice0 { start: usize },
    Conv2d(ConvCtx),
    Deconv2d(ConvCtx),
    MaxPool2 { argmax: Vec<u32> },
    BatchNorm(BnCtx<T>),
    Linear,
    SpatialSoftmax,
    ChannelSoftmax,
    LogSoftmaxChannels,
    SoftArgmax(SoftArgmaxCtx<T>),
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of every piecewise-linear branch taken: the sign of
    /// each ReLU input and the winner of each max-pool window. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for &x in self.nodes[node.inputs[0].0].value.data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient (gradient-check inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, vec![], true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, vec![], false)
    }

    /// Copies parameter `id` of `store` into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let op = Op::Param { group: store.group(), id };
        self.push(store.get(id).clone(), op, vec![], true)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>, leaf_grad: bool) -> Var {
        let needs_grad = if inputs.is_empty() {
            leaf_grad
        } else {
            inputs.iter().any(|v| self.nodes[v.0].needs_grad)
        };
        self.nodes.push(Node { value, op, inputs, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a node computed outside the engine.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Var {
        self.push(output, Op::Custom(op), inputs.to_vec(), false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, op, vec![a, b], false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(s), vec![a], false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu, vec![a], false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid, vec![a], false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll, vec![a], false)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll, vec![a], false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape, vec![a], false))
    }

    /// `[C, B, H, W]` feature map to `[B, C*H*W]` rows.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 4 {
            return Err(Error::shape("flatten", format!("expected rank 4, got {:?}", v.shape())));
        }
        let (c, b, hw) = (v.dim(0), v.dim(1), v.dim(2) * v.dim(3));
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for ci in 0..c {
            for bi in 0..b {
                let src = &x[(ci * b + bi) * hw..][..hw];
                out[bi * c * hw + ci * hw..][..hw].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![b, c * hw], out)?;
        Ok(self.push(out, Op::FlattenCbhw { c, b, hw }, vec![a], false))
    }

    /// Concatenates along axis 0 (channels for feature maps).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            rows += s[0];
            let v = self.value(p).data();
            lens.push(v.len());
            data.extend_from_slice(v);
        }
        let mut shape = first;
        shape[0] = rows;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat0 { lens }, parts.to_vec(), false))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.dim(0) {
            return Err(Error::shape("slice", format!("{}..{} of {:?}", start, start + len, v.shape())));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, v.data()[start * row..(start + len) * row].to_vec())?;
        Ok(self.push(out, Op::Slice0 { start: start * row }, vec![a], false))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let seed = self.nodes[loss.0].value.map(|_| T::one());
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let gin = backward_op(&node.op, &inputs, &node.value, &gy, &needs);
            grads[i] = Some(gy);
            for ((v, g), need) in node.inputs.iter().zip(gin).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param { group, id } => Some((group, id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Group, ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients of one group, summed over every use of the
    /// parameter in the graph, ordered by id.
    pub fn for_group(&self, group: Group) -> Vec<(ParamId, Tensor<T>)> {
        let mut acc: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for &(g, id, v) in &self.params {
            if g != group {
                continue;
            }
            let Some(grad) = self.grads[v.0].as_ref() else { continue };
            match acc.get_mut(&id) {
                Some(t) => t.add_assign(grad),
                None => {
                    acc.insert(id, grad.clone());
                }
            }
        }
        acc.into_iter().collect()
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn backward_op<T: Float>(
    op: &Op<T>,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    gy: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    use crate::autodiff::{conv, dense, softmax};
    match op {
        Op::Leaf | Op::Param { .. } => vec![],
        Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
        Op::Sub => vec![Some(gy.clone()), Some(gy.map(|g| -g))],
        Op::Mul => {
            let ga = zip(gy, x[1], |g, b| g * b);
            let gb = zip(gy, x[0], |g, a| g * a);
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(s) => vec![Some(gy.map(|g| g * *s))],
        Op::Relu => vec![Some(zip(gy, x[0], |g, v| if v > T::zero() { g } else { T::zero() }))],
        Op::Sigmoid => vec![Some(zip(gy, y, |g, s| g * s * (T::one() - s)))],
        Op::SumAll => vec![Some(x[0].map(|_| gy.item()))],
        Op::MeanAll => {
            let g = gy.item() / T::from_f64(x[0].len() as f64);
            vec![Some(x[0].map(|_| g))]
        }
        Op::Reshape => vec![Some(gy.clone().reshape(x[0].shape().to_vec()).expect("reshape"))],
        Op::FlattenCbhw { c, b, hw } => {
            let mut out = vec![T::zero(); gy.len()];
            let g = gy.data();
            for ci in 0..*c {
                for bi in 0..*b {
                    out[(ci * b + bi) * hw..][..*hw].copy_from_slice(&g[bi * c * hw + ci * hw..][..*hw]);
                }
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), out).expect("flatten"))]
        }
        Op::Concat0 { lens } => {
            let mut off = 0;
            lens.iter()
                .zip(x)
                .map(|(&n, xi)| {
                    let t = Tensor::new(xi.shape().to_vec(), gy.data()[off..off + n].to_vec()).expect("concat");
                    off += n;
                    Some(t)
                })
                .collect()
        }
        Op::Slice0 { start } => {
            let mut g = Tensor::zeros(x[0].shape().to_vec());
            g.data_mut()[*start..*start + gy.len()].copy_from_slice(gy.data());
            vec![Some(g)]
        }
        Op::Conv2d(ctx) => conv::conv2d_backward(ctx, x, gy, needs),
        Op::Deconv2d(ctx) => conv::deconv2d_backward(ctx, x, gy, needs),
        Op::MaxPool2 { argmax } => vec![Some(conv::maxpool2_backward(argmax, x[0], gy))],
        Op::BatchNorm(ctx) => dense::batchnorm_backward(ctx, x, gy),
        Op::Linear => dense::linear_backward(x, gy, needs),
        Op::SpatialSoftmax => vec![Some(softmax::spatial_softmax_backward(y, gy))],
        Op::ChannelSoftmax => vec![Some(softmax::channel_softmax_backward(y, gy))],
        Op::LogSoftmaxChannels => vec![Some(softmax::log_softmax_channels_backward(y, gy))],
        Op::SoftArgmax(ctx) => vec![Some(softmax::soft_argmax_backward(ctx, x[0], gy))],
        Op::Custom(c) => c.backward(x, y, gy),
    }
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
