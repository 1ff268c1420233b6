//! Reverse-mode differentiation over recorded tensor operations.
//!
//! A [`Tape`] is an append-only list of nodes. Every op takes the ids of
//! earlier nodes, computes its value eagerly and records enough to run its
//! adjoint. [`backward`] walks the list in reverse.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, Padding};
use crate::loss::{self, ClassWeights, GroundTruth};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    },
    Relu(VarId),
    Sigmoid(VarId),
    AvgPool {
        x: VarId,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2x2 {
        x: VarId,
        argmax: Vec<usize>,
    },
    Resize {
        x: VarId,
        h: usize,
        w: usize,
    },
    Concat(Vec<VarId>),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Sum(VarId),
    StageLoss {
        logits: VarId,
        gt: Arc<GroundTruth>,
        weights: ClassWeights,
    },
}

impl Op {
    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Sum(x) => vec![*x],
            Op::AvgPool { x, .. } | Op::MaxPool2x2 { x, .. } | Op::Resize { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::StageLoss { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Recorded computation. Single-writer; one training step owns one tape.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf (input or parameter) node, `None` if the loss
    /// does not depend on it. Intermediate gradients are released during
    /// the backward sweep.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter; zero-filled when unreachable.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Hash of every branch decision on the tape: the sign of each relu
    /// input and the winner of each max-pool window. Two recordings with
    /// equal patterns lie on the same linear piece of those operations.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2x2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> VarId {
        self.push(Op::Param(name.into()), value)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    ) -> Result<VarId> {
        let value = kernels::conv2d(
            self.value(x),
            &spec,
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        Ok(self.push(Op::Conv2d { x, w, b, spec }, value))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = kernels::relu(self.value(x));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = kernels::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn avg_pool(
        &mut self,
        x: VarId,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<VarId> {
        let value = kernels::avg_pool(self.value(x), window, stride, padding)?;
        Ok(self.push(
            Op::AvgPool {
                x,
                window,
                stride,
                padding,
            },
            value,
        ))
    }

    pub fn max_pool_2x2(&mut self, x: VarId) -> Result<VarId> {
        let (value, argmax) = kernels::max_pool_2x2(self.value(x))?;
        Ok(self.push(Op::MaxPool2x2 { x, argmax }, value))
    }

    pub fn resize(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let value = kernels::bilinear_resize(self.value(x), h, w)?;
        Ok(self.push(Op::Resize { x, h, w }, value))
    }

    pub fn concat(&mut self, xs: &[VarId]) -> Result<VarId> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let value = kernels::concat_channels(&refs)?;
        Ok(self.push(Op::Concat(xs.to_vec()), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Scalar class-balanced loss of a `(1, 1, h, w)` logit map.
    pub fn stage_loss(
        &mut self,
        logits: VarId,
        gt: Arc<GroundTruth>,
        weights: ClassWeights,
    ) -> Result<VarId> {
        let value = Tensor::scalar(loss::stage_loss(self.value(logits), &gt, &weights)?);
        Ok(self.push(
            Op::StageLoss {
                logits,
                gt,
                weights,
            },
            value,
        ))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::Tape(format!("node {i} reads later node {}", inp.0)));
                }
            }
            let v = |id: &VarId| &vals[id.0];
            let out = match &node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                Op::Conv2d { x, w, b, spec } => {
                    kernels::conv2d(v(x), spec, v(w), b.as_ref().map(v))?
                }
                Op::Relu(x) => kernels::relu(v(x)),
                Op::Sigmoid(x) => kernels::sigmoid(v(x)),
                Op::AvgPool {
                    x,
                    window,
                    stride,
                    padding,
                } => kernels::avg_pool(v(x), *window, *stride, *padding)?,
                Op::MaxPool2x2 { x, .. } => kernels::max_pool_2x2(v(x))?.0,
                Op::Resize { x, h, w } => kernels::bilinear_resize(v(x), *h, *w)?,
                Op::Concat(xs) => {
                    let refs: Vec<&Tensor<T>> = xs.iter().map(v).collect();
                    kernels::concat_channels(&refs)?
                }
                Op::Add(a, b) => kernels::add(v(a), v(b))?,
                Op::Mul(a, b) => kernels::mul(v(a), v(b))?,
                Op::Sum(x) => Tensor::scalar(v(x).sum()),
                Op::StageLoss {
                    logits,
                    gt,
                    weights,
                } => Tensor::scalar(loss::stage_loss(v(logits), gt, weights)?),
            };
            vals.push(out);
        }
        Ok(vals)
    }

    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        backward(self, loss)
    }

    fn param_nodes(&self) -> impl Iterator<Item = (usize, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((i, name.as_str())),
                _ => None,
            })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `d(loss)/d(node)` for every node the scalar `loss` depends on.
///
/// Parameters the loss does not reach get zero gradients. A parameter name
/// recorded more than once has its gradients summed.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: VarId) -> Result<Gradients<T>> {
    let n = tape.nodes.len();
    if loss.0 >= n {
        return Err(Error::Tape(format!(
            "loss id {} not on tape ({n} nodes)",
            loss.0
        )));
    }
    if tape.value(loss).numel() != 1 {
        return Err(Error::Tape(format!(
            "loss must be a scalar, got shape {}",
            tape.value(loss).shape()
        )));
    }
    for (i, node) in tape.nodes.iter().enumerate() {
        if node.op.inputs().iter().any(|inp| inp.0 >= i) {
            return Err(Error::Tape(format!(
                "cycle: node {i} depends on a later node"
            )));
        }
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
    grads[loss.0] = Some(Tensor::full(tape.value(loss).shape(), T::one()));

    for i in (0..=loss.0).rev() {
        let node = &tape.nodes[i];
        if matches!(node.op, Op::Input | Op::Param(_)) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let val = |id: &VarId| tape.value(*id);
        match &node.op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, spec } => {
                let cg = kernels::conv2d_backward(val(x), spec, val(w), b.as_ref().map(val), &g)?;
                accumulate(&mut grads[x.0], cg.input);
                accumulate(&mut grads[w.0], cg.weights);
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Relu(x) => {
                let gx = kernels::relu_backward(val(x), &g);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sigmoid(x) => {
                let gx = kernels::sigmoid_backward(&node.value, &g);
                accumulate(&mut grads[x.0], gx);
            }
            Op::AvgPool {
                x,
                window,
                stride,
                padding,
            } => {
                let gx = kernels::avg_pool_backward(val(x).shape(), *window, *stride, *padding, &g);
                accumulate(&mut grads[x.0], gx);
            }
            Op::MaxPool2x2 { x, argmax } => {
                let gx = kernels::max_pool_2x2_backward(val(x).shape(), argmax, &g);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Resize { x, .. } => {
                let gx = kernels::bilinear_resize_backward(val(x).shape(), &g);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Concat(xs) => {
                let shapes: Vec<Shape> = xs.iter().map(|x| val(x).shape()).collect();
                for (x, gx) in xs
                    .iter()
                    .zip(kernels::concat_channels_backward(&shapes, &g))
                {
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g);
            }
            Op::Mul(a, b) => {
                let ga = kernels::mul(&g, val(b))?;
                let gb = kernels::mul(&g, val(a))?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(&mut grads[x.0], Tensor::full(val(x).shape(), s));
            }
            Op::StageLoss {
                logits,
                gt,
                weights,
            } => {
                let s = g.data()[0];
                let mut gx = loss::stage_loss_grad(val(logits), gt, weights)?;
                for v in gx.data_mut() {
                    *v *= s;
                }
                accumulate(&mut grads[logits.0], gx);
            }
        }
    }

    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (i, name) in tape.param_nodes() {
        let g = grads[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.nodes[i].value.shape()));
        match params.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                params.insert(name.to_string(), g);
            }
        }
    }
    Ok(Gradients {
        by_node: grads,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Central-difference check of d(sum(f(x) * r))/dx for a unary op.
    fn check_unary(shape: Shape, seed: u64, f: impl Fn(&mut Tape<f64>, VarId) -> VarId) {
        let x0 = rand_t(shape, seed);
        let r = rand_t(Shape::new(1, 1, 1, 16 * shape.numel()), seed + 1);
        let eval = |x: &Tensor<f64>| -> (Tape<f64>, VarId, VarId) {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let y = f(&mut tape, xi);
            let ys = tape.value(y).shape();
            let rr = Tensor::from_vec(ys, r.data()[..ys.numel()].to_vec()).unwrap();
            let ri = tape.input(rr);
            let m = tape.mul(y, ri).unwrap();
            let s = tape.sum(m);
            (tape, xi, s)
        };
        let (tape, xi, s) = eval(&x0);
        let g = backward(&tape, s).unwrap();
        let gx = g.wrt(xi).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let (tp, _, sp) = eval(&xp);
            let (tm, _, sm) = eval(&xm);
            let fd = (tp.value(sp).data()[0] - tm.value(sm).data()[0]) / (2.0 * h);
            let a = gx.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "elem {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = rand_t(Shape::new(1, 2, 3, 3), 7);
        let w = tape.param("w", rand_t(x.shape(), 8));
        let xi = tape.input(x.clone());
        let m = tape.mul(w, xi).unwrap();
        let s = tape.sum(m);
        let g = backward(&tape, s).unwrap();
        assert_eq!(g.param("w").unwrap(), &x);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", rand_t(Shape::new(1, 1, 2, 2), 1));
        let x = tape.input(rand_t(Shape::new(1, 1, 2, 2), 2));
        let s = tape.sum(x);
        let g = backward(&tape, s).unwrap();
        assert!(g.param("w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(w).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(rand_t(Shape::new(1, 1, 2, 2), 2));
        assert!(backward(&tape, x).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = tape.input(Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, &mut rng));
        let spec = ConvSpec::same(3, 4, 3, 2);
        let w = tape.param("w", Tensor::randn(spec.weight_shape(), 0.3, &mut rng));
        let b = tape.param("b", Tensor::randn(spec.bias_shape(), 0.3, &mut rng));
        let c = tape.conv2d(x, w, Some(b), spec).unwrap();
        let r = tape.relu(c);
        let p = tape.max_pool_2x2(r).unwrap();
        let a = tape.avg_pool(p, 3, 1, Padding::Same).unwrap();
        let u = tape.resize(a, 8, 8).unwrap();
        let s = tape.sigmoid(u);
        let _ = tape.sum(s);
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(VarId(i)));
        }
    }

    #[test]
    fn relu_grad_matches_fd_away_from_zero() {
        check_unary(Shape::new(1, 2, 3, 4), 21, |t, x| t.relu(x));
    }

    #[test]
    fn sigmoid_grad() {
        check_unary(Shape::new(1, 1, 4, 4), 22, |t, x| t.sigmoid(x));
    }

    #[test]
    fn avg_pool_grad() {
        check_unary(Shape::new(1, 2, 6, 5), 23, |t, x| {
            t.avg_pool(x, 5, 1, Padding::Same).unwrap()
        });
    }

    #[test]
    fn max_pool_grad() {
        check_unary(Shape::new(2, 1, 6, 7), 24, |t, x| {
            t.max_pool_2x2(x).unwrap()
        });
    }

    #[test]
    fn resize_grad() {
        check_unary(Shape::new(1, 1, 3, 5), 25, |t, x| {
            t.resize(x, 7, 4).unwrap()
        });
        check_unary(Shape::new(1, 1, 8, 8), 26, |t, x| {
            t.resize(x, 3, 5).unwrap()
        });
    }

    #[test]
    fn concat_grad() {
        check_unary(Shape::new(1, 2, 3, 3), 27, |t, x| {
            let s = t.sigmoid(x);
            t.concat(&[x, s, x]).unwrap()
        });
    }

    #[test]
    fn conv_grad_input_weight_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let spec = ConvSpec::same(2, 3, 3, 2);
        let w0 = Tensor::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
        let b0 = Tensor::<f64>::randn(spec.bias_shape(), 0.5, &mut rng);
        let x0 = Tensor::<f64>::randn(Shape::new(2, 2, 6, 5), 1.0, &mut rng);
        let r = Tensor::<f64>::randn(Shape::new(2, 3, 6, 5), 1.0, &mut rng);
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut t = Tape::new();
            let xi = t.input(x.clone());
            let wi = t.param("w", w.clone());
            let bi = t.param("b", b.clone());
            let c = t.conv2d(xi, wi, Some(bi), spec).unwrap();
            let ri = t.input(r.clone());
            let m = t.mul(c, ri).unwrap();
            let s = t.sum(m);
            (t, xi, s)
        };
        let (t, xi, s) = run(&x0, &w0, &b0);
        let g = backward(&t, s).unwrap();
        let h = 1e-6;
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let (t, _, s) = run(x, w, b);
            t.value(s).data()[0]
        };
        let bump = |t: &Tensor<f64>, i: usize, d: f64| {
            let mut c = t.clone();
            c.data_mut()[i] += d;
            c
        };
        for i in 0..w0.numel() {
            let fd = (f(&x0, &bump(&w0, i, h), &b0) - f(&x0, &bump(&w0, i, -h), &b0)) / (2.0 * h);
            assert!((fd - g.param("w").unwrap().data()[i]).abs() < 1e-6);
        }
        for i in 0..b0.numel() {
            let fd = (f(&x0, &w0, &bump(&b0, i, h)) - f(&x0, &w0, &bump(&b0, i, -h))) / (2.0 * h);
            assert!((fd - g.param("b").unwrap().data()[i]).abs() < 1e-6);
        }
        for i in (0..x0.numel()).step_by(7) {
            let fd = (f(&bump(&x0, i, h), &w0, &b0) - f(&bump(&x0, i, -h), &w0, &b0)) / (2.0 * h);
            assert!((fd - g.wrt(xi).unwrap().data()[i]).abs() < 1e-6);
        }
    }
}
