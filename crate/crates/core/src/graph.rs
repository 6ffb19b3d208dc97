//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters enter
//! the graph through [`Graph::param`]; only trainable parameters (and nodes
//! derived from them) require gradients, so frozen subgraphs cost nothing in
//! [`Graph::backward`].

use crate::ops;
use crate::param::{Gradients, ParamId, ParamSet};
use crate::tensor::{shape_err, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        probs: NodeId,
        class: usize,
    },
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Scale(NodeId, f64),
    Mean(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    num_params: usize,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.num_params = self.num_params.max(params.len());
        let p = params.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(v, Op::Conv2d { input, kernel, bias }, rg))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (v, argmax) = ops::maxpool2_with_argmax(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::global_avg_pool(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::GlobalAvgPool(input), rg))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(v, Op::Dense { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(v, Op::Relu(input), rg)
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::softmax(self.value(logits))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(v, Op::Softmax(logits), rg))
    }

    pub fn cross_entropy(&mut self, probs: NodeId, class: usize) -> Result<NodeId, TensorError> {
        let v = ops::cross_entropy(self.value(probs), class)?;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { probs, class }, rg))
    }

    /// Concatenates vectors end to end, in argument order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "nothing to concatenate"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 1 {
                return Err(shape_err("concat", format!("expected vectors, got {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_vec(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(v), Op::Sum(input), rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(input).clone();
        for x in v.data_mut() {
            *x *= factor;
        }
        let rg = self.any_grad(&[input]);
        self.push(v, Op::Scale(input, factor), rg)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, scalars: &[NodeId]) -> Result<NodeId, TensorError> {
        if scalars.is_empty() {
            return Err(shape_err("mean", "no terms"));
        }
        let mut total = 0.0;
        for &s in scalars {
            let t = self.value(s);
            if !t.is_scalar() {
                return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
            }
            total += t.item();
        }
        let v = total / scalars.len() as f64;
        let rg = self.any_grad(scalars);
        Ok(self.push(Tensor::scalar(v), Op::Mean(scalars.to_vec()), rg))
    }

    /// Sign pattern of every ReLU input and the argmax choice of every
    /// max-pool window. Two evaluations with equal patterns lie on the same
    /// smooth piece of the network function.
    pub fn kink_pattern(&self) -> Vec<u64> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => pattern.extend(self.value(*input).data().iter().map(|&x| u64::from(x > 0.0))),
                Op::MaxPool2 { argmax, .. } => pattern.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        pattern
    }

    /// Gradients of the scalar `loss` for every trainable parameter reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads = Gradients::empty(self.num_params);
        if !self.requires_grad(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut adj[id.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => grads.accumulate(*pid, &g),
                Op::Conv2d { input, kernel, bias } => {
                    let need = [rg(*input), rg(*kernel), rg(*bias)];
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*kernel), &g, need);
                    if let Some(t) = cg.input {
                        acc(&mut adj, *input, t);
                    }
                    if let Some(t) = cg.kernel {
                        acc(&mut adj, *kernel, t);
                    }
                    if let Some(t) = cg.bias {
                        acc(&mut adj, *bias, t);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let t = ops::maxpool2_backward(self.value(*input).shape(), argmax, &g);
                    acc(&mut adj, *input, t);
                }
                Op::GlobalAvgPool(input) => {
                    let t = ops::global_avg_pool_backward(self.value(*input).shape(), &g);
                    acc(&mut adj, *input, t);
                }
                Op::Dense { input, weight, bias } => {
                    let need = [rg(*input), rg(*weight), rg(*bias)];
                    let (gi, gw, gb) = ops::dense_backward(self.value(*input), self.value(*weight), &g, need);
                    if let Some(t) = gi {
                        acc(&mut adj, *input, t);
                    }
                    if let Some(t) = gw {
                        acc(&mut adj, *weight, t);
                    }
                    if let Some(t) = gb {
                        acc(&mut adj, *bias, t);
                    }
                }
                Op::Relu(input) => {
                    let t = ops::relu_backward(self.value(*input), &g);
                    acc(&mut adj, *input, t);
                }
                Op::Softmax(input) => {
                    let t = ops::softmax_backward(&node.value, &g);
                    acc(&mut adj, *input, t);
                }
                Op::CrossEntropy { probs, class } => {
                    let t = ops::cross_entropy_backward(self.value(*probs), *class, g.item());
                    acc(&mut adj, *probs, t);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if rg(p) {
                            acc(&mut adj, p, Tensor::from_vec(g.data()[offset..offset + n].to_vec()));
                        }
                        offset += n;
                    }
                }
                Op::Sum(input) => {
                    let t = Tensor::full(self.value(*input).shape(), g.item());
                    acc(&mut adj, *input, t);
                }
                Op::Scale(input, factor) => {
                    let mut t = g;
                    for v in t.data_mut() {
                        *v *= factor;
                    }
                    acc(&mut adj, *input, t);
                }
                Op::Mean(terms) => {
                    let share = g.item() / terms.len() as f64;
                    for &s in terms {
                        if rg(s) {
                            acc(&mut adj, s, Tensor::scalar(share));
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: Tensor) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("w", value).unwrap();
        ps
    }

    #[test]
    fn sum_gives_ones() {
        let ps = one_param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&ps, ParamId(0));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn zero_scale_gives_zeros() {
        let ps = one_param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut g = Graph::new();
        let w = g.param(&ps, ParamId(0));
        let z = g.scale(w, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut ps = one_param(Tensor::from_vec(vec![1.0, 2.0]));
        ps.get_mut(ParamId(0)).trainable = false;
        let mut g = Graph::new();
        let w = g.param(&ps, ParamId(0));
        let loss = g.sum(w);
        assert!(g.backward(loss).unwrap().get(ParamId(0)).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let ps = one_param(Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&ps, ParamId(0));
        assert_eq!(g.backward(w), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn maxpool_gradient_goes_to_first_max() {
        let ps = one_param(Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 1.0, 1.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&ps, ParamId(0));
        let p = g.maxpool2(w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
