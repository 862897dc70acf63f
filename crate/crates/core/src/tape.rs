//! Reverse-mode differentiation by operation recording.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Node order is execution order, so walking the node list
//! backwards is a valid reverse topological order.

use std::collections::HashMap;

use rand::Rng;

use crate::kernels::{self, BnCache, ConvGeom, PoolGeom};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Padding, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize, usize),
        cache: BnCache<T>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        input_len: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Option<Vec<T>>,
    },
    Softmax {
        input: Var,
    },
    SparseCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
    /// The backward pass reads this value, so [`GradTape::release`] must keep it.
    pinned: bool,
}

/// Ordered record of differentiable operations.
#[derive(Debug)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    recording: bool,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`GradTape::leaf`] or [`GradTape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Stores gradients on the trainable parameters; parameters the loss never
    /// reached get zeros.
    pub fn write_into(&self, store: &mut ParamStore<T>) {
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            p.grad = match self.params.get(&id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            };
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, grad: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e = *e + g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            backward_done: false,
            recording: true,
        }
    }

    /// A tape for forward-only evaluation: [`release`](Self::release) always frees
    /// values and [`backward`](Self::backward) is unavailable.
    pub fn inference() -> Self {
        GradTape {
            nodes: Vec::new(),
            backward_done: false,
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Drops the stored value of `v` unless the backward pass will read it.
    /// The caller promises not to use `v` as an input again.
    pub fn release(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        if !self.recording || !node.pinned {
            node.value = None;
        }
    }

    fn pin(&mut self, v: Var) {
        self.nodes[v.0].pinned = true;
    }

    /// Clears all recorded operations so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("value was released")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            param: None,
            needs_grad,
            pinned: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.pin(v);
        v
    }

    /// An input that never receives a gradient (image batches).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        self.pin(v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geom.cout] {
                    return Err(TensorError::Shape {
                        op: "conv2d",
                        left: w.shape().to_vec(),
                        right: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b);
        check_finite("conv2d", &out)?;
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.pin(input);
        self.pin(weight);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Batch norm over (N, H, W). In train mode the running statistics are updated in place.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims4("batchnorm2d")?;
        let c = dims.1;
        for t in [
            self.value(gamma),
            self.value(beta),
            &*running_mean,
            &*running_var,
        ] {
            if t.shape() != [c] {
                return Err(TensorError::Shape {
                    op: "batchnorm2d",
                    left: x.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let (out, cache, stats) = kernels::batchnorm_forward(
            dims,
            x.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean.data(),
            running_var.data(),
            mode == Mode::Train,
        )?;
        check_finite("batchnorm2d", &out)?;
        if let Some((mean, var)) = stats {
            kernels::update_running(running_mean.data_mut(), &mean);
            kernels::update_running(running_var.data_mut(), &var);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                dims,
                cache,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let needs = self.needs(input);
        let v = self.push(value, Op::Relu { input }, needs);
        self.pin(v);
        v
    }

    /// `k`×`k` max pooling with same padding.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let geom = PoolGeom::new(x.shape(), k, stride)?;
        let (out, argmax) = kernels::maxpool_forward(&geom, x.data());
        let input_len = x.numel();
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::MaxPool {
                input,
                input_len,
                argmax,
            },
            needs,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let plane = h * w;
        let denom = T::from_usize(plane).expect("plane fits scalar");
        let out: Vec<T> = x
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::GlobalAvgPool { input, plane }, needs))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, d) = x.dims2("dense")?;
        let (wd, u) = w.dims2("dense")?;
        if wd != d || b.shape() != [u] {
            return Err(TensorError::Shape {
                op: "dense",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let out = kernels::dense_forward(n, d, u, x.data(), w.data(), b.data());
        check_finite("dense", &out)?;
        let value = Tensor::new(vec![n, u], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.pin(input);
        self.pin(weight);
        self.pin(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`; infer mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Argument {
                op: "dropout",
                reason: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        let x = self.value(input).clone();
        let needs = self.needs(input);
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(self.push(x, Op::Dropout { input, mask: None }, needs));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Dropout {
                input,
                mask: Some(mask),
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (_, k) = x.dims2("softmax")?;
        if k < 2 {
            return Err(TensorError::Argument {
                op: "softmax",
                reason: "need at least two classes".into(),
            });
        }
        let value = Tensor::new(x.shape().to_vec(), kernels::softmax_rows(k, x.data()))?;
        let needs = self.needs(input);
        let v = self.push(value, Op::Softmax { input }, needs);
        self.pin(v);
        Ok(v)
    }

    /// Mean sparse categorical cross-entropy computed from logits.
    pub fn sparse_ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = x.dims2("sparse_ce_loss")?;
        if n != labels.len() {
            return Err(TensorError::Shape {
                op: "sparse_ce_loss",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let (loss, probs) = kernels::sparse_ce_forward(k, x.data(), labels)?;
        check_finite("sparse_ce_loss", &[loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SparseCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Elementwise sum of two equally shaped values (the residual add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(value, Op::Sum { input }, needs)
    }

    /// `Σ xᵢ·wᵢ` against a constant weight tensor; projects a tensor output onto a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                left: x.shape().to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        let s = x
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&x, &w)| a + x * w);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            needs,
        ))
    }

    /// Propagates d(loss)/d(node) back to every leaf. Intermediate values are released
    /// as the sweep passes them, so the tape must be [`reset`](Self::reset) before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let shape = node.value.as_ref().map(|v| v.shape().to_vec());
            match &node.op {
                Op::Leaf => {
                    let g = Tensor::new(shape.expect("leaf value kept"), dy)?;
                    match node.param {
                        Some(id) => {
                            out.params.insert(id, g);
                        }
                        None => {
                            out.leaves.insert(Var(idx), g);
                        }
                    }
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.needs(*input);
                    let g = kernels::conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &dy,
                        need_input,
                    );
                    if need_input {
                        accumulate(&mut grads[input.0], g.input);
                    }
                    accumulate(&mut grads[weight.0], g.weight);
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], g.bias);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    dims,
                    cache,
                } => {
                    let g =
                        kernels::batchnorm_backward(*dims, self.value(*gamma).data(), cache, &dy);
                    accumulate(&mut grads[input.0], g.input);
                    accumulate(&mut grads[gamma.0], g.gamma);
                    accumulate(&mut grads[beta.0], g.beta);
                }
                Op::Relu { input } => {
                    // relu(x) > 0 exactly where x > 0
                    let y = node.value.as_ref().expect("relu output pinned").data();
                    let d = y
                        .iter()
                        .zip(dy)
                        .map(|(&y, g)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[input.0], d);
                }
                Op::MaxPool {
                    input,
                    input_len,
                    argmax,
                } => {
                    accumulate(
                        &mut grads[input.0],
                        kernels::maxpool_backward(*input_len, argmax, &dy),
                    );
                }
                Op::GlobalAvgPool { input, plane } => {
                    let plane = *plane;
                    let denom = T::from_usize(plane).expect("plane fits scalar");
                    let d = dy
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g / denom, plane))
                        .collect();
                    accumulate(&mut grads[input.0], d);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let (n, d) = x.dims2("dense")?;
                    let u = self.value(*bias).numel();
                    let g =
                        kernels::dense_backward(n, d, u, x.data(), self.value(*weight).data(), &dy);
                    accumulate(&mut grads[input.0], g.input);
                    accumulate(&mut grads[weight.0], g.weight);
                    accumulate(&mut grads[bias.0], g.bias);
                }
                Op::Dropout { input, mask } => {
                    let d = match mask {
                        Some(m) => dy.iter().zip(m).map(|(&g, &m)| g * m).collect(),
                        None => dy,
                    };
                    accumulate(&mut grads[input.0], d);
                }
                Op::Softmax { input } => {
                    let p = node.value.as_ref().expect("softmax output kept");
                    let k = p.shape()[1];
                    accumulate(
                        &mut grads[input.0],
                        kernels::softmax_backward(k, p.data(), &dy),
                    );
                }
                Op::SparseCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.len() / labels.len();
                    accumulate(
                        &mut grads[logits.0],
                        kernels::sparse_ce_backward(k, probs, labels, dy[0]),
                    );
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                    accumulate(&mut grads[a.0], dy);
                }
                Op::Sum { input } => {
                    let n = self.value(*input).numel();
                    accumulate(&mut grads[input.0], vec![dy[0]; n]);
                }
                Op::WeightedSum { input, weights } => {
                    let d = weights.data().iter().map(|&w| w * dy[0]).collect();
                    accumulate(&mut grads[input.0], d);
                }
            }
            // Consumers of this node have all been processed; its value is no longer needed.
            self.nodes[idx].value = None;
        }
        Ok(out)
    }

    /// Runs [`backward`](Self::backward) and stores the parameter gradients on `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.write_into(store);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, -0.0, 1e-300]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::BackwardTwice);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::full(&[2], 3.0), true);
        let unused = store.add("unused", Tensor::full(&[3], 1.0), true);
        store.get_mut(unused).grad = Tensor::full(&[3], 9.0);
        let mut tape = GradTape::new();
        let u = tape.param(&store, used);
        let s = tape.sum(u);
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(used).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0; 3]);
    }

    #[test]
    fn residual_fan_out_accumulates() {
        // y = relu(x) + x, so dy/dx = 2 where x > 0.
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let r = tape.relu(x);
        let y = tape.add(r, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 1.0]);
    }
}
