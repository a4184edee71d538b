//! Record-then-replay reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough context to run its adjoint;
//! [`Graph::backward`] walks the record once in reverse.

use super::conv::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        geometry: ConvGeometry,
    },
    UpsampleNearest2x {
        input: TensorId,
    },
    LeakyRelu {
        input: TensorId,
        slope: f64,
    },
    Sigmoid {
        input: TensorId,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    Sum {
        input: TensorId,
    },
    SumSquares {
        input: TensorId,
    },
    /// Scalar function of one tensor whose gradient was computed eagerly.
    ScalarFn {
        input: TensorId,
        grad: Vec<f64>,
        name: &'static str,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest2x { .. } => "upsample_nearest2x",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
            Op::ScalarFn { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[TensorId]) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("tensor id {} is not part of this graph", id.0)))
        }
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        for id in [input, weight, bias] {
            self.check_id(id)?;
        }
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let out = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.output_shape(), out)?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            value,
            &[input, weight, bias],
        )
    }

    pub fn upsample_nearest2x(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let (c, h, w) = self.value(input).dims3()?;
        let src = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                let src_row = &src[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                let dst_row = &mut out[(ch * h2 + i) * w2..(ch * h2 + i + 1) * w2];
                for (pair, &v) in dst_row.chunks_exact_mut(2).zip(src_row) {
                    pair[0] = v;
                    pair[1] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        self.push(Op::UpsampleNearest2x { input }, value, &[input])
    }

    /// `max(x, slope * x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, input: TensorId, slope: f64) -> Result<TensorId> {
        self.check_id(input)?;
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky_relu slope must be in (0, 1), got {slope}")));
        }
        let x = self.value(input);
        let out = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::LeakyRelu { input, slope }, value, &[input])
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::Sigmoid { input }, value, &[input])
    }

    /// Stacks `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_channels needs at least one input".into()));
        }
        let mut channels = 0;
        let mut spatial = None;
        for &id in inputs {
            self.check_id(id)?;
            let (c, h, w) = self.value(id).dims3()?;
            match spatial {
                None => spatial = Some((h, w)),
                Some(hw) if hw != (h, w) => {
                    return Err(Error::dim(format!(
                        "concat_channels spatial sizes differ: {hw:?} vs {:?}",
                        (h, w)
                    )))
                }
                Some(_) => {}
            }
            channels += c;
        }
        let (h, w) = spatial.expect("at least one input");
        let mut out = Vec::with_capacity(channels * h * w);
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::new(vec![channels, h, w], out)?;
        self.push(
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            value,
            inputs,
        )
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_values(&self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_values(a, b, |x, y| x + y)?;
        self.push(Op::Add { a, b }, value, &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_values(a, b, |x, y| x - y)?;
        self.push(Op::Sub { a, b }, value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_values(a, b, |x, y| x * y)?;
        self.push(Op::Mul { a, b }, value, &[a, b])
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId> {
        self.check_id(input)?;
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push(Op::Scale { input, factor }, value, &[input])
    }

    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let s = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(s), &[input])
    }

    pub fn sum_squares(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.push(Op::SumSquares { input }, Tensor::scalar(s), &[input])
    }

    /// Records a scalar function of `input` whose value and gradient the
    /// caller has already evaluated analytically.
    pub fn scalar_fn(
        &mut self,
        input: TensorId,
        value: f64,
        grad: Vec<f64>,
        name: &'static str,
    ) -> Result<TensorId> {
        self.check_id(input)?;
        if grad.len() != self.value(input).numel() {
            return Err(Error::dim(format!(
                "{name}: gradient has {} entries, input has {}",
                grad.len(),
                self.value(input).numel()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        self.push(Op::ScalarFn { input, grad, name }, Tensor::scalar(value), &[input])
    }

    /// Reverse sweep from a scalar `loss`. May run once per recorded graph.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardReused);
        }
        self.check_id(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if upstream.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, upstream: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |id: TensorId| nodes[id.0].requires_grad;
        // Accumulates into the gradient slot of `id`, allocating zeros on first use.
        let mut accumulate = |id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
            f(slot);
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let g = conv::backward(
                    geometry,
                    nodes[input.0].value.data(),
                    nodes[weight.0].value.data(),
                    upstream,
                    wants(*input),
                    wants(*weight),
                    wants(*bias),
                );
                for (id, grad) in [(*input, g.input), (*weight, g.weight), (*bias, g.bias)] {
                    if let Some(grad) = grad {
                        accumulate(id, &mut |slot| add_into(slot, &grad));
                    }
                }
            }
            Op::UpsampleNearest2x { input } => {
                let (c, h, w) = nodes[input.0].value.dims3().expect("checked at record time");
                let w2 = 2 * w;
                accumulate(*input, &mut |slot| {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let base = (ch * 2 * h + 2 * i) * w2 + 2 * j;
                                slot[(ch * h + i) * w + j] += upstream[base]
                                    + upstream[base + 1]
                                    + upstream[base + w2]
                                    + upstream[base + w2 + 1];
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = nodes[input.0].value.data();
                accumulate(*input, &mut |slot| {
                    for ((s, &g), &v) in slot.iter_mut().zip(upstream).zip(x) {
                        *s += if v > 0.0 { g } else { slope * g };
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = nodes[idx].value.data();
                accumulate(*input, &mut |slot| {
                    for ((s, &g), &v) in slot.iter_mut().zip(upstream).zip(y) {
                        *s += g * v * (1.0 - v);
                    }
                });
            }
            Op::ConcatChannels { inputs } => {
                let mut offset = 0;
                for &id in inputs {
                    let n = nodes[id.0].value.numel();
                    accumulate(id, &mut |slot| add_into(slot, &upstream[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                accumulate(*a, &mut |slot| add_into(slot, upstream));
                accumulate(*b, &mut |slot| add_into(slot, upstream));
            }
            Op::Sub { a, b } => {
                accumulate(*a, &mut |slot| add_into(slot, upstream));
                accumulate(*b, &mut |slot| {
                    for (s, g) in slot.iter_mut().zip(upstream) {
                        *s -= g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                accumulate(*a, &mut |slot| {
                    for ((s, g), y) in slot.iter_mut().zip(upstream).zip(vb) {
                        *s += g * y;
                    }
                });
                accumulate(*b, &mut |slot| {
                    for ((s, g), x) in slot.iter_mut().zip(upstream).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale { input, factor } => {
                accumulate(*input, &mut |slot| {
                    for (s, g) in slot.iter_mut().zip(upstream) {
                        *s += factor * g;
                    }
                });
            }
            Op::Sum { input } => {
                let g = upstream[0];
                accumulate(*input, &mut |slot| slot.iter_mut().for_each(|s| *s += g));
            }
            Op::SumSquares { input } => {
                let g = upstream[0];
                let x = nodes[input.0].value.data();
                accumulate(*input, &mut |slot| {
                    for (s, v) in slot.iter_mut().zip(x) {
                        *s += 2.0 * g * v;
                    }
                });
            }
            Op::ScalarFn { input, grad, .. } => {
                let g = upstream[0];
                accumulate(*input, &mut |slot| {
                    for (s, d) in slot.iter_mut().zip(grad) {
                        *s += g * d;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
