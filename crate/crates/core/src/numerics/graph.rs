use super::ops::{self, ConvGeometry};
use super::NumericsError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a value slot in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Conv2d { input: Var, kernel: Var, geometry: ConvGeometry },
    ChannelBias { input: Var, bias: Var },
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    UpsampleBilinear { input: Var },
    UpsampleNearest2 { input: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    output: Var,
}

/// Append-only tape of tensor operations.
///
/// Forward evaluation happens eagerly as operations are recorded; `backward`
/// walks the node list in exact reverse order. Recorded values are never
/// mutated, so replaying backward leaves every input untouched.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, trainable: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.trainable.push(trainable);
        Var(self.values.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn is_trainable(&self, var: Var) -> bool {
        self.trainable[var.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn record(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let output = self.push(value, rg, false);
        self.nodes.push(Node { op, output });
        output
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.record(Op::Conv2d { input, kernel, geometry }, out, &[input, kernel]))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.record(Op::ChannelBias { input, bias }, out, &[input, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.record(Op::Relu { input }, out, &[input])
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        Ok(self.record(Op::MaxPool2 { input, argmax }, out, &[input]))
    }

    pub fn upsample_bilinear(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(input), target)?;
        Ok(self.record(Op::UpsampleBilinear { input }, out, &[input]))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample_nearest2(self.value(input))?;
        Ok(self.record(Op::UpsampleNearest2 { input }, out, &[input]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.record(Op::Concat { a, b }, out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.record(Op::Add { a, b }, out, &[a, b]))
    }

    /// Reverse-mode pass seeded with `seed = dL/d(output)`.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(NumericsError::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);

        for node in self.nodes.iter().rev() {
            let Some(upstream) = grads[node.output.0].take() else {
                continue;
            };
            // Outputs keep their gradient so callers can inspect intermediates.
            let mut contributions: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Conv2d { input, kernel, geometry } => {
                    let want_input = self.requires_grad[input.0];
                    let (gi, gk) = ops::conv2d_backward_parts(
                        self.value(*input),
                        self.value(*kernel),
                        geometry,
                        &upstream,
                        want_input,
                    )?;
                    if let Some(gi) = gi {
                        contributions.push((*input, gi));
                    }
                    contributions.push((*kernel, gk));
                }
                Op::ChannelBias { input, bias } => {
                    contributions.push((*bias, ops::add_channel_bias_backward(&upstream)?));
                    contributions.push((*input, upstream.clone()));
                }
                Op::Relu { input } => {
                    contributions.push((*input, ops::relu_backward(self.value(*input), &upstream)?));
                }
                Op::MaxPool2 { input, argmax } => {
                    let shape = self.value(*input).shape();
                    contributions.push((*input, ops::maxpool2_backward(shape, argmax, &upstream)?));
                }
                Op::UpsampleBilinear { input } => {
                    let shape = self.value(*input).shape();
                    contributions.push((*input, ops::upsample_bilinear_backward(shape, &upstream)?));
                }
                Op::UpsampleNearest2 { input } => {
                    contributions.push((*input, ops::upsample_nearest2_backward(&upstream)?));
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_channels_backward(self.value(*a).shape()[0], &upstream)?;
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Add { a, b } => {
                    contributions.push((*a, upstream.clone()));
                    contributions.push((*b, upstream.clone()));
                }
            }
            grads[node.output.0] = Some(upstream);
            for (var, g) in contributions {
                if !self.requires_grad[var.0] {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
