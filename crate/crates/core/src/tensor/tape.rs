use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
    },
    TemporalGroupConv {
        input: usize,
        weights: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Sigmoid(usize),
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Reshape(usize),
    Bce {
        p: usize,
        labels: Vec<f64>,
        mask: Vec<bool>,
    },
    BceWithLogits {
        logits: usize,
        labels: Vec<f64>,
        mask: Vec<bool>,
    },
    SmoothL1 {
        pred: usize,
        target: Vec<f64>,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Execution record for one forward pass.
///
/// Operations are appended in execution order; [`Tape::backward`] walks them
/// in exact reverse. A tape can be differentiated once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    finished: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_mask(op: &'static str, len: usize, labels: usize, mask: usize) -> Result<()> {
    if labels != len || mask != len {
        return Err(Error::shape(
            op,
            format!("{len} predictions, {labels} targets, {mask} mask entries"),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    /// Records a constant (not differentiated with respect to parameters,
    /// though its gradient is still available from [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a leaf that never receives a gradient, letting convolutions
    /// skip the input half of their backward pass.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let out = kernels::conv2d(
            &self.nodes[i].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                stride,
                pad,
            },
        ))
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, spatial_pad: usize) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let out = kernels::conv3d(
            &self.nodes[i].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            spatial_pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv3d {
                input: i,
                weight: w,
                bias: b,
                pad: spatial_pad,
            },
        ))
    }

    pub fn temporal_group_conv(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weights)?);
        let out = kernels::temporal_group_conv(&self.nodes[i].value, &self.nodes[w].value)?;
        Ok(self.push(out, Op::TemporalGroupConv { input: i, weights: w }))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let (out, argmax) = kernels::maxpool2d(&self.nodes[i].value, k, stride)?;
        Ok(self.push(out, Op::MaxPool2d { input: i, argmax }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        )?;
        Ok(self.push(out, Op::Sigmoid(i)))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())?;
        Ok(self.push(out, Op::Relu(i)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
        )?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        )?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        Ok(self.push(out, Op::Scale(i, factor)))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let s = self.nodes[i].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(i)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(i)))
    }

    /// `-Σ_mask [q ln p + (1 - q) ln(1 - p)]` on probabilities.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
        let i = self.idx(p)?;
        let pv = self.nodes[i].value.data();
        check_mask("bce_loss", pv.len(), labels.len(), mask.len())?;
        let mut loss = 0.0;
        for (k, ((&pk, &q), &m)) in pv.iter().zip(labels).zip(mask).enumerate() {
            if !m {
                continue;
            }
            if !(pk > 0.0 && pk < 1.0) {
                return Err(Error::ProbabilityRange {
                    op: "bce_loss",
                    index: k,
                    value: pk,
                });
            }
            loss -= q * pk.ln() + (1.0 - q) * (1.0 - pk).ln();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: i,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy evaluated on logits; equals
    /// `bce_loss(sigmoid(z), ..)` but never saturates.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
        let i = self.idx(logits)?;
        let z = self.nodes[i].value.data();
        check_mask("bce_with_logits", z.len(), labels.len(), mask.len())?;
        let loss = z
            .iter()
            .zip(labels)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&zk, &q), _)| kernels::softplus(zk) - q * zk)
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: i,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let i = self.idx(pred)?;
        let x = self.nodes[i].value.data();
        check_mask("smooth_l1", x.len(), target.len(), mask.len())?;
        let loss = x
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| kernels::smooth_l1(a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred: i,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }
        self.finished = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor>], at: usize, g: Tensor) {
            match &mut grads[at] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for n in (0..=root).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Input | Op::Constant | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gi, gw, gb) = kernels::conv2d_grads(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        &self.nodes[*bias].value,
                        *stride,
                        *pad,
                        &g,
                        !matches!(self.nodes[*input].op, Op::Constant),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let (gi, gw, gb) = kernels::conv3d_grads(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        &self.nodes[*bias].value,
                        *pad,
                        &g,
                        !matches!(self.nodes[*input].op, Op::Constant),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::TemporalGroupConv { input, weights } => {
                    let (gi, gw) = kernels::temporal_group_conv_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weights].value,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gi = Tensor::zeros(self.nodes[*input].value.shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gi.data_mut()[src] += gv;
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sigmoid(i) => {
                    let gi = Tensor::from_fn(g.shape(), |k| {
                        let s = node.value.data()[k];
                        g.data()[k] * s * (1.0 - s)
                    });
                    accumulate(&mut grads, *i, gi);
                }
                Op::Relu(i) => {
                    let x = &self.nodes[*i].value;
                    let gi = Tensor::from_fn(g.shape(), |k| if x.data()[k] > 0.0 { g.data()[k] } else { 0.0 });
                    accumulate(&mut grads, *i, gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = Tensor::from_fn(g.shape(), |k| g.data()[k] * y.data()[k]);
                    let gb = Tensor::from_fn(g.shape(), |k| g.data()[k] * x.data()[k]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(i, f) => {
                    let gi = Tensor::from_fn(g.shape(), |k| g.data()[k] * f);
                    accumulate(&mut grads, *i, gi);
                }
                Op::Sum(i) => {
                    let gi = Tensor::full(self.nodes[*i].value.shape(), g.item());
                    accumulate(&mut grads, *i, gi);
                }
                Op::Reshape(i) => {
                    let gi = g.clone().reshape(self.nodes[*i].value.shape())?;
                    accumulate(&mut grads, *i, gi);
                }
                Op::Bce { p, labels, mask } => {
                    let up = g.item();
                    let pv = &self.nodes[*p].value;
                    let gi = Tensor::from_fn(pv.shape(), |k| {
                        if !mask[k] {
                            return 0.0;
                        }
                        let (pk, q) = (pv.data()[k], labels[k]);
                        -up * (q / pk - (1.0 - q) / (1.0 - pk))
                    });
                    accumulate(&mut grads, *p, gi);
                }
                Op::BceWithLogits { logits, labels, mask } => {
                    let up = g.item();
                    let z = &self.nodes[*logits].value;
                    let gi = Tensor::from_fn(z.shape(), |k| {
                        if mask[k] {
                            up * (kernels::sigmoid(z.data()[k]) - labels[k])
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *logits, gi);
                }
                Op::SmoothL1 { pred, target, mask } => {
                    let up = g.item();
                    let x = &self.nodes[*pred].value;
                    let gi = Tensor::from_fn(x.shape(), |k| {
                        if mask[k] {
                            up * kernels::smooth_l1_grad(x.data()[k] - target[k])
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *pred, gi);
                }
            }
            grads[n] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value; `None` when
    /// the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, summed over every use of each parameter.
    /// Parameters absent from the tape receive zeros.
    pub fn for_params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.grads[id.0].add_assign(g);
            }
        }
        out
    }
}
