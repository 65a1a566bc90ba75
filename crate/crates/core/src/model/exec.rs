//! Graph execution: forward with an optional tape, and reverse-mode backward.

use crate::error::{Error, Result};
use crate::ops::{
    conv2d, conv2d_vjp, crop_spatial, crop_spatial_vjp, maxpool2x2, maxpool2x2_vjp, nearest_upsample2x,
    nearest_upsample2x_vjp, relu, relu_vjp, softmax_channels, softmax_channels_vjp, transposed_conv2d,
    transposed_conv2d_vjp, Conv2dParams, PoolIndices,
};
use crate::tensor::{Element, Tensor};

use super::arch::{infer_shapes, ArchitectureSpec, LayerKind, Node};
use super::params::ParameterStore;

/// Activations recorded by [`forward`]. Only a tape produced with
/// `keep_intermediates = true` can be passed to [`backward`].
#[derive(Debug)]
pub struct Tape<'a, T: Element = f32> {
    spec: &'a ArchitectureSpec,
    params: &'a ParameterStore<T>,
    activations: Vec<Option<Tensor<T>>>,
    pool_indices: Vec<Option<PoolIndices>>,
    complete: bool,
}

impl<'a, T: Element> Tape<'a, T> {
    /// Whether every activation was retained.
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn activation(&self, name: &str) -> Option<&Tensor<T>> {
        self.spec.find(name).and_then(|i| self.activations[i].as_ref())
    }
}

/// Parameter gradients (same names and order as the store) plus the
/// gradient with respect to the network input.
#[derive(Clone, Debug)]
pub struct Gradients<T: Element = f32> {
    pub params: ParameterStore<T>,
    pub input: Tensor<T>,
}

fn conv_params<T: Element>(node: &Node, params: &ParameterStore<T>) -> Result<Conv2dParams<T>> {
    let weight = params.get(&node.weight_name())?.clone();
    let bias = params.get(&node.bias_name())?.clone();
    match node.kind {
        LayerKind::Conv { stride, padding, .. } => Conv2dParams::new(weight, bias, stride, padding),
        LayerKind::TransposedConv { .. } => Conv2dParams::new(weight, bias, 2, 0),
        _ => unreachable!("conv_params on a parameter-free node"),
    }
}

/// Runs the graph on `x` of shape `(N, Cin, H, W)` and returns the output of
/// the spec's output node (softmax probabilities for RFBSNet).
///
/// Every activation is scanned for NaN/Inf; the first offending node is
/// reported. Without `keep_intermediates`, activations are released after
/// their last consumer.
pub fn forward<'a, T: Element>(
    spec: &'a ArchitectureSpec,
    params: &'a ParameterStore<T>,
    x: &Tensor<T>,
    keep_intermediates: bool,
) -> Result<(Tensor<T>, Tape<'a, T>)> {
    infer_shapes(spec, x.dims())?;
    let n = spec.nodes().len();
    let last_use = spec.last_use();
    let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
    let mut pools: Vec<Option<PoolIndices>> = vec![None; n];

    for (i, node) in spec.nodes().iter().enumerate() {
        let input = |k: usize| acts[node.inputs[k]].as_ref().expect("inputs precede consumers");
        let wrap = |e: Error| match e {
            e @ Error::Node { .. } => e,
            e => Error::node(&node.name, e.to_string()),
        };
        let y = match node.kind {
            LayerKind::Input { .. } => x.clone(),
            LayerKind::Conv { .. } => conv2d(input(0), &conv_params(node, params)?).map_err(wrap)?,
            LayerKind::TransposedConv { .. } => {
                transposed_conv2d(input(0), &conv_params(node, params)?).map_err(wrap)?
            }
            LayerKind::MaxPool2x2 => {
                let (y, idx) = maxpool2x2(input(0)).map_err(wrap)?;
                if keep_intermediates {
                    pools[i] = Some(idx);
                }
                y
            }
            LayerKind::Relu => relu(input(0)),
            LayerKind::Concat => input(0).concat_channels(input(1)).map_err(wrap)?,
            LayerKind::Add => {
                let mut sum = input(0).clone();
                for k in 1..node.inputs.len() {
                    sum.add_assign(input(k)).map_err(wrap)?;
                }
                sum
            }
            LayerKind::Crop => {
                let d = input(1).dims();
                let (h, w) = (d[2], d[3]);
                crop_spatial(input(0), h, w).map_err(wrap)?
            }
            LayerKind::UpsampleNearest2x => nearest_upsample2x(input(0)).map_err(wrap)?,
            LayerKind::Softmax => softmax_channels(input(0)).map_err(wrap)?,
        };
        if !y.all_finite() {
            return Err(Error::NonFinite { location: format!("node {i} `{}`", node.name) });
        }
        acts[i] = Some(y);
        if !keep_intermediates {
            for &j in &node.inputs {
                if last_use[j] == Some(i) && j != spec.output() {
                    acts[j] = None;
                }
            }
        }
    }

    let out = if keep_intermediates { acts[spec.output()].clone() } else { acts[spec.output()].take() }
        .expect("output node was evaluated");
    let tape = Tape { spec, params, activations: acts, pool_indices: pools, complete: keep_intermediates };
    Ok((out, tape))
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse-mode pass: gradients of `sum(loss_grad ⊙ y)` where `y` is the
/// forward output. Fan-out edges (skip connections, shared inputs)
/// accumulate contributions from every consumer.
pub fn backward<T: Element>(tape: &Tape<'_, T>, loss_grad: &Tensor<T>) -> Result<Gradients<T>> {
    if !tape.complete {
        return Err(Error::MissingTape);
    }
    let spec = tape.spec;
    let act = |j: usize| tape.activations[j].as_ref().expect("complete tape");
    let out = act(spec.output());
    if loss_grad.shape() != out.shape() {
        return Err(Error::shape(format!(
            "loss gradient {} does not match network output {}",
            loss_grad.shape(),
            out.shape()
        )));
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; spec.nodes().len()];
    grads[spec.output()] = Some(loss_grad.clone());
    let mut param_grads = tape.params.zeros_like();

    for (i, node) in spec.nodes().iter().enumerate().rev() {
        let Some(up) = grads[i].take() else { continue };
        let wrap = |e: Error| Error::node(&node.name, e.to_string());
        let ins = &node.inputs;
        match node.kind {
            LayerKind::Input { .. } => {
                grads[i] = Some(up);
            }
            LayerKind::Conv { .. } | LayerKind::TransposedConv { .. } => {
                let p = conv_params(node, tape.params)?;
                let (dx, dw, db) = if matches!(node.kind, LayerKind::Conv { .. }) {
                    conv2d_vjp(act(ins[0]), &p, &up)
                } else {
                    transposed_conv2d_vjp(act(ins[0]), &p, &up)
                }
                .map_err(wrap)?;
                param_grads.get_mut(&node.weight_name()).expect("store mirrors params").add_assign(&dw)?;
                param_grads.get_mut(&node.bias_name()).expect("store mirrors params").add_assign(&db)?;
                accumulate(&mut grads[ins[0]], dx)?;
            }
            LayerKind::MaxPool2x2 => {
                let idx = tape.pool_indices[i].as_ref().expect("complete tape");
                accumulate(&mut grads[ins[0]], maxpool2x2_vjp(idx, &up).map_err(wrap)?)?;
            }
            LayerKind::Relu => {
                accumulate(&mut grads[ins[0]], relu_vjp(act(ins[0]), &up).map_err(wrap)?)?;
            }
            LayerKind::Concat => {
                let ca = act(ins[0]).dims()[1];
                let cb = act(ins[1]).dims()[1];
                accumulate(&mut grads[ins[0]], up.channel_slice(0..ca)?)?;
                accumulate(&mut grads[ins[1]], up.channel_slice(ca..ca + cb)?)?;
            }
            LayerKind::Add => {
                for &j in ins {
                    accumulate(&mut grads[j], up.clone())?;
                }
            }
            LayerKind::Crop => {
                accumulate(&mut grads[ins[0]], crop_spatial_vjp(act(ins[0]).shape(), &up).map_err(wrap)?)?;
            }
            LayerKind::UpsampleNearest2x => {
                accumulate(&mut grads[ins[0]], nearest_upsample2x_vjp(&up).map_err(wrap)?)?;
            }
            LayerKind::Softmax => {
                accumulate(&mut grads[ins[0]], softmax_channels_vjp(act(i), &up).map_err(wrap)?)?;
            }
        }
    }

    let input = grads[spec.input()].take().unwrap_or_else(|| Tensor::zeros_like_shape(act(spec.input()).shape()));
    Ok(Gradients { params: param_grads, input })
}

/// Convenience wrapper: forward without a tape.
pub fn predict<T: Element>(spec: &ArchitectureSpec, params: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    forward(spec, params, x, false).map(|(y, _)| y)
}
