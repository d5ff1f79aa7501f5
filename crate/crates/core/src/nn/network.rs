use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::fnv::Fnv1a;

use super::layer::Layer;
use super::tensor::Tensor;

/// Ordered stack of layers with a per-layer trainability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    trainable: Vec<bool>,
    /// Per-sample shape before each layer and after the last one.
    shapes: Vec<Vec<usize>>,
}

/// Every intermediate value of one forward pass; `activations[0]` is the
/// (conformed) input and `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Tensor {
        self.activations.pop().expect("trace holds at least the input")
    }
}

/// Parameter gradients aligned with a network's layers, plus the gradient
/// with respect to the network input when it was requested.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Vec<Tensor>>,
    input: Option<Tensor>,
}

impl GradientSet {
    /// All-zero gradients shaped like `net`'s parameters (also the initial
    /// momentum buffer).
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
            input: None,
        }
    }

    pub fn layer(&self, index: usize) -> &[Tensor] {
        &self.layers[index]
    }

    pub fn layers(&self) -> &[Vec<Tensor>] {
        &self.layers
    }

    pub fn input(&self) -> Option<&Tensor> {
        self.input.as_ref()
    }

    pub(crate) fn check_aligned(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::GradientMismatch(format!(
                "{} gradient entries for {} layers",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (grads, layer)) in self.layers.iter().zip(&net.layers).enumerate() {
            let params = layer.params();
            if grads.len() != params.len()
                || grads.iter().zip(&params).any(|(g, p)| g.shape() != p.shape())
            {
                return Err(Error::GradientMismatch(format!("layer {i} ({})", layer.kind_name())));
            }
        }
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.layers
    }
}

fn is_image_layout(shape: &[usize]) -> bool {
    shape.len() == 1 || shape.len() == 3
}

impl Network {
    /// Builds a network, checking that every layer accepts its predecessor's
    /// output. All layers start trainable.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let current = shapes.last().expect("non-empty");
            let next = layer.output_shape(current).ok_or_else(|| Error::ShapeMismatch {
                layer: i,
                expected: expected_input(layer),
                found: current.clone(),
            })?;
            shapes.push(next);
        }
        let trainable = vec![true; layers.len()];
        Ok(Self {
            input_shape,
            layers,
            trainable,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.trainable[index] = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.fill(trainable);
    }

    /// Every weight and bias element, regardless of trainability.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Little-endian bytes of all parameters in layer order.
    pub fn param_bytes(&self) -> impl Iterator<Item = [u8; 4]> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|t| t.data().iter().map(|v| v.to_le_bytes()))
    }

    /// FNV-1a over [`Network::param_bytes`].
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::default();
        for b in self.param_bytes() {
            h.update(&b);
        }
        h.finish()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Splits off the first `n` layers as their own network, keeping flags.
    pub(crate) fn split_at(&self, n: usize) -> Result<(Network, Network)> {
        let mut head = Network::new(self.input_shape.clone(), self.layers[..n].to_vec())?;
        head.trainable.copy_from_slice(&self.trainable[..n]);
        let mut tail = Network::new(self.shapes[n].clone(), self.layers[n..].to_vec())?;
        tail.trainable.copy_from_slice(&self.trainable[n..]);
        Ok((head, tail))
    }

    /// Accepts a batch whose per-sample shape equals the network input, or the
    /// other MNIST layout (`[784]` vs `[1, 28, 28]`) of identical size.
    fn conform<'a>(&self, batch: &'a Tensor) -> Result<Cow<'a, Tensor>> {
        let shape = batch.shape();
        let mismatch = || Error::ShapeMismatch {
            layer: 0,
            expected: self.input_shape.clone(),
            found: shape.get(1..).map(<[usize]>::to_vec).unwrap_or_default(),
        };
        let Some(sample) = shape.get(1..) else {
            return Err(mismatch());
        };
        if sample == self.input_shape.as_slice() {
            return Ok(Cow::Borrowed(batch));
        }
        let same_size = sample.iter().product::<usize>() == self.input_shape.iter().product::<usize>();
        if same_size && is_image_layout(sample) && is_image_layout(&self.input_shape) {
            let mut target = vec![shape[0]];
            target.extend_from_slice(&self.input_shape);
            return Ok(Cow::Owned(batch.clone().reshape(&target)?));
        }
        Err(mismatch())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ActivationTrace> {
        let input = self.conform(batch)?.into_owned();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for layer in &self.layers {
            let y = layer.forward(activations.last().expect("non-empty"));
            activations.push(y);
        }
        Ok(ActivationTrace { activations })
    }

    /// Forward pass that keeps only the final output.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.conform(batch)?;
        for layer in &self.layers {
            x = Cow::Owned(layer.forward(&x));
        }
        Ok(x.into_owned())
    }

    /// Reverse pass. Frozen layers report all-zero parameter gradients but
    /// still propagate the gradient to their input.
    pub fn backward(&self, trace: &ActivationTrace, loss_grad: &Tensor) -> Result<GradientSet> {
        self.backward_impl(trace, loss_grad, true)
    }

    /// Like [`Network::backward`] but skips the gradient with respect to the
    /// network input, which training never needs.
    pub fn backward_params(&self, trace: &ActivationTrace, loss_grad: &Tensor) -> Result<GradientSet> {
        self.backward_impl(trace, loss_grad, false)
    }

    fn check_trace(&self, trace: &ActivationTrace, loss_grad: &Tensor) -> Result<()> {
        let acts = &trace.activations;
        if acts.len() != self.layers.len() + 1 {
            return Err(Error::TraceMismatch(format!(
                "{} activations for {} layers",
                acts.len(),
                self.layers.len()
            )));
        }
        let batch = acts[0].batch_size();
        for (i, (act, shape)) in acts.iter().zip(&self.shapes).enumerate() {
            if act.batch_size() != batch || &act.shape()[1..] != shape.as_slice() {
                return Err(Error::TraceMismatch(format!(
                    "activation {i} has shape {:?}, expected [{batch}] + {shape:?}",
                    act.shape()
                )));
            }
        }
        if loss_grad.shape() != trace.output().shape() {
            return Err(Error::TraceMismatch(format!(
                "loss gradient shape {:?} differs from output shape {:?}",
                loss_grad.shape(),
                trace.output().shape()
            )));
        }
        Ok(())
    }

    fn backward_impl(&self, trace: &ActivationTrace, loss_grad: &Tensor, want_input: bool) -> Result<GradientSet> {
        self.check_trace(trace, loss_grad)?;
        let mut layers = vec![Vec::new(); self.layers.len()];
        let mut grad = Cow::Borrowed(loss_grad);
        let mut input = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0 || want_input;
            let (dx, params) = layer.backward(&trace.activations[i], &grad, self.trainable[i], need_dx);
            layers[i] = params;
            match dx {
                Some(dx) if i > 0 => grad = Cow::Owned(dx),
                dx => input = dx,
            }
        }
        Ok(GradientSet { layers, input })
    }
}

fn expected_input(layer: &Layer) -> Vec<usize> {
    match layer {
        Layer::Dense(d) => vec![d.in_dim],
        Layer::Conv2d(c) => vec![c.in_channels, 0, 0],
        Layer::Reshape(target) => vec![target.iter().product()],
        _ => Vec::new(),
    }
}
