//! Layers, forward/backward passes, losses and optimizers.

mod layer;
pub mod loss;
pub mod optim;

pub use layer::{Layer, Linear, LinearKind};
pub use loss::{argmax_rows, cross_entropy, cross_entropy_per_sample};
pub use optim::{Optimizer, OptimizerKind};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declarative layer description, as found in configs and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    MaxPool {
        window: usize,
    },
    AvgPool {
        window: usize,
    },
    Flatten,
    Residual {
        branch: Vec<LayerSpec>,
    },
}

/// Default Leaky-ReLU slope when a config does not name one.
pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

/// An ordered stack of layers with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    revision: u64,
}

/// Activations recorded by [`Model::forward`] for the matching backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    revision: u64,
    batch: usize,
    layers: Vec<layer::LayerCache>,
}

/// Parameter gradients (weight then bias for every linear layer, in
/// depth-first order) and the gradient with respect to the input batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Model {
    /// Builds a model, checking that consecutive shapes compose, and draws
    /// Glorot-uniform weights with zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        specs: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        let (layers, output_shape) = layer::build_stack(&input_shape, specs, rng)?;
        Ok(Self {
            input_shape,
            output_shape,
            layers,
            revision: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Linear (dense or convolutional) layers in depth-first order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        layer::collect_linears(&self.layers, &mut out);
        out
    }

    /// Mutable linear layers. Invalidates outstanding forward caches.
    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.revision += 1;
        let mut out = Vec::new();
        layer::collect_linears_mut(&mut self.layers, &mut out);
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.linears()
            .into_iter()
            .flat_map(|l| [l.weight(), l.bias()])
            .collect()
    }

    /// Mutable parameters in gradient order. Invalidates forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| {
                let (w, b) = l.params_mut();
                [w, b]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the network and records what backward needs.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = layer::forward_stack(&self.layers, batch.clone(), Some(&mut caches))?;
        Ok((
            out,
            ForwardCache {
                revision: self.revision,
                batch: batch.batch(),
                layers: caches,
            },
        ))
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        layer::forward_stack(&self.layers, batch.clone(), None)
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the output).
    ///
    /// With `param_grads = false` only the input gradient is computed and
    /// `params` is empty.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Tensor,
        param_grads: bool,
    ) -> Result<Gradients> {
        if cache.revision != self.revision || cache.layers.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since it was recorded".into(),
            ));
        }
        let mut want = vec![cache.batch];
        want.extend_from_slice(&self.output_shape);
        if grad_out.shape() != want.as_slice() {
            return Err(Error::shape(format!(
                "loss gradient {:?} does not match output {:?}",
                grad_out.shape(),
                want
            )));
        }
        let mut params = Vec::new();
        let input = layer::backward_stack(
            &self.layers,
            &cache.layers,
            grad_out.clone(),
            param_grads.then_some(&mut params),
        )?;
        // Gradients were pushed from the last layer backwards.
        params.reverse();
        Ok(Gradients { params, input })
    }
}
