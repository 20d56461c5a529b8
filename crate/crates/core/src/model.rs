//! A stack of adapted linear layers with a fixed elementwise nonlinearity
//! between consecutive layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward_into, lora_backward_into, Adam, GradBuffer, LossSpec};
use crate::linalg::Matrix;
use crate::mixlora::{AdaptedLinear, ForwardTrace, LoraLinear, LoraTrace, ParamId, RoutingMode, Selection};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            Activation::Tanh => m.map(f64::tanh),
        }
    }

    fn backward(self, pre: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::Tanh => {
                let data = pre
                    .as_slice()
                    .iter()
                    .zip(upstream.as_slice())
                    .map(|(x, u)| {
                        let t = x.tanh();
                        u * (1.0 - t * t)
                    })
                    .collect();
                Matrix::from_vec(pre.rows(), pre.cols(), data).expect("same shape")
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }
}

/// One input sequence with its per-token regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub input: Matrix,
    pub target: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterLayer {
    Lora(LoraLinear),
    Mix(AdaptedLinear),
}

#[derive(Debug, Clone)]
pub enum LayerTrace {
    Lora(LoraTrace),
    Mix(ForwardTrace),
}

impl LayerTrace {
    pub fn output(&self) -> &Matrix {
        match self {
            LayerTrace::Lora(t) => &t.output,
            LayerTrace::Mix(t) => &t.output,
        }
    }

    pub fn selection(&self) -> Option<&Selection> {
        match self {
            LayerTrace::Lora(_) => None,
            LayerTrace::Mix(t) => Some(&t.selection),
        }
    }
}

impl AdapterLayer {
    pub fn params(&self) -> Vec<(ParamId, &Matrix)> {
        match self {
            AdapterLayer::Lora(l) => l.params(),
            AdapterLayer::Mix(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Matrix)> {
        match self {
            AdapterLayer::Lora(l) => l.params_mut(),
            AdapterLayer::Mix(l) => l.params_mut(),
        }
    }

    pub fn base_w(&self) -> &Matrix {
        match self {
            AdapterLayer::Lora(l) => l.base_w(),
            AdapterLayer::Mix(l) => l.base_w(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.base_w().cols()
    }

    pub fn d_out(&self) -> usize {
        self.base_w().rows()
    }

    pub fn new_grads(&self) -> GradBuffer {
        GradBuffer::for_params(&self.params())
    }

    pub fn as_mix(&self) -> Option<&AdaptedLinear> {
        match self {
            AdapterLayer::Mix(l) => Some(l),
            AdapterLayer::Lora(_) => None,
        }
    }

    pub fn trace(&self, h: &Matrix, task_id: Option<usize>, rng: Option<&mut StreamRng>) -> Result<LayerTrace> {
        Ok(match self {
            AdapterLayer::Lora(l) => LayerTrace::Lora(l.trace(h)?),
            AdapterLayer::Mix(l) => LayerTrace::Mix(l.trace(h, task_id, rng)?),
        })
    }

    pub fn backward_into(&self, trace: &LayerTrace, upstream: &Matrix, grads: &mut GradBuffer) -> Result<Matrix> {
        match (self, trace) {
            (AdapterLayer::Lora(l), LayerTrace::Lora(t)) => lora_backward_into(l, t, upstream, grads),
            (AdapterLayer::Mix(l), LayerTrace::Mix(t)) => backward_into(l, t, upstream, grads),
            _ => Err(Error::State("trace was recorded on a different kind of layer".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Matrix,
}

impl ModelTrace {
    pub fn selections(&self) -> Vec<Option<&Selection>> {
        self.layers.iter().map(LayerTrace::selection).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<AdapterLayer>,
    pub activation: Activation,
}

impl Model {
    pub fn new(layers: Vec<AdapterLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn single(layer: AdapterLayer) -> Self {
        Self {
            layers: vec![layer],
            activation: Activation::Identity,
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("nonempty").d_out()
    }

    pub fn is_mixlora(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, AdapterLayer::Mix(_)))
    }

    pub fn routing(&self) -> Option<RoutingMode> {
        self.layers.first().and_then(AdapterLayer::as_mix).map(|l| l.config().routing)
    }

    /// Random routing draws from `rng`; other modes ignore it.
    pub fn needs_rng(&self) -> bool {
        self.routing() == Some(RoutingMode::Random)
    }

    pub fn trace(&self, h: &Matrix, task_id: Option<usize>, mut rng: Option<&mut StreamRng>) -> Result<ModelTrace> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut x = h.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let t = layer.trace(&x, task_id, rng.as_deref_mut())?;
            x = if i + 1 < self.layers.len() {
                self.activation.apply(t.output())
            } else {
                t.output().clone()
            };
            layers.push(t);
        }
        Ok(ModelTrace { layers, output: x })
    }

    pub fn forward(&self, h: &Matrix, task_id: Option<usize>, rng: Option<&mut StreamRng>) -> Result<Matrix> {
        Ok(self.trace(h, task_id, rng)?.output)
    }

    pub fn new_grads(&self) -> Vec<GradBuffer> {
        self.layers.iter().map(AdapterLayer::new_grads).collect()
    }

    /// Accumulates parameter gradients of `⟨upstream, output⟩` into `grads`
    /// and returns the gradient with respect to the model input.
    pub fn backward_into(&self, trace: &ModelTrace, upstream: &Matrix, grads: &mut [GradBuffer]) -> Result<Matrix> {
        if trace.layers.len() != self.layers.len() || grads.len() != self.layers.len() {
            return Err(Error::State("trace or gradient buffers do not match the model depth".into()));
        }
        let mut up = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                up = self.activation.backward(trace.layers[i].output(), &up);
            }
            up = self.layers[i].backward_into(&trace.layers[i], &up, &mut grads[i])?;
        }
        Ok(up)
    }

    /// Mean loss over `batch` and the gradient of that mean.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[Instance],
        task_id: Option<usize>,
        loss: LossSpec,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<(f64, Vec<GradBuffer>)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut grads = self.new_grads();
        let mut total = 0.0;
        for inst in batch {
            let trace = self.trace(&inst.input, task_id, rng.as_deref_mut())?;
            let (l, g) = loss.loss_and_grad(&trace.output, &inst.target)?;
            total += l;
            self.backward_into(&trace, &g.scale(1.0 / n), &mut grads)?;
        }
        Ok((total / n, grads))
    }

    pub fn batch_loss(
        &self,
        batch: &[Instance],
        task_id: Option<usize>,
        loss: LossSpec,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut total = 0.0;
        for inst in batch {
            let out = self.forward(&inst.input, task_id, rng.as_deref_mut())?;
            total += loss.loss(&out, &inst.target)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step over every trainable tensor of every layer.
    pub fn apply_adam(&mut self, adam: &mut Adam, grads: &[GradBuffer]) -> Result<()> {
        let grad_refs: Vec<&Matrix> = grads.iter().flat_map(|g| g.iter().map(|(_, m)| m)).collect();
        let mut params: Vec<&mut Matrix> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.params_mut().into_iter().map(|(_, m)| m))
            .collect();
        adam.update(&mut params, &grad_refs)
    }

    /// All trainable values, layer by layer in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.params()
                    .into_iter()
                    .flat_map(|(_, m)| m.as_slice().to_vec())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.params().iter().map(|(_, m)| m.as_slice().len()).sum::<usize>())
            .sum();
        if values.len() != total {
            return Err(Error::Shape(format!("model has {total} parameters, got {}", values.len())));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for (_, m) in layer.params_mut() {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

/// Flattens per-layer gradient buffers in the order of [`Model::flat_params`].
pub fn flatten_grads(grads: &[GradBuffer]) -> Vec<f64> {
    grads.iter().flat_map(GradBuffer::flatten).collect()
}
