//! Reverse-mode gradients for the adapted layers.
//!
//! The backward passes are hand-derived chain rules over the values a
//! forward trace recorded. Top-`r` index choice is treated as locally
//! constant: gradients reach the routers only through the soft gate values.

pub mod check;
mod reference;
mod finite_diff;
mod optim;

pub use finite_diff::{finite_diff, max_relative_error, relative_error, DEFAULT_EPS};
pub use optim::{sgd_step, Adam, AdamConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, outer, softmax, softmax_backward, Matrix, Vector};
use crate::mixlora::{
    combine, AdaptedLinear, ForwardTrace, GatingMode, LoraLinear, LoraTrace, ParamId, RoutingMode,
};

/// One zero-initialized accumulator per trainable tensor of a layer, in the
/// layer's canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    entries: Vec<(ParamId, Matrix)>,
}

impl GradBuffer {
    pub fn for_params(params: &[(ParamId, &Matrix)]) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(id, m)| (*id, Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn for_mixlora(layer: &AdaptedLinear) -> Self {
        Self::for_params(&layer.params())
    }

    pub fn for_lora(layer: &LoraLinear) -> Self {
        Self::for_params(&layer.params())
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.entries.iter_mut().find(|(p, _)| *p == id).map(|(_, m)| m)
    }

    fn slot(&mut self, id: ParamId) -> Result<&mut Matrix> {
        self.get_mut(id)
            .ok_or_else(|| Error::State(format!("gradient buffer has no slot for {}", id.name())))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.entries.iter().map(|(p, m)| (*p, m))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.entries.iter().map(|(p, _)| *p).collect()
    }

    pub fn zero(&mut self) {
        self.entries.iter_mut().for_each(|(_, m)| m.fill(0.0));
    }

    pub fn add_assign(&mut self, other: &GradBuffer) -> Result<()> {
        if self.ids() != other.ids() {
            return Err(Error::Shape("gradient buffers describe different layers".into()));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in &mut self.entries {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// All accumulators concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MeanSquaredError,
    SoftmaxCrossEntropy,
}

/// Per-instance loss; batches are reduced by the mean over instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::MeanSquaredError,
        }
    }
}

impl LossSpec {
    pub fn mse() -> Self {
        Self::default()
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Loss of one instance and its gradient with respect to `output`.
    ///
    /// MSE averages over every entry. Cross-entropy treats each output row as
    /// logits and each target row as a probability distribution, averaging
    /// over rows.
    pub fn loss_and_grad(&self, output: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
        if output.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "output {:?} vs target {:?}",
                output.shape(),
                target.shape()
            )));
        }
        let (loss, grad) = match self.kind {
            LossKind::MeanSquaredError => {
                let n = output.as_slice().len() as f64;
                let diff = output.sub(target)?;
                let loss = dot(diff.as_slice(), diff.as_slice()) / n;
                (loss, diff.scale(2.0 / n))
            }
            LossKind::SoftmaxCrossEntropy => {
                let rows = output.rows() as f64;
                let mut grad = Matrix::zeros(output.rows(), output.cols());
                let mut loss = 0.0;
                for r in 0..output.rows() {
                    let p = softmax(output.row(r))?;
                    let t = target.row(r);
                    loss -= t.iter().zip(p.iter()).map(|(ti, pi)| ti * pi.ln()).sum::<f64>();
                    for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
                        *g = (p[c] - t[c]) / rows;
                    }
                }
                (loss / rows, grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {loss}")));
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, output: &Matrix, target: &Matrix) -> Result<f64> {
        Ok(self.loss_and_grad(output, target)?.0)
    }
}

fn check_upstream(output: &Matrix, upstream: &Matrix) -> Result<()> {
    if output.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match layer output {:?}",
            upstream.shape(),
            output.shape()
        )));
    }
    Ok(())
}

/// Backward through a soft renormalized gate `gᵢ = s_{kᵢ} / Σⱼ s_{kⱼ}`;
/// returns the gradient with respect to the full score vector.
fn soft_gate_backward(scores: &[f64], indices: &[usize], gates: &[f64], dgates: &[f64]) -> Vector {
    let total: f64 = indices.iter().map(|&k| scores[k]).sum();
    let weighted = dot(dgates, gates);
    let mut d = Vector::zeros(scores.len());
    for (&k, &dg) in indices.iter().zip(dgates) {
        d[k] += (dg - weighted) / total;
    }
    d
}

/// Gradients of `⟨upstream, output⟩` for the trace's instance, accumulated
/// into `grads`. Returns the gradient with respect to the layer input.
pub fn backward_into(
    layer: &AdaptedLinear,
    trace: &ForwardTrace,
    upstream: &Matrix,
    grads: &mut GradBuffer,
) -> Result<Matrix> {
    if trace.layer_id != layer.id() || trace.version != layer.version() {
        return Err(Error::State(
            "backward needs the trace of a forward pass on this layer with its current parameters".into(),
        ));
    }
    check_upstream(&trace.output, upstream)?;
    let cfg = layer.config();
    let alpha = cfg.alpha;
    let h = &trace.input;
    let seq = h.rows() as f64;
    let w = layer.base_w();

    let mut dh = combine(&matmul(upstream, w)?, &matmul(upstream, &trace.delta_w)?, alpha);

    let d_delta = matmul(&upstream.transpose(), h)?.scale(alpha);
    let d_b = matmul(&d_delta, &trace.assembled_a.transpose())?;
    let mut d_a = matmul(&trace.assembled_b.transpose(), &d_delta)?;

    let soft = cfg.gating == GatingMode::Soft && cfg.routing != RoutingMode::Random;
    let sel_a = &trace.a_side;
    let sel_b = &trace.b_side.side;

    // B factors and B-side gates
    let mut dgate_b = vec![0.0; sel_b.indices.len()];
    {
        let gb = grads.slot(ParamId::BFactors)?;
        for (i, (&k, &g)) in sel_b.indices.iter().zip(&sel_b.gates).enumerate() {
            let col = d_b.column(i);
            let row = gb.row_mut(k);
            if soft {
                row.iter_mut().zip(col.iter()).for_each(|(r, c)| *r += g * c);
                dgate_b[i] = dot(&col, layer.pool.b_factor(k));
            } else {
                row.iter_mut().zip(col.iter()).for_each(|(r, c)| *r += c);
            }
        }
    }

    if soft {
        let d_fused = soft_gate_backward(&sel_b.scores, &sel_b.indices, &sel_b.gates, &dgate_b);

        // independent B router
        let d_logits_b = softmax_backward(&trace.b_side.p_ifs, &d_fused);
        grads
            .slot(ParamId::WBIfs)?
            .add_assign(&outer(&d_logits_b, &trace.pooled_b)?)?;
        let d_pooled_b = layer.routers.w_b_ifs.vecmat(&d_logits_b)?;

        // conditional router, flowing back into the assembled A
        if let (Some(cfs), Some(w_ab)) = (&trace.cfs, &layer.routers.w_ab) {
            let d_sum = softmax_backward(&trace.b_side.p_cfs, &d_fused);
            for (i, (term, wi)) in cfs.terms.iter().zip(w_ab).enumerate() {
                let dz = softmax_backward(term, &d_sum);
                grads
                    .slot(ParamId::WAB(i))?
                    .add_assign(&outer(trace.assembled_a.row(i), &dz)?)?;
                let back = wi.matvec(&dz)?;
                d_a.row_mut(i).iter_mut().zip(back.iter()).for_each(|(a, b)| *a += b);
            }
        }

        // A factors and A-side gates
        let mut dgate_a = vec![0.0; sel_a.indices.len()];
        {
            let ga = grads.slot(ParamId::AFactors)?;
            for (i, (&k, &g)) in sel_a.indices.iter().zip(&sel_a.gates).enumerate() {
                let drow = d_a.row(i);
                ga.row_mut(k).iter_mut().zip(drow).for_each(|(r, d)| *r += g * d);
                dgate_a[i] = dot(drow, layer.pool.a_factor(k));
            }
        }
        let d_p_a = soft_gate_backward(&sel_a.scores, &sel_a.indices, &sel_a.gates, &dgate_a);
        let d_logits_a = softmax_backward(&sel_a.scores, &d_p_a);
        grads
            .slot(ParamId::WA)?
            .add_assign(&outer(&d_logits_a, &trace.pooled_a)?)?;
        let d_pooled_a = layer.routers.w_a.vecmat(&d_logits_a)?;

        match cfg.routing {
            RoutingMode::Task => {
                let t = trace.task_id.expect("task routing trace carries a task id");
                let ta = grads.slot(ParamId::TaskA)?;
                ta.row_mut(t).iter_mut().zip(d_pooled_a.iter()).for_each(|(r, d)| *r += d);
                let tb = grads.slot(ParamId::TaskB)?;
                tb.row_mut(t).iter_mut().zip(d_pooled_b.iter()).for_each(|(r, d)| *r += d);
            }
            RoutingMode::Instance => {
                // pooled_a = mean(h), pooled_b = mean(h Wᵀ)
                let via_b = w.vecmat(&d_pooled_b)?;
                for r in 0..h.rows() {
                    for (c, x) in dh.row_mut(r).iter_mut().enumerate() {
                        *x += (d_pooled_a[c] + via_b[c]) / seq;
                    }
                }
            }
            RoutingMode::Random => unreachable!("random routing is always hard-gated"),
        }
    } else {
        let ga = grads.slot(ParamId::AFactors)?;
        for (i, &k) in sel_a.indices.iter().enumerate() {
            ga.row_mut(k).iter_mut().zip(d_a.row(i)).for_each(|(r, d)| *r += d);
        }
    }

    Ok(dh)
}

/// Fresh-buffer variant of [`backward_into`].
pub fn backward(layer: &AdaptedLinear, trace: &ForwardTrace, upstream: &Matrix) -> Result<(GradBuffer, Matrix)> {
    let mut grads = GradBuffer::for_mixlora(layer);
    let dh = backward_into(layer, trace, upstream, &mut grads)?;
    Ok((grads, dh))
}

/// Plain LoRA backward, accumulated into `grads`.
pub fn lora_backward_into(
    layer: &LoraLinear,
    trace: &LoraTrace,
    upstream: &Matrix,
    grads: &mut GradBuffer,
) -> Result<Matrix> {
    if trace.layer_id != layer.id() || trace.version != layer.version() {
        return Err(Error::State(
            "backward needs the trace of a forward pass on this layer with its current parameters".into(),
        ));
    }
    check_upstream(&trace.output, upstream)?;
    let alpha = layer.alpha();
    let dh = combine(
        &matmul(upstream, layer.base_w())?,
        &matmul(upstream, &trace.delta_w)?,
        alpha,
    );
    let d_delta = matmul(&upstream.transpose(), &trace.input)?.scale(alpha);
    grads
        .slot(ParamId::LoraB)?
        .add_assign(&matmul(&d_delta, &layer.a.transpose())?)?;
    grads
        .slot(ParamId::LoraA)?
        .add_assign(&matmul(&layer.b.transpose(), &d_delta)?)?;
    Ok(dh)
}

pub fn lora_backward(layer: &LoraLinear, trace: &LoraTrace, upstream: &Matrix) -> Result<(GradBuffer, Matrix)> {
    let mut grads = GradBuffer::for_lora(layer);
    let dh = lora_backward_into(layer, trace, upstream, &mut grads)?;
    Ok((grads, dh))
}

#[cfg(test)]
mod tests;
