//! Analytic-versus-finite-difference comparison for adapter layers.
//!
//! The scalar under test is `⟨upstream, forward(h)⟩`, evaluated in extended
//! precision. Each trainable tensor is perturbed coordinate by coordinate; if any perturbation changes the
//! selected factor indices the instance is reported as `index_flip` and
//! should be excluded, because the piecewise-constant selection makes the
//! finite difference meaningless there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixlora::{AdaptedLinear, GatingMode, LoraLinear, MixLoraConfig, ParamId, RoutingMode, Selection};
use crate::rng::{gaussian_matrix, stream};

use super::reference::{central_diff, lora_objective, routed_objective};
use super::{backward, lora_backward, GradBuffer};

/// Pass criterion: `|a − b| ≤ rel·max(|a|, |b|)` or `|a − b| ≤ abs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-6, abs: 1e-10 }
    }
}

impl Tolerance {
    /// Relative error with the denominator floored at `abs/rel`, so a value
    /// below `rel` means the pair passes.
    pub fn scaled_error(&self, a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(self.abs / self.rel)
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    /// Tensor name, or `"input"` for the input gradient.
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub input: TensorCheck,
    pub index_flip: bool,
    pub tolerance: Tolerance,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors
            .iter()
            .chain(std::iter::once(&self.input))
            .map(|t| t.max_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance.rel
    }
}

fn compare(name: String, analytic: Vec<f64>, numeric: Vec<f64>, tol: Tolerance) -> TensorCheck {
    let max_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| tol.scaled_error(*a, *b))
        .fold(0.0, f64::max);
    TensorCheck {
        name,
        analytic,
        numeric,
        max_error,
    }
}

fn same_indices(sel: &Selection, a: &[usize], b: &[usize]) -> bool {
    sel.indices_a == a && sel.indices_b == b
}

/// Checks every trainable tensor and the input gradient of a routed layer
/// under instance or task routing.
pub fn check_adapter(
    layer: &AdaptedLinear,
    h: &Matrix,
    task_id: Option<usize>,
    upstream: &Matrix,
    eps: f64,
    tol: Tolerance,
) -> Result<GradCheckReport> {
    let trace = layer.trace::<crate::rng::StreamRng>(h, task_id, None)?;
    let reference = trace.selection.clone();
    let (grads, dh) = backward(layer, &trace, upstream)?;

    let mut flip = false;
    let mut tensors = Vec::new();
    let ids: Vec<ParamId> = layer.params().iter().map(|(id, _)| *id).collect();
    for id in ids {
        let theta = layer.params().into_iter().find(|(p, _)| *p == id).unwrap().1.clone();
        let mut probe = layer.clone();
        let numeric = central_diff(
            |values| {
                let m = probe.param_mut(id).expect("param exists");
                m.as_mut_slice().copy_from_slice(values);
                let (f, ia, ib) = routed_objective(&probe, h, task_id, upstream)?;
                flip |= !same_indices(&reference, &ia, &ib);
                Ok(f)
            },
            theta.as_slice(),
            eps,
        )?;
        let analytic = grads.get(id).expect("buffer mirrors params").as_slice().to_vec();
        tensors.push(compare(id.name(), analytic, numeric, tol));
    }

    let numeric_h = central_diff(
        |values| {
            let hp = Matrix::from_vec(h.rows(), h.cols(), values.to_vec())?;
            let (f, ia, ib) = routed_objective(layer, &hp, task_id, upstream)?;
            flip |= !same_indices(&reference, &ia, &ib);
            Ok(f)
        },
        h.as_slice(),
        eps,
    )?;
    let input = compare("input".into(), dh.as_slice().to_vec(), numeric_h, tol);

    Ok(GradCheckReport {
        tensors,
        input,
        index_flip: flip,
        tolerance: tol,
    })
}

/// Same comparison for the plain LoRA layer.
pub fn check_lora(layer: &LoraLinear, h: &Matrix, upstream: &Matrix, eps: f64, tol: Tolerance) -> Result<GradCheckReport> {
    let trace = layer.trace(h)?;
    let (grads, dh): (GradBuffer, Matrix) = lora_backward(layer, &trace, upstream)?;
    let mut tensors = Vec::new();
    for id in [ParamId::LoraA, ParamId::LoraB] {
        let mut probe = layer.clone();
        let theta = match id {
            ParamId::LoraA => layer.a.clone(),
            _ => layer.b.clone(),
        };
        let numeric = central_diff(
            |values| {
                let m = if id == ParamId::LoraA { &mut probe.a } else { &mut probe.b };
                m.as_mut_slice().copy_from_slice(values);
                Ok(lora_objective(&probe, h, upstream))
            },
            theta.as_slice(),
            eps,
        )?;
        tensors.push(compare(id.name(), grads.get(id).unwrap().as_slice().to_vec(), numeric, tol));
    }
    let numeric_h = central_diff(
        |values| {
            let hp = Matrix::from_vec(h.rows(), h.cols(), values.to_vec())?;
            Ok(lora_objective(layer, &hp, upstream))
        },
        h.as_slice(),
        eps,
    )?;
    let input = compare("input".into(), dh.as_slice().to_vec(), numeric_h, tol);
    Ok(GradCheckReport {
        tensors,
        input,
        index_flip: false,
        tolerance: tol,
    })
}

/// Shape of the randomized instances checked by [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSettings {
    pub instances: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub num_factors: usize,
    pub rank: usize,
    pub seq_len: usize,
    pub eps: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            instances: 20,
            d_in: 3,
            d_out: 2,
            num_factors: 4,
            rank: 2,
            seq_len: 2,
            eps: 1e-5,
        }
    }
}

impl GradCheckSettings {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.seq_len == 0 || !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config("gradcheck: instances, seq_len and eps must be positive".into()));
        }
        MixLoraConfig::new(self.d_in, self.d_out, self.num_factors, self.rank)
            .validated()
            .map_err(|e| Error::Config(format!("gradcheck: {e}")))?;
        Ok(())
    }
}

/// Layer variants exercised at every instance, by name.
pub const SUITE_VARIANTS: [&str; 5] = ["instance_soft_cfs", "instance_soft", "task_soft_cfs", "instance_hard_cfs", "lora"];

const SUITE_TASKS: usize = 3;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub instance: usize,
    pub variant: &'static str,
    pub report: GradCheckReport,
}

/// Checks every variant in [`SUITE_VARIANTS`] on `instances` random layers
/// with non-zero B factors, so that every tensor receives signal.
pub fn run_suite(settings: &GradCheckSettings, seed: u64) -> Result<Vec<SuiteCase>> {
    settings.validate()?;
    let s = settings;
    let tol = Tolerance::default();
    let mut out = Vec::with_capacity(s.instances * SUITE_VARIANTS.len());
    for k in 0..s.instances {
        let mut rng = stream(seed, "gradcheck", k as u64);
        let w = gaussian_matrix(&mut rng, s.d_out, s.d_in, 1.0);
        let h = gaussian_matrix(&mut rng, s.seq_len, s.d_in, 1.0);
        let upstream = gaussian_matrix(&mut rng, s.seq_len, s.d_out, 1.0);
        for variant in SUITE_VARIANTS {
            let base = MixLoraConfig::new(s.d_in, s.d_out, s.num_factors, s.rank);
            let (cfg, task) = match variant {
                "instance_soft_cfs" => (base, None),
                "instance_soft" => (base.with_cfs(false), None),
                "task_soft_cfs" => (
                    base.with_routing(RoutingMode::Task).with_num_tasks(SUITE_TASKS),
                    Some(k % SUITE_TASKS),
                ),
                "instance_hard_cfs" => (base.with_gating(GatingMode::Hard), None),
                _ => {
                    let mut l = LoraLinear::init(w.clone(), s.rank, 2.0 * s.rank as f64, 1.0 / (s.d_in as f64).sqrt(), &mut rng)?;
                    l.b = gaussian_matrix(&mut rng, s.d_out, s.rank, 0.7);
                    let report = check_lora(&l, &h, &upstream, s.eps, tol)?;
                    out.push(SuiteCase { instance: k, variant, report });
                    continue;
                }
            };
            let mut layer = AdaptedLinear::init(cfg, w.clone(), &mut rng)?;
            let b = gaussian_matrix(&mut rng, s.num_factors, s.d_out, 0.7);
            *layer.param_mut(ParamId::BFactors).expect("b factors always exist") = b;
            let report = check_adapter(&layer, &h, task, &upstream, s.eps, tol)?;
            out.push(SuiteCase { instance: k, variant, report });
        }
    }
    Ok(out)
}
