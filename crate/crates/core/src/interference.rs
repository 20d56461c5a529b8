//! Task-interference analysis.
//!
//! For tasks `i` and `j` with per-batch gradients `g_i(x)` and `g_j(x')` over a
//! shared parameter group, a step of size `λ` along `ĝ_j = g_j/‖g_j‖` changes
//! the loss of task `i` by about `Δ_j L_i(x) = λ·ĝ_jᵀ g_i(x)`. The score
//!
//! ```text
//! I(i, j) = mean_x [ mean_x' Δ_j L_i(x) / Δ_i L_i(x) ]
//! ```
//!
//! averages over every batch `x` of task `i` and every batch `x'` of task `j`.
//! On the diagonal `x' = x`, so `I(i, i) = 1` by construction. `λ` cancels
//! in the ratio and is carried only as metadata.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{GradBuffer, LossSpec};
use crate::kv::{self, KvBlock};
use crate::linalg::{dot, Matrix, Vector};
use crate::mixlora::ParamId;
use crate::model::{Instance, Model};
use crate::rng;

/// Gradient norms at or below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSelector {
    /// A-side factors (`A` of LoRA, the A factor pool of MixLoRA).
    LoraA,
    /// B-side factors.
    LoraB,
    /// Both sides: every A tensor of the chosen layers, then every B tensor.
    AllAdapter,
}

impl fmt::Display for GroupSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupSelector::LoraA => "lora_a",
            GroupSelector::LoraB => "lora_b",
            GroupSelector::AllAdapter => "all_adapter",
        })
    }
}

impl FromStr for GroupSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora_a" => Ok(GroupSelector::LoraA),
            "lora_b" => Ok(GroupSelector::LoraB),
            "all_adapter" => Ok(GroupSelector::AllAdapter),
            other => Err(Error::Config(format!("unknown parameter group '{other}'"))),
        }
    }
}

/// A selector applied to a set of layers, flattened in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub selector: GroupSelector,
    pub layers: Vec<usize>,
}

impl ParamGroup {
    pub fn new(selector: GroupSelector, layers: impl IntoIterator<Item = usize>) -> Self {
        let mut layers: Vec<usize> = layers.into_iter().collect();
        layers.sort_unstable();
        layers.dedup();
        Self { selector, layers }
    }

    pub fn all_layers(selector: GroupSelector, model: &Model) -> Self {
        Self::new(selector, 0..model.layers.len())
    }

    fn sides(&self) -> &'static [bool] {
        match self.selector {
            GroupSelector::LoraA => &[true],
            GroupSelector::LoraB => &[false],
            GroupSelector::AllAdapter => &[true, false],
        }
    }

    /// `(layer, tensor)` pairs the group covers, in flattening order.
    pub fn resolve(&self, model: &Model) -> Result<Vec<(usize, ParamId)>> {
        let mut out = Vec::new();
        for &a_side in self.sides() {
            for &l in &self.layers {
                let layer = model.layers.get(l).ok_or_else(|| {
                    Error::Argument(format!("group names layer {l}, model has {}", model.layers.len()))
                })?;
                let id = layer
                    .params()
                    .into_iter()
                    .map(|(id, _)| id)
                    .find(|id| match id {
                        ParamId::AFactors | ParamId::LoraA => a_side,
                        ParamId::BFactors | ParamId::LoraB => !a_side,
                        _ => false,
                    })
                    .expect("every adapter layer has both factor tensors");
                out.push((l, id));
            }
        }
        if out.is_empty() {
            return Err(Error::Argument("parameter group resolves to no tensors".into()));
        }
        Ok(out)
    }

    /// Flattens the group's slice of per-layer gradient buffers.
    pub fn gather(&self, model: &Model, grads: &[GradBuffer]) -> Result<Vector> {
        let mut out = Vec::new();
        for (l, id) in self.resolve(model)? {
            let g = grads
                .get(l)
                .and_then(|b| b.get(id))
                .ok_or_else(|| Error::State(format!("no gradient for layer {l} {}", id.name())))?;
            out.extend_from_slice(g.as_slice());
        }
        Ok(Vector::from(out))
    }
}

/// Instances of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    pub instances: Vec<Instance>,
}

/// Gradient of the mean batch loss with respect to `group`. Routed layers
/// report gradients for all `E` factors; unselected ones are zero.
///
/// `rng` is only consulted under random routing.
pub fn grad_for_task(
    model: &Model,
    batch: &TaskBatch,
    group: &ParamGroup,
    loss: LossSpec,
    rng: Option<&mut rng::StreamRng>,
) -> Result<Vector> {
    if batch.instances.is_empty() {
        return Err(Error::Argument(format!("empty batch for task {}", batch.task)));
    }
    let (_, grads) = model.batch_loss_and_grads(&batch.instances, Some(batch.task), loss, rng)?;
    group.gather(model, &grads)
}

/// First-order loss change of `g_i` under a unit step of length `λ` along `g_j`.
pub fn delta_loss(g_i: &[f64], g_j: &[f64], lambda: f64) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::Shape(format!("gradients of length {} and {}", g_i.len(), g_j.len())));
    }
    let n = dot(g_j, g_j).sqrt();
    if !(n > DEGENERATE_NORM) {
        return Err(Error::Degenerate(format!("step gradient norm {n:e} is below {DEGENERATE_NORM:e}")));
    }
    Ok(lambda * dot(g_j, g_i) / n)
}

/// Per-task, per-batch gradients.
pub trait GradientSource {
    fn num_batches(&self, task: usize) -> usize;
    fn gradient(&self, task: usize, batch: usize) -> Result<Vector>;
}

/// Precomputed gradients, indexed `[task][batch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable(pub Vec<Vec<Vector>>);

impl GradientSource for GradientTable {
    fn num_batches(&self, task: usize) -> usize {
        self.0.get(task).map_or(0, Vec::len)
    }

    fn gradient(&self, task: usize, batch: usize) -> Result<Vector> {
        self.0
            .get(task)
            .and_then(|t| t.get(batch))
            .cloned()
            .ok_or_else(|| Error::Argument(format!("no gradient for task {task} batch {batch}")))
    }
}

impl GradientTable {
    /// Evaluates `grad_for_task` on every batch. Batches are grouped by their
    /// `task` field; tasks must be numbered `0..T`. Under random routing each
    /// batch gets its own stream derived from `seed`.
    pub fn from_model(
        model: &Model,
        batches: &[TaskBatch],
        group: &ParamGroup,
        loss: LossSpec,
        seed: u64,
    ) -> Result<Self> {
        let tasks = batches.iter().map(|b| b.task + 1).max().unwrap_or(0);
        let mut table = vec![Vec::new(); tasks];
        for (k, b) in batches.iter().enumerate() {
            let mut stream = rng::stream(seed, "interference", k as u64);
            let rng = model.needs_rng().then_some(&mut stream);
            table[b.task].push(grad_for_task(model, b, group, loss, rng)?);
        }
        Ok(Self(table))
    }
}

/// `I(i, j)`; any degenerate term makes the whole entry an error.
pub fn interference_score<S: GradientSource + ?Sized>(src: &S, i: usize, j: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Argument(format!("step size must be positive, got {lambda}")));
    }
    let (ni, nj) = (src.num_batches(i), src.num_batches(j));
    if ni == 0 || nj == 0 {
        return Err(Error::Argument(format!("tasks {i} and {j} need at least one batch each")));
    }
    let gj: Vec<Vector> = (0..nj).map(|b| src.gradient(j, b)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for a in 0..ni {
        let gi = src.gradient(i, a)?;
        // λ cancels between numerator and denominator; unit steps keep the
        // ratio independent of it bit for bit.
        let den = delta_loss(&gi, &gi, 1.0)?;
        if !(den.abs() >= DEGENERATE_NORM) {
            return Err(Error::Degenerate(format!("task {i} batch {a}: own-step loss change {den:e}")));
        }
        let num = if i == j {
            den
        } else {
            let mut s = 0.0;
            for g in &gj {
                s += delta_loss(&gi, g, 1.0)?;
            }
            s / nj as f64
        };
        total += num / den;
    }
    Ok(total / ni as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateEntry {
    pub i: usize,
    pub j: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceMatrix {
    pub task_ids: Vec<usize>,
    /// `scores[(i, j)]` is the interference of task `j` on task `i`.
    pub scores: Matrix,
    pub group: ParamGroup,
    /// Batch pairs averaged per off-diagonal entry.
    pub num_batch_pairs: usize,
    pub lambda: f64,
    pub seed: Option<u64>,
    pub degenerate: Vec<DegenerateEntry>,
}

impl InterferenceMatrix {
    /// Mean of the negative finite entries; `0.0` when there are none.
    pub fn mean_negative(&self) -> f64 {
        let neg: Vec<f64> = self.scores.as_slice().iter().copied().filter(|x| *x < 0.0).collect();
        if neg.is_empty() {
            0.0
        } else {
            neg.iter().sum::<f64>() / neg.len() as f64
        }
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let t = self.task_ids.len();
        let vals: Vec<f64> = (0..t)
            .flat_map(|i| (0..t).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.scores[(i, j)])
            .filter(|x| x.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn is_complete(&self) -> bool {
        self.degenerate.is_empty() && self.scores.is_finite()
    }

    pub fn metadata(&self) -> KvBlock {
        let mut b = KvBlock::default();
        b.push("group", self.group.selector)
            .push(
                "layers",
                self.group.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            )
            .push("lambda", self.lambda)
            .push("seed", self.seed.map_or("none".to_string(), |s| s.to_string()))
            .push("tasks", self.task_ids.len())
            .push("num_batch_pairs", self.num_batch_pairs)
            .push("degenerate_entries", self.degenerate.len());
        for (k, d) in self.degenerate.iter().enumerate() {
            b.push(&format!("degenerate.{k}"), format!("{} {} {}", d.i, d.j, d.reason));
        }
        b
    }
}

/// Fills all `T²` entries over `task_ids`. Degenerate entries become NaN and
/// are listed in the returned matrix rather than aborting the build.
pub fn build_matrix<S: GradientSource + ?Sized>(
    src: &S,
    task_ids: &[usize],
    group: ParamGroup,
    lambda: f64,
) -> Result<InterferenceMatrix> {
    if task_ids.len() < 2 {
        return Err(Error::Argument("an interference matrix needs at least two tasks".into()));
    }
    let t = task_ids.len();
    let mut scores = Matrix::zeros(t, t);
    let mut degenerate = Vec::new();
    for (a, &i) in task_ids.iter().enumerate() {
        for (b, &j) in task_ids.iter().enumerate() {
            scores[(a, b)] = match interference_score(src, i, j, lambda) {
                Ok(v) => v,
                Err(Error::Degenerate(reason)) => {
                    degenerate.push(DegenerateEntry { i, j, reason });
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
        }
    }
    let per_task: Vec<usize> = task_ids.iter().map(|&i| src.num_batches(i)).collect();
    let num_batch_pairs = per_task[0] * per_task.get(1).copied().unwrap_or(per_task[0]);
    Ok(InterferenceMatrix {
        task_ids: task_ids.to_vec(),
        scores,
        group,
        num_batch_pairs,
        lambda,
        seed: None,
        degenerate,
    })
}

/// Per-layer matrices over `selector`, then their arithmetic mean, for every
/// task present in `batches`.
pub fn layer_averaged_matrix(
    model: &Model,
    batches: &[TaskBatch],
    selector: GroupSelector,
    loss: LossSpec,
    lambda: f64,
    seed: u64,
) -> Result<(InterferenceMatrix, Vec<InterferenceMatrix>)> {
    let mut task_ids: Vec<usize> = batches.iter().map(|b| b.task).collect();
    task_ids.sort_unstable();
    task_ids.dedup();
    layer_averaged_matrix_over(model, batches, &task_ids, selector, loss, lambda, seed)
}

/// As [`layer_averaged_matrix`], with rows and columns in the order of
/// `task_ids`. A task listed twice reuses the same gradients, so its two
/// rows are indistinguishable.
pub fn layer_averaged_matrix_over(
    model: &Model,
    batches: &[TaskBatch],
    task_ids: &[usize],
    selector: GroupSelector,
    loss: LossSpec,
    lambda: f64,
    seed: u64,
) -> Result<(InterferenceMatrix, Vec<InterferenceMatrix>)> {
    let positions: Vec<usize> = (0..task_ids.len()).collect();
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let group = ParamGroup::new(selector, [l]);
        let table = GradientTable::from_model(model, batches, &group, loss, seed)?;
        let rows = task_ids
            .iter()
            .map(|&t| {
                table.0.get(t).cloned().ok_or_else(|| Error::Argument(format!("no batches for task {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = build_matrix(&GradientTable(rows), &positions, group, lambda)?;
        m.task_ids = task_ids.to_vec();
        for d in &mut m.degenerate {
            d.i = task_ids[d.i];
            d.j = task_ids[d.j];
        }
        m.seed = Some(seed);
        per_layer.push(m);
    }
    let mean = average_matrices(&per_layer, ParamGroup::all_layers(selector, model))?;
    Ok((mean, per_layer))
}

/// Element-wise arithmetic mean over matrices sharing the same task ids.
pub fn average_matrices(mats: &[InterferenceMatrix], group: ParamGroup) -> Result<InterferenceMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Argument("nothing to average".into()))?;
    let mut sum = Matrix::zeros(first.scores.rows(), first.scores.cols());
    let mut degenerate = Vec::new();
    for m in mats {
        if m.task_ids != first.task_ids {
            return Err(Error::Argument("matrices cover different tasks".into()));
        }
        sum.add_assign(&m.scores)?;
        degenerate.extend(m.degenerate.iter().cloned());
    }
    Ok(InterferenceMatrix {
        task_ids: first.task_ids.clone(),
        scores: sum.scale(1.0 / mats.len() as f64),
        group,
        num_batch_pairs: first.num_batch_pairs,
        lambda: first.lambda,
        seed: first.seed,
        degenerate,
    })
}

/// CSV text: a header row of task ids, then one row per task `i` holding
/// `I(i, ·)` with 17 significant digits.
pub fn matrix_csv(m: &InterferenceMatrix) -> String {
    let mut s = String::from("task");
    for id in &m.task_ids {
        s.push_str(&format!(",{id}"));
    }
    s.push('\n');
    for (a, id) in m.task_ids.iter().enumerate() {
        s.push_str(&id.to_string());
        for b in 0..m.task_ids.len() {
            s.push_str(&format!(",{:.16e}", m.scores[(a, b)]));
        }
        s.push('\n');
    }
    s
}

/// Sidecar path next to a CSV export.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the CSV and its `key = value` sidecar (`<path>.meta`).
pub fn export_matrix(m: &InterferenceMatrix, path: &Path) -> Result<()> {
    fs::write(path, matrix_csv(m)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, kv::render(&[m.metadata()])).map_err(|e| Error::io(&side, e))
}

/// Parses [`matrix_csv`] output back into task ids and scores.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<usize>, Matrix)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty matrix file".into()))?;
    let mut cols = header.split(',');
    if cols.next().map(str::trim) != Some("task") {
        return Err(Error::Format("matrix header must start with `task`".into()));
    }
    let ids: Vec<usize> = cols
        .map(|c| c.trim().parse().map_err(|_| Error::Format(format!("bad task id `{c}`"))))
        .collect::<Result<_>>()?;
    let t = ids.len();
    let mut rows = Vec::with_capacity(t);
    for (n, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let id: usize = cells
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("row {}: bad task id", n + 1)))?;
        if ids.get(n) != Some(&id) {
            return Err(Error::Format(format!("row {} is labelled {id}, expected {:?}", n + 1, ids.get(n))));
        }
        let vals: Vec<f64> = cells
            .map(|c| c.trim().parse().map_err(|_| Error::Format(format!("row {}: bad value `{c}`", n + 1))))
            .collect::<Result<_>>()?;
        if vals.len() != t {
            return Err(Error::Format(format!("row {} has {} values, expected {t}", n + 1, vals.len())));
        }
        rows.push(vals);
    }
    if rows.len() != t {
        return Err(Error::Format(format!("{} rows for {t} tasks", rows.len())));
    }
    Ok((ids, Matrix::from_vec(t, t, rows.concat())?))
}

pub fn read_matrix(path: &Path) -> Result<(Vec<usize>, Matrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}
