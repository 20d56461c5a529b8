//! Dynamically routed low-rank adaptation of a frozen linear layer.
//!
//! The weight update is a sum of `r` rank-1 terms `b ⊗ a` chosen per
//! instance from a pool of `E` factor pairs. Two independent routers pick the
//! A-side and B-side factors from mean-pooled hidden states; the conditional
//! router additionally scores B-side factors from the assembled `A` and the
//! two B-side distributions are fused by addition before top-`r`.

mod config;
mod lora;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

pub use config::{GatingMode, MixLoraConfig, RoutingMode};
pub use lora::{LoraLinear, LoraTrace};

use crate::error::{Error, Result};
use crate::linalg::{matmul, mean_pool, outer, softmax, top_k, Matrix, Vector};
use crate::rng::gaussian_matrix;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_layer_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies one trainable tensor of an adapter layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Pool of A-side factors, one row per factor (`E×d_in`).
    AFactors,
    /// Pool of B-side factors, one row per factor (`E×d_out`).
    BFactors,
    WA,
    WBIfs,
    /// Conditional-router mapping for the i-th assembled A row (`d_in×E`).
    WAB(usize),
    TaskA,
    TaskB,
    /// Plain LoRA down projection (`r×d_in`).
    LoraA,
    /// Plain LoRA up projection (`d_out×r`).
    LoraB,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::AFactors => "a_factors".into(),
            ParamId::BFactors => "b_factors".into(),
            ParamId::WA => "w_a".into(),
            ParamId::WBIfs => "w_b_ifs".into(),
            ParamId::WAB(i) => format!("w_ab[{i}]"),
            ParamId::TaskA => "task_a".into(),
            ParamId::TaskB => "task_b".into(),
            ParamId::LoraA => "lora_a".into(),
            ParamId::LoraB => "lora_b".into(),
        }
    }

    /// True for tensors holding the decomposition factors themselves
    /// (as opposed to router parameters).
    pub fn is_a_side(&self) -> bool {
        matches!(self, ParamId::AFactors | ParamId::LoraA)
    }

    pub fn is_b_side(&self) -> bool {
        matches!(self, ParamId::BFactors | ParamId::LoraB)
    }
}

/// The `E` rank-1 factor pairs of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPool {
    pub a: Matrix,
    pub b: Matrix,
}

impl FactorPool {
    pub fn num_factors(&self) -> usize {
        self.a.rows()
    }

    pub fn a_factor(&self, e: usize) -> &[f64] {
        self.a.row(e)
    }

    pub fn b_factor(&self, e: usize) -> &[f64] {
        self.b.row(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w_a: Matrix,
    pub w_b_ifs: Matrix,
    pub w_ab: Option<Vec<Matrix>>,
    pub task_a: Option<Matrix>,
    pub task_b: Option<Matrix>,
}

/// Selected factors and gates for one side of the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSelection {
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
    /// Scores the top-`r` was taken over (router probabilities for A,
    /// fused probabilities for B). Empty under random routing.
    pub scores: Vector,
}

/// B-side routing result with the intermediate distributions kept for
/// logging and differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct BSideSelection {
    pub side: SideSelection,
    pub p_ifs: Vector,
    /// `softmax(R_cfs(A))`, the zero vector when the conditional router is off.
    pub p_cfs: Vector,
}

/// Per-instance routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices_a: Vec<usize>,
    pub gates_a: Vec<f64>,
    pub indices_b: Vec<usize>,
    pub gates_b: Vec<f64>,
    pub p_a: Vector,
    pub p_b_ifs: Vector,
    /// Raw conditional-router output `Σᵢ softmax(A[i]·W_AB[i])`, summing to
    /// `r`; zero vector when the conditional router is disabled.
    pub p_b_cfs: Vector,
    pub fused_b: Vector,
}

impl Selection {
    fn from_sides(a: &SideSelection, b: &BSideSelection, r_cfs: Vector) -> Self {
        Selection {
            indices_a: a.indices.clone(),
            gates_a: a.gates.clone(),
            indices_b: b.side.indices.clone(),
            gates_b: b.side.gates.clone(),
            p_a: a.scores.clone(),
            p_b_ifs: b.p_ifs.clone(),
            p_b_cfs: r_cfs,
            fused_b: b.side.scores.clone(),
        }
    }

    pub fn side_a(&self) -> SideSelection {
        SideSelection {
            indices: self.indices_a.clone(),
            gates: self.gates_a.clone(),
            scores: self.p_a.clone(),
        }
    }

    pub fn side_b(&self) -> SideSelection {
        SideSelection {
            indices: self.indices_b.clone(),
            gates: self.gates_b.clone(),
            scores: self.fused_b.clone(),
        }
    }
}

/// Intermediate values of the conditional router kept for backward.
#[derive(Debug, Clone)]
pub struct CfsTrace {
    /// `softmax(A[i]·W_AB[i])` for each assembled row.
    pub terms: Vec<Vector>,
    pub sum: Vector,
}

/// Everything a forward pass recorded for one instance.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) layer_id: u64,
    pub(crate) version: u64,
    pub input: Matrix,
    pub task_id: Option<usize>,
    pub pooled_a: Vector,
    pub pooled_b: Vector,
    pub base_out: Matrix,
    pub a_side: SideSelection,
    pub b_side: BSideSelection,
    pub cfs: Option<CfsTrace>,
    pub assembled_a: Matrix,
    pub assembled_b: Matrix,
    pub delta_w: Matrix,
    pub selection: Selection,
    pub output: Matrix,
}

/// Frozen linear layer plus a dynamically routed low-rank adapter.
#[derive(Debug)]
pub struct AdaptedLinear {
    base_w: Matrix,
    pub pool: FactorPool,
    pub routers: RouterParams,
    config: MixLoraConfig,
    id: u64,
    version: u64,
}

impl Clone for AdaptedLinear {
    fn clone(&self) -> Self {
        Self {
            base_w: self.base_w.clone(),
            pool: self.pool.clone(),
            routers: self.routers.clone(),
            config: self.config.clone(),
            id: next_layer_id(),
            version: 0,
        }
    }
}

impl PartialEq for AdaptedLinear {
    fn eq(&self, other: &Self) -> bool {
        self.base_w == other.base_w
            && self.pool == other.pool
            && self.routers == other.routers
            && self.config == other.config
    }
}

impl AdaptedLinear {
    /// Wraps `base_w` (`d_out×d_in`) with a freshly initialized adapter.
    ///
    /// Draw order from `rng`: A factors, `W_A`, `W_B`, each `W_AB[i]`, then the
    /// two task tables. B factors start at exactly zero.
    pub fn init<R: Rng + ?Sized>(config: MixLoraConfig, base_w: Matrix, rng: &mut R) -> Result<Self> {
        let config = config.validated()?;
        if base_w.shape() != (config.d_out, config.d_in) {
            return Err(Error::Shape(format!(
                "base weight is {}x{}, config expects {}x{}",
                base_w.rows(),
                base_w.cols(),
                config.d_out,
                config.d_in
            )));
        }
        let (e, r, s) = (config.num_factors, config.rank, config.init_std);
        let a = gaussian_matrix(rng, e, config.d_in, s);
        let b = Matrix::zeros(e, config.d_out);
        let w_a = gaussian_matrix(rng, e, config.d_in, s);
        let w_b_ifs = gaussian_matrix(rng, e, config.d_out, s);
        let w_ab = config
            .cfs
            .then(|| (0..r).map(|_| gaussian_matrix(rng, config.d_in, e, s)).collect());
        let (task_a, task_b) = if config.routing == RoutingMode::Task {
            (
                Some(gaussian_matrix(rng, config.num_tasks, config.d_in, s)),
                Some(gaussian_matrix(rng, config.num_tasks, config.d_out, s)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            base_w,
            pool: FactorPool { a, b },
            routers: RouterParams {
                w_a,
                w_b_ifs,
                w_ab,
                task_a,
                task_b,
            },
            config,
            id: next_layer_id(),
            version: 0,
        })
    }

    /// Reassembles a layer from stored tensors (checkpoint loading).
    pub fn from_parts(
        config: MixLoraConfig,
        base_w: Matrix,
        pool: FactorPool,
        routers: RouterParams,
    ) -> Result<Self> {
        let config = config.validated()?;
        let (e, r, di, dout) = (config.num_factors, config.rank, config.d_in, config.d_out);
        let check = |m: &Matrix, shape: (usize, usize), what: &str| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{what} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
            Ok(())
        };
        check(&base_w, (dout, di), "base_w")?;
        check(&pool.a, (e, di), "a_factors")?;
        check(&pool.b, (e, dout), "b_factors")?;
        check(&routers.w_a, (e, di), "w_a")?;
        check(&routers.w_b_ifs, (e, dout), "w_b_ifs")?;
        match (&routers.w_ab, config.cfs) {
            (Some(w), true) => {
                if w.len() != r {
                    return Err(Error::Shape(format!("w_ab has {} slices, expected {r}", w.len())));
                }
                for m in w {
                    check(m, (di, e), "w_ab slice")?;
                }
            }
            (None, false) => {}
            _ => return Err(Error::State("w_ab must be present iff cfs is enabled".into())),
        }
        let task = config.routing == RoutingMode::Task;
        match (&routers.task_a, &routers.task_b, task) {
            (Some(ta), Some(tb), true) => {
                check(ta, (config.num_tasks, di), "task_a")?;
                check(tb, (config.num_tasks, dout), "task_b")?;
            }
            (None, None, false) => {}
            _ => {
                return Err(Error::State(
                    "task tables must be present iff routing is task-based".into(),
                ))
            }
        }
        Ok(Self {
            base_w,
            pool,
            routers,
            config,
            id: next_layer_id(),
            version: 0,
        })
    }

    pub fn config(&self) -> &MixLoraConfig {
        &self.config
    }

    pub fn base_w(&self) -> &Matrix {
        &self.base_w
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<(ParamId, &Matrix)> {
        let mut out = vec![
            (ParamId::AFactors, &self.pool.a),
            (ParamId::BFactors, &self.pool.b),
            (ParamId::WA, &self.routers.w_a),
            (ParamId::WBIfs, &self.routers.w_b_ifs),
        ];
        if let Some(w) = &self.routers.w_ab {
            out.extend(w.iter().enumerate().map(|(i, m)| (ParamId::WAB(i), m)));
        }
        if let Some(t) = &self.routers.task_a {
            out.push((ParamId::TaskA, t));
        }
        if let Some(t) = &self.routers.task_b {
            out.push((ParamId::TaskB, t));
        }
        out
    }

    /// Mutable access to the trainable tensors; invalidates earlier traces.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Matrix)> {
        self.version += 1;
        let r = &mut self.routers;
        let mut out = vec![
            (ParamId::AFactors, &mut self.pool.a),
            (ParamId::BFactors, &mut self.pool.b),
            (ParamId::WA, &mut r.w_a),
            (ParamId::WBIfs, &mut r.w_b_ifs),
        ];
        if let Some(w) = &mut r.w_ab {
            out.extend(w.iter_mut().enumerate().map(|(i, m)| (ParamId::WAB(i), m)));
        }
        if let Some(t) = &mut r.task_a {
            out.push((ParamId::TaskA, t));
        }
        if let Some(t) = &mut r.task_b {
            out.push((ParamId::TaskB, t));
        }
        out
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.params_mut().into_iter().find(|(p, _)| *p == id).map(|(_, m)| m)
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        self.config.alpha = alpha;
        self.version += 1;
        Ok(())
    }

    /// Instance routing input: the sequence-averaged hidden state.
    pub fn route_ifs(&self, h: &Matrix) -> Result<Vector> {
        mean_pool(h)
    }

    /// Task routing input: the task's rows of the A-side and B-side tables.
    pub fn route_task(&self, task_id: usize) -> Result<(Vector, Vector)> {
        let (Some(ta), Some(tb)) = (&self.routers.task_a, &self.routers.task_b) else {
            return Err(Error::State("adapter has no task tables (routing is not task-based)".into()));
        };
        if task_id >= ta.rows() {
            return Err(Error::Argument(format!(
                "unknown task id {task_id}; table holds {} tasks",
                ta.rows()
            )));
        }
        Ok((Vector::from(ta.row(task_id)), Vector::from(tb.row(task_id))))
    }

    /// `r` distinct uniformly drawn factors per side with unit gates.
    pub fn route_random<R: Rng + ?Sized>(&self, rng: &mut R) -> Selection {
        let (e, r) = (self.config.num_factors, self.config.rank);
        let mut draw = || {
            let mut idx = rand::seq::index::sample(rng, e, r).into_vec();
            idx.sort_unstable();
            idx
        };
        let indices_a = draw();
        let indices_b = draw();
        Selection {
            indices_a,
            gates_a: vec![1.0; r],
            indices_b,
            gates_b: vec![1.0; r],
            p_a: Vector::default(),
            p_b_ifs: Vector::default(),
            p_b_cfs: Vector::zeros(e),
            fused_b: Vector::default(),
        }
    }

    fn gate(&self, scores: &[f64], indices: &[usize]) -> Vec<f64> {
        match self.config.gating {
            GatingMode::Hard => vec![1.0; indices.len()],
            GatingMode::Soft => {
                let total: f64 = indices.iter().map(|&i| scores[i]).sum();
                indices.iter().map(|&i| scores[i] / total).collect()
            }
        }
    }

    // Renormalized softmax scores over `indices`, taken directly from the
    // logits so unselected logits leave the gates bit-for-bit unchanged.
    fn gate_from_logits(&self, logits: &[f64], indices: &[usize]) -> Vec<f64> {
        match self.config.gating {
            GatingMode::Hard => vec![1.0; indices.len()],
            GatingMode::Soft => {
                let m = indices.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = indices.iter().map(|&i| (logits[i] - m).exp()).collect();
                let total: f64 = ex.iter().sum();
                ex.into_iter().map(|x| x / total).collect()
            }
        }
    }

    /// A-side selection: `top_r(softmax(W_A · pooled))`.
    pub fn select_a(&self, pooled: &[f64]) -> Result<SideSelection> {
        let logits = self.routers.w_a.matvec(pooled)?;
        let p = softmax(&logits)?;
        let indices = top_k(&p, self.config.rank)?;
        let gates = self.gate_from_logits(&logits, &indices);
        Ok(SideSelection {
            indices,
            gates,
            scores: p,
        })
    }

    /// Rows of `A`: the selected A factors, scaled by their gates.
    pub fn assemble_a(&self, sel: &SideSelection) -> Matrix {
        let mut a = Matrix::zeros(sel.indices.len(), self.config.d_in);
        for (i, (&k, &g)) in sel.indices.iter().zip(&sel.gates).enumerate() {
            let src = self.pool.a_factor(k);
            let dst = a.row_mut(i);
            match self.config.gating {
                GatingMode::Hard => dst.copy_from_slice(src),
                GatingMode::Soft => dst.iter_mut().zip(src).for_each(|(d, s)| *d = g * s),
            }
        }
        a
    }

    /// Columns of `B`: the selected B factors, scaled by their gates.
    pub fn assemble_b(&self, sel: &SideSelection) -> Matrix {
        let mut b = Matrix::zeros(self.config.d_out, sel.indices.len());
        for (i, (&k, &g)) in sel.indices.iter().zip(&sel.gates).enumerate() {
            for (o, &x) in self.pool.b_factor(k).iter().enumerate() {
                b[(o, i)] = match self.config.gating {
                    GatingMode::Hard => x,
                    GatingMode::Soft => g * x,
                };
            }
        }
        b
    }

    pub(crate) fn route_cfs_terms(&self, a: &Matrix) -> Result<CfsTrace> {
        let Some(w_ab) = &self.routers.w_ab else {
            return Err(Error::State("conditional router is disabled".into()));
        };
        if a.rows() != w_ab.len() || a.cols() != self.config.d_in {
            return Err(Error::Shape(format!(
                "route_cfs expects a {}x{} A, got {}x{}",
                w_ab.len(),
                self.config.d_in,
                a.rows(),
                a.cols()
            )));
        }
        let mut sum = Vector::zeros(self.config.num_factors);
        let mut terms = Vec::with_capacity(w_ab.len());
        for (i, w) in w_ab.iter().enumerate() {
            let t = softmax(&w.vecmat(a.row(i))?)?;
            sum.iter_mut().zip(t.iter()).for_each(|(s, x)| *s += x);
            terms.push(t);
        }
        Ok(CfsTrace { terms, sum })
    }

    /// Conditional router: `Σᵢ softmax(A[i] · W_AB[i])`; sums to `r`.
    pub fn route_cfs(&self, a: &Matrix) -> Result<Vector> {
        Ok(self.route_cfs_terms(a)?.sum)
    }

    /// B-side selection by late fusion.
    ///
    /// `r_cfs` is the conditional-router output (or the zero vector when that
    /// router is disabled). The fused score is
    /// `softmax(W_B · pooled_b) + softmax(r_cfs)`; with the conditional
    /// router off only the first term is used.
    pub fn select_b(&self, pooled_b: &[f64], r_cfs: &[f64]) -> Result<BSideSelection> {
        let e = self.config.num_factors;
        if r_cfs.len() != e {
            return Err(Error::Shape(format!("r_cfs has length {}, expected {e}", r_cfs.len())));
        }
        let logits = self.routers.w_b_ifs.matvec(pooled_b)?;
        let p_ifs = softmax(&logits)?;
        let p_cfs = if self.config.cfs {
            softmax(r_cfs)?
        } else {
            Vector::zeros(e)
        };
        let fused = if self.config.cfs {
            Vector::from(p_ifs.iter().zip(p_cfs.iter()).map(|(x, y)| x + y).collect::<Vec<_>>())
        } else {
            p_ifs.clone()
        };
        let indices = top_k(&fused, self.config.rank)?;
        let gates = if self.config.cfs {
            self.gate(&fused, &indices)
        } else {
            self.gate_from_logits(&logits, &indices)
        };
        Ok(BSideSelection {
            side: SideSelection {
                indices,
                gates,
                scores: fused,
            },
            p_ifs,
            p_cfs,
        })
    }

    /// `ΔW = Σᵢ (g_B[i]·b_{kᵢ}) ⊗ (g_A[i]·a_{jᵢ})`.
    pub fn assemble_delta_w(&self, sel: &Selection) -> Result<Matrix> {
        self.check_selection(sel)?;
        let a = self.assemble_a(&sel.side_a());
        let b = self.assemble_b(&sel.side_b());
        delta_from_assembled(&b, &a)
    }

    fn check_selection(&self, sel: &Selection) -> Result<()> {
        let (e, r) = (self.config.num_factors, self.config.rank);
        for (name, idx, gates) in [
            ("A", &sel.indices_a, &sel.gates_a),
            ("B", &sel.indices_b, &sel.gates_b),
        ] {
            if idx.len() != r || gates.len() != r {
                return Err(Error::State(format!("{name}-side selection must hold {r} factors")));
            }
            if idx.iter().any(|&i| i >= e) || idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::State(format!(
                    "{name}-side indices {idx:?} are not sorted distinct values below {e}"
                )));
            }
        }
        Ok(())
    }

    /// Runs routing and the adapted layer on one instance and records every
    /// intermediate needed by backward.
    ///
    /// `task_id` is required under task routing and ignored otherwise;
    /// `rng` is required under random routing.
    pub fn trace<R: Rng + ?Sized>(
        &self,
        h: &Matrix,
        task_id: Option<usize>,
        rng: Option<&mut R>,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if h.cols() != cfg.d_in {
            return Err(Error::Shape(format!(
                "input has {} features, layer expects {}",
                h.cols(),
                cfg.d_in
            )));
        }
        if h.rows() == 0 {
            return Err(Error::Shape("empty instance (zero-length sequence)".into()));
        }
        let base_out = matmul(h, &self.base_w.transpose())?;

        let (pooled_a, pooled_b, a_side, b_side, cfs, assembled_a, selection);
        match cfg.routing {
            RoutingMode::Random => {
                let rng = rng.ok_or_else(|| {
                    Error::Argument("random routing needs a random number generator".into())
                })?;
                let sel = self.route_random(rng);
                pooled_a = Vector::default();
                pooled_b = Vector::default();
                a_side = sel.side_a();
                b_side = BSideSelection {
                    side: sel.side_b(),
                    p_ifs: Vector::default(),
                    p_cfs: Vector::zeros(cfg.num_factors),
                };
                assembled_a = self.assemble_a(&a_side);
                cfs = None;
                selection = sel;
            }
            RoutingMode::Instance | RoutingMode::Task => {
                (pooled_a, pooled_b) = if cfg.routing == RoutingMode::Task {
                    let id = task_id.ok_or_else(|| {
                        Error::Argument("task routing requires a task id".into())
                    })?;
                    self.route_task(id)?
                } else {
                    (self.route_ifs(h)?, self.route_ifs(&base_out)?)
                };
                a_side = self.select_a(&pooled_a)?;
                assembled_a = self.assemble_a(&a_side);
                cfs = if cfg.cfs {
                    Some(self.route_cfs_terms(&assembled_a)?)
                } else {
                    None
                };
                let r_cfs = cfs
                    .as_ref()
                    .map(|c| c.sum.clone())
                    .unwrap_or_else(|| Vector::zeros(cfg.num_factors));
                b_side = self.select_b(&pooled_b, &r_cfs)?;
                selection = Selection::from_sides(&a_side, &b_side, r_cfs);
            }
        }

        let assembled_b = self.assemble_b(&b_side.side);
        let delta_w = delta_from_assembled(&assembled_b, &assembled_a)?;
        let adapt = matmul(h, &delta_w.transpose())?;
        let output = combine(&base_out, &adapt, cfg.alpha);

        Ok(ForwardTrace {
            layer_id: self.id,
            version: self.version,
            input: h.clone(),
            task_id,
            pooled_a,
            pooled_b,
            base_out,
            a_side,
            b_side,
            cfs,
            assembled_a,
            assembled_b,
            delta_w,
            selection,
            output,
        })
    }

    /// Adapted forward `h·Wᵀ + α·h·ΔWᵀ` for one instance under instance or
    /// task routing.
    pub fn forward(&self, h: &Matrix, task_id: Option<usize>) -> Result<(Matrix, Selection)> {
        let t = self.trace::<crate::rng::StreamRng>(h, task_id, None)?;
        Ok((t.output, t.selection))
    }

    /// Forward pass under random routing.
    pub fn forward_random<R: Rng + ?Sized>(&self, h: &Matrix, rng: &mut R) -> Result<(Matrix, Selection)> {
        let t = self.trace(h, None, Some(rng))?;
        Ok((t.output, t.selection))
    }

    /// Forward pass with an externally supplied selection.
    pub fn forward_with_selection(&self, h: &Matrix, sel: &Selection) -> Result<Matrix> {
        let delta_w = self.assemble_delta_w(sel)?;
        let base_out = matmul(h, &self.base_w.transpose())?;
        let adapt = matmul(h, &delta_w.transpose())?;
        Ok(combine(&base_out, &adapt, self.config.alpha))
    }

    /// Output of the frozen layer alone.
    pub fn base_forward(&self, h: &Matrix) -> Result<Matrix> {
        matmul(h, &self.base_w.transpose())
    }
}

/// Sum of outer products of the columns of `b` with the rows of `a`,
/// accumulated in column order. Equal to `b · a`.
pub(crate) fn delta_from_assembled(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    if b.cols() != a.rows() {
        return Err(Error::Shape(format!(
            "B has {} columns but A has {} rows",
            b.cols(),
            a.rows()
        )));
    }
    let mut dw = Matrix::zeros(b.rows(), a.cols());
    for i in 0..a.rows() {
        dw.add_assign(&outer(b.column(i).as_slice(), a.row(i))?)?;
    }
    Ok(dw)
}

/// `base + α·adapt`, elementwise.
pub(crate) fn combine(base: &Matrix, adapt: &Matrix, alpha: f64) -> Matrix {
    let data = base
        .as_slice()
        .iter()
        .zip(adapt.as_slice())
        .map(|(b, a)| b + alpha * a)
        .collect();
    Matrix::from_vec(base.rows(), base.cols(), data).expect("same shape")
}
