//! The comparative experiments: variant comparison, routing and CFS
//! ablations, routing-pattern similarity and interference comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interference::{layer_averaged_matrix_over, GroupSelector, TaskBatch};
use crate::mixlora::{GatingMode, MixLoraConfig, RoutingMode};
use crate::model::Model;
use crate::rng;

use super::report::{ExperimentReport, InterferenceRecord, RoutingRecord, RoutingStats, SeedLosses, VariantResult};
use super::tasks::{gen_tasks, TaskSpec, TaskSuite};
use super::train::{evaluate, train, TrainSettings, Variant};

/// Adapter hyperparameters shared by every variant of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    /// Factor pool size `E` of MixLoRA.
    pub num_factors: usize,
    /// Rank `r` of every adapter (factors selected per instance for MixLoRA).
    pub rank: usize,
    /// MixLoRA scale; `2E` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// LoRA scale; `2r` when absent.
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    #[serde(default = "default_routing")]
    pub routing: RoutingMode,
    #[serde(default = "default_gating")]
    pub gating: GatingMode,
    #[serde(default = "default_true")]
    pub cfs: bool,
    /// Gaussian init scale; `1/√d_in` when absent.
    #[serde(default)]
    pub init_std: Option<f64>,
}

fn default_routing() -> RoutingMode {
    RoutingMode::Instance
}

fn default_gating() -> GatingMode {
    GatingMode::Soft
}

fn default_true() -> bool {
    true
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            num_factors: 8,
            rank: 2,
            alpha: None,
            lora_alpha: None,
            routing: RoutingMode::Instance,
            gating: GatingMode::Soft,
            cfs: true,
            init_std: None,
        }
    }
}

impl AdapterSpec {
    pub fn mixlora(&self, tasks: &TaskSpec, seed: u64) -> MixLoraConfig {
        let mut c = MixLoraConfig::new(tasks.d_in, tasks.d_out, self.num_factors, self.rank)
            .with_routing(self.routing)
            .with_gating(self.gating)
            .with_cfs(self.cfs)
            .with_seed(seed)
            .with_num_tasks(tasks.num_tasks);
        if let Some(a) = self.alpha {
            c = c.with_alpha(a);
        }
        if let Some(s) = self.init_std {
            c = c.with_init_std(s);
        }
        c
    }

    /// Plain LoRA of rank `rank`.
    pub fn lora(&self, tasks: &TaskSpec, rank: usize) -> Variant {
        let alpha = self.lora_alpha.unwrap_or(2.0 * rank as f64);
        let init_std = self.init_std.unwrap_or(1.0 / (tasks.d_in as f64).sqrt());
        Variant::Lora { rank, alpha, init_std }
    }

    pub fn specialist(&self, tasks: &TaskSpec) -> Variant {
        match self.lora(tasks, self.rank) {
            Variant::Lora { rank, alpha, init_std } => Variant::LoraSpecialist { rank, alpha, init_std },
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceSettings {
    pub group: GroupSelector,
    pub lambda: f64,
    /// Batches per task; every ordered pair of tasks averages over
    /// `batches_per_task²` batch pairs.
    pub batches_per_task: usize,
    pub batch_size: usize,
    /// Training step at which gradients are taken; the end of training when
    /// absent. Training is deterministic per step, so this is the state of
    /// the full run after that many steps.
    #[serde(default)]
    pub checkpoint_step: Option<usize>,
    /// Tasks analysed, in matrix order; all tasks when absent. A task may be
    /// listed more than once.
    #[serde(default)]
    pub tasks: Option<Vec<usize>>,
}

impl Default for InterferenceSettings {
    fn default() -> Self {
        Self {
            group: GroupSelector::AllAdapter,
            lambda: 0.1,
            batches_per_task: 4,
            batch_size: 8,
            checkpoint_step: None,
            tasks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: TaskSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub adapter: AdapterSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Instances per task for routing-similarity statistics.
    #[serde(default = "default_routing_samples")]
    pub routing_samples: usize,
    #[serde(default)]
    pub interference: InterferenceSettings,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_routing_samples() -> usize {
    250
}

impl ExperimentConfig {
    /// Defaults for a suite of `T = 4`, `d = 16` tasks at `conflict_angle`.
    pub fn new(conflict_angle: f64) -> Self {
        Self {
            tasks: TaskSpec::new(4, 16, 16, conflict_angle),
            train: TrainSettings::default(),
            adapter: AdapterSpec::default(),
            seeds: default_seeds(),
            routing_samples: default_routing_samples(),
            interference: InterferenceSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.adapter.mixlora(&self.tasks, 0).validated()?;
        if self.routing_samples < 2 {
            return Err(Error::Config("routing_samples must be at least 2".into()));
        }
        let i = &self.interference;
        if i.batches_per_task == 0 || i.batch_size == 0 || !(i.lambda > 0.0) {
            return Err(Error::Config("interference batches, batch size and lambda must be positive".into()));
        }
        if let Some(k) = i.checkpoint_step {
            if k == 0 || k > self.train.steps {
                return Err(Error::Config(format!(
                    "interference checkpoint_step {k} must lie in 1..={}",
                    self.train.steps
                )));
            }
        }
        if let Some(ts) = &i.tasks {
            if ts.len() < 2 {
                return Err(Error::Config("interference tasks must list at least two entries".into()));
            }
            if let Some(t) = ts.iter().find(|&&t| t >= self.tasks.num_tasks) {
                return Err(Error::Config(format!(
                    "interference task {t} does not exist ({} tasks)",
                    self.tasks.num_tasks
                )));
            }
        }
        Ok(())
    }

    fn echo(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

fn run_variants(
    cfg: &ExperimentConfig,
    kind: &str,
    variants: &[(String, Maker<'_>)],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new(kind, cfg.echo(), cfg.seeds.clone(), 0.0);
    let mut results: Vec<VariantResult> = variants
        .iter()
        .map(|(name, _)| VariantResult {
            name: name.clone(),
            per_seed: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let suite = gen_tasks(&cfg.tasks, seed)?;
        report.noise_floor = suite.noise_floor();
        for ((_, make), out) in variants.iter().zip(results.iter_mut()) {
            let trained = train(&make(&suite, seed), &suite, &cfg.train, seed)?;
            out.per_seed.push(SeedLosses::new(seed, evaluate(&trained, &suite, &cfg.train, seed)?));
        }
    }
    report.variants = results;
    Ok(report)
}

type Maker<'a> = Box<dyn Fn(&TaskSuite, u64) -> Variant + 'a>;

/// `lora` (rank `r`), `mixlora` (`E`, `r`) and `lora_specialist` (rank `r`)
/// on identical tasks and seeds.
pub fn compare_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let a = &cfg.adapter;
    let variants: Vec<(String, Maker)> = vec![
        ("lora".into(), Box::new(|s: &TaskSuite, _| a.lora(&s.spec, a.rank))),
        ("mixlora".into(), Box::new(|s: &TaskSuite, seed| Variant::Mixlora(a.mixlora(&s.spec, seed)))),
        ("lora_specialist".into(), Box::new(|s: &TaskSuite, _| a.specialist(&s.spec))),
    ];
    run_variants(cfg, "compare", &variants)
}

/// MixLoRA under instance, task and random routing.
pub fn routing_ablation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let variants: Vec<(String, Maker)> = [RoutingMode::Instance, RoutingMode::Task, RoutingMode::Random]
        .into_iter()
        .map(|mode| {
            let make: Maker = Box::new(move |s: &TaskSuite, seed| {
                let mut a = cfg.adapter.clone();
                a.routing = mode;
                Variant::Mixlora(a.mixlora(&s.spec, seed))
            });
            (mode.to_string(), make)
        })
        .collect();
    run_variants(cfg, "routing_ablation", &variants)
}

/// MixLoRA with the conditional router on and off, otherwise identical.
pub fn cfs_ablation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let variants: Vec<(String, Maker)> = [true, false]
        .into_iter()
        .map(|on| {
            let make: Maker = Box::new(move |s: &TaskSuite, seed| {
                let mut a = cfg.adapter.clone();
                a.cfs = on;
                Variant::Mixlora(a.mixlora(&s.spec, seed))
            });
            (if on { "cfs_on" } else { "cfs_off" }.to_string(), make)
        })
        .collect();
    run_variants(cfg, "cfs_ablation", &variants)
}

/// Selected factors of one instance in one layer as a bit set: A-side index
/// `k` is bit `k`, B-side index `k` is bit `E + k`.
fn selection_bits(model: &Model, h: &crate::linalg::Matrix, task: usize, rng: &mut rng::StreamRng) -> Result<Vec<u128>> {
    let r = model.needs_rng().then_some(rng);
    let trace = model.trace(h, Some(task), r)?;
    let mut out = Vec::with_capacity(trace.layers.len());
    for (layer, sel) in model.layers.iter().zip(trace.selections()) {
        let sel = sel.ok_or_else(|| Error::Argument("routing similarity needs MixLoRA layers".into()))?;
        let e = layer.as_mix().expect("selection implies a routed layer").config().num_factors;
        let mut bits = 0u128;
        for &k in &sel.indices_a {
            bits |= 1 << k;
        }
        for &k in &sel.indices_b {
            bits |= 1 << (e + k);
        }
        out.push(bits);
    }
    Ok(out)
}

fn jaccard(a: u128, b: u128) -> f64 {
    let union = (a | b).count_ones();
    if union == 0 {
        1.0
    } else {
        f64::from((a & b).count_ones()) / f64::from(union)
    }
}

/// Mean Jaccard similarity of selected factor sets between instances of the
/// same task and of different tasks, over `n_samples` fresh instances per
/// task and all unordered instance pairs, averaged across layers.
pub fn routing_similarity(model: &Model, suite: &TaskSuite, n_samples: usize, seed: u64) -> Result<RoutingStats> {
    if !model.is_mixlora() {
        return Err(Error::Argument("routing similarity needs a MixLoRA model".into()));
    }
    if n_samples < 2 {
        return Err(Error::Argument("need at least two samples per task".into()));
    }
    for layer in &model.layers {
        if layer.as_mix().is_some_and(|l| 2 * l.config().num_factors > 128) {
            return Err(Error::Argument("routing similarity supports at most 64 factors".into()));
        }
    }
    let mut route = rng::stream(seed, "route-similarity", 0);
    let mut sets: Vec<(usize, Vec<u128>)> = Vec::with_capacity(n_samples * suite.num_tasks());
    for task in 0..suite.num_tasks() {
        let mut data = rng::stream(seed, "routing-sample", task as u64);
        for _ in 0..n_samples {
            let inst = suite.sample(task, &mut data);
            sets.push((task, selection_bits(model, &inst.input, task, &mut route)?));
        }
    }
    let (mut within, mut cross, mut nw, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let layers = sets[i].1.len();
            let sim = sets[i].1.iter().zip(&sets[j].1).map(|(a, b)| jaccard(*a, *b)).sum::<f64>() / layers as f64;
            if sets[i].0 == sets[j].0 {
                within += sim;
                nw += 1;
            } else {
                cross += sim;
                nc += 1;
            }
        }
    }
    Ok(RoutingStats {
        within: within / nw.max(1) as f64,
        cross: cross / nc.max(1) as f64,
        within_pairs: nw,
        cross_pairs: nc,
    })
}

/// Trains MixLoRA under the configured routing and under random routing and
/// reports routing similarity for both.
pub fn routing_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("routing_similarity", cfg.echo(), cfg.seeds.clone(), 0.0);
    for &seed in &cfg.seeds {
        let suite = gen_tasks(&cfg.tasks, seed)?;
        report.noise_floor = suite.noise_floor();
        for mode in [cfg.adapter.routing, RoutingMode::Random] {
            let mut a = cfg.adapter.clone();
            a.routing = mode;
            let trained = train(&Variant::Mixlora(a.mixlora(&suite.spec, seed)), &suite, &cfg.train, seed)?;
            let stats = routing_similarity(&trained.models[0], &suite, cfg.routing_samples, seed)?;
            report.routing.push(RoutingRecord {
                seed,
                variant: mode.to_string(),
                stats,
            });
        }
    }
    Ok(report)
}

/// Fresh batches for interference estimation, `batches_per_task` per task.
pub fn interference_batches(suite: &TaskSuite, settings: &InterferenceSettings, seed: u64) -> Vec<TaskBatch> {
    let mut tasks = interference_tasks(suite, settings);
    tasks.sort_unstable();
    tasks.dedup();
    let mut out = Vec::new();
    for task in tasks {
        for b in 0..settings.batches_per_task {
            let mut data = rng::stream(seed, "interference-data", (task * settings.batches_per_task + b) as u64);
            out.push(suite.batch(task, settings.batch_size, &mut data));
        }
    }
    out
}

/// Matrix row order: the configured list, or every task of `suite`.
pub fn interference_tasks(suite: &TaskSuite, settings: &InterferenceSettings) -> Vec<usize> {
    settings.tasks.clone().unwrap_or_else(|| (0..suite.num_tasks()).collect())
}

/// Trains same-capacity LoRA (rank `E`) and MixLoRA, then compares their
/// layer-averaged interference matrices at the configured checkpoint.
pub fn interference_comparison(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("interference", cfg.echo(), cfg.seeds.clone(), 0.0);
    let s = &cfg.interference;
    let settings = TrainSettings {
        steps: s.checkpoint_step.unwrap_or(cfg.train.steps),
        ..cfg.train.clone()
    };
    for &seed in &cfg.seeds {
        let suite = gen_tasks(&cfg.tasks, seed)?;
        report.noise_floor = suite.noise_floor();
        let lora = train(&cfg.adapter.lora(&suite.spec, cfg.adapter.num_factors), &suite, &settings, seed)?;
        let mix = train(&Variant::Mixlora(cfg.adapter.mixlora(&suite.spec, seed)), &suite, &settings, seed)?;
        let batches = interference_batches(&suite, s, seed);
        let ids = interference_tasks(&suite, s);
        let loss = suite.tasks[0].loss;
        let (l, _) = layer_averaged_matrix_over(&lora.models[0], &batches, &ids, s.group, loss, s.lambda, seed)?;
        let (m, _) = layer_averaged_matrix_over(&mix.models[0], &batches, &ids, s.group, loss, s.lambda, seed)?;
        report.interference.push(InterferenceRecord { seed, lora: l, mixlora: m });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(angle: f64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(angle);
        c.tasks = TaskSpec {
            seq_len: 4,
            ..TaskSpec::new(3, 6, 5, angle)
        };
        c.adapter.num_factors = 4;
        c.train = TrainSettings {
            steps: 90,
            batch_size: 4,
            epoch_steps: 30,
            eval_samples: 8,
            lr: 1e-2,
        };
        c.seeds = vec![1, 2];
        c.routing_samples = 10;
        c.interference.batches_per_task = 2;
        c.interference.batch_size = 3;
        c
    }

    #[test]
    fn compare_reports_every_variant_and_is_reproducible() {
        let cfg = tiny(-0.3);
        let a = compare_experiment(&cfg).unwrap();
        assert_eq!(a, compare_experiment(&cfg).unwrap());
        for v in ["lora", "mixlora", "lora_specialist"] {
            let r = a.variant(v).unwrap();
            assert_eq!(r.per_seed.len(), 2);
            assert!(r.per_seed.iter().all(|s| s.per_task.len() == 3 && s.mean.is_finite()));
        }
        assert!(a.summary().contains("mixlora"));
        assert_eq!(a.losses_csv().lines().count(), 1 + 3 * 2 * 3);
    }

    #[test]
    fn ablations_name_their_arms() {
        let cfg = tiny(0.0);
        let r = routing_ablation(&cfg).unwrap();
        assert!(["instance", "task", "random"].iter().all(|n| r.variant(n).is_some()));
        let c = cfs_ablation(&cfg).unwrap();
        assert!(c.variant("cfs_on").is_some() && c.variant("cfs_off").is_some());
        assert_eq!(c, cfs_ablation(&cfg).unwrap());
    }

    #[test]
    fn full_selection_gives_unit_jaccard() {
        let cfg = tiny(0.0);
        let suite = gen_tasks(&cfg.tasks, 1).unwrap();
        let mut a = cfg.adapter.clone();
        a.num_factors = 2;
        let m = train(&Variant::Mixlora(a.mixlora(&suite.spec, 1)), &suite, &cfg.train, 1).unwrap();
        let st = routing_similarity(&m.models[0], &suite, 5, 1).unwrap();
        assert_eq!((st.within, st.cross), (1.0, 1.0));
        assert_eq!(st.within_pairs, 3 * 10);
        assert_eq!(st.cross_pairs, 3 * 5 * 5);
    }

    #[test]
    fn random_routing_shows_no_task_structure() {
        let cfg = tiny(0.0);
        let suite = gen_tasks(&cfg.tasks, 1).unwrap();
        let mut a = cfg.adapter.clone();
        a.routing = RoutingMode::Random;
        let m = train(&Variant::Mixlora(a.mixlora(&suite.spec, 1)), &suite, &cfg.train, 1).unwrap();
        let st = routing_similarity(&m.models[0], &suite, 334, 5).unwrap();
        assert!(st.gap().abs() < 0.05, "{st:?}");
    }

    #[test]
    fn lora_model_is_rejected_for_routing_similarity() {
        let cfg = tiny(0.0);
        let suite = gen_tasks(&cfg.tasks, 1).unwrap();
        let m = train(&cfg.adapter.lora(&suite.spec, 2), &suite, &cfg.train, 1).unwrap();
        assert!(matches!(routing_similarity(&m.models[0], &suite, 5, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn a_task_listed_twice_with_one_batch_gives_ones() {
        let mut cfg = tiny(-0.3);
        cfg.seeds = vec![2];
        cfg.interference.tasks = Some(vec![1, 1]);
        cfg.interference.batches_per_task = 1;
        let r = interference_comparison(&cfg).unwrap();
        for m in [&r.interference[0].lora, &r.interference[0].mixlora] {
            assert_eq!(m.task_ids, vec![1, 1]);
            assert!(m.scores.as_slice().iter().all(|&x| x == 1.0), "{:?}", m.scores);
        }
        cfg.interference.tasks = Some(vec![0, 3]);
        assert!(matches!(interference_comparison(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identical_tasks_interfere_positively() {
        let mut cfg = tiny(1.0);
        cfg.tasks.noise_std = 0.0;
        cfg.tasks.input_shift = 0.0;
        cfg.interference.checkpoint_step = Some(3);
        cfg.interference.batch_size = 400;
        cfg.seeds = vec![3];
        let r = interference_comparison(&cfg).unwrap();
        let rec = &r.interference[0];
        // one shared teacher: every task pulls the same way once batches are
        // large enough to swamp sampling noise
        for m in [&rec.lora, &rec.mixlora] {
            assert!(m.scores.as_slice().iter().all(|&x| x > 0.8), "{:?}", m.scores);
        }
    }

    #[test]
    fn antiparallel_pair_conflicts_under_lora() {
        let mut cfg = tiny(-1.0);
        cfg.tasks.num_tasks = 2;
        cfg.tasks.input_shift = 0.0;
        cfg.seeds = vec![4];
        let r = interference_comparison(&cfg).unwrap();
        let l = &r.interference[0].lora;
        assert!(l.scores[(0, 1)] < 0.0 && l.scores[(1, 0)] < 0.0, "{:?}", l.scores);
    }

    #[test]
    fn reports_write_all_tables() {
        let cfg = tiny(-0.3);
        let mut r = interference_comparison(&ExperimentConfig {
            seeds: vec![1],
            ..cfg.clone()
        })
        .unwrap();
        r.variants = compare_experiment(&cfg).unwrap().variants;
        let dir = tempfile::tempdir().unwrap();
        let files = r.write(dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        for n in ["summary.txt", "losses.csv", "interference.csv", "interference_lora_seed1.csv"] {
            assert!(names.iter().any(|x| x == n), "{names:?}");
        }
        assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("[tasks]"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(0.0);
        c.seeds.clear();
        assert!(matches!(compare_experiment(&c), Err(Error::Config(_))));
        let mut c = tiny(0.0);
        c.adapter.rank = 9;
        assert!(matches!(compare_experiment(&c), Err(Error::Config(_))));
        let c = tiny(-0.9);
        assert!(matches!(compare_experiment(&c), Err(Error::Config(_))));
    }
}
