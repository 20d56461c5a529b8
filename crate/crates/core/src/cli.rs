//! Command-line front end.
//!
//! Every command reads a [`RunConfig`] (`--config`), writes into `--out`
//! (default: the config's `output_dir`) and exits with
//! [`Error::exit_code`]: 0 on success, 1 for configuration or argument
//! errors, 2 for numeric failures, 3 for I/O and file-format errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentKind, RunConfig};
use crate::error::{Error, Result};
use crate::grad::check::{run_suite, GradCheckSettings};
use crate::harness::{
    cfs_ablation, compare_experiment, evaluate, gen_tasks, interference_batches, interference_comparison,
    interference_tasks, routing_ablation, routing_experiment, train, ExperimentReport, TaskSuite, Trained, Variant,
    VariantKind,
};
use crate::interference::{export_matrix, layer_averaged_matrix_over};
use crate::model::Model;
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "mixlora", version, about = "Mixture-of-factors LoRA experiments")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Single seed; overrides `seeds`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Checkpoint file; repeat for several.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Vec<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the configured variant and write checkpoints and loss curves.
    Train,
    /// Run the configured experiment and write its report.
    Compare,
    /// Interference matrices of saved checkpoints.
    Interference,
    /// Per-instance factor selections of a saved checkpoint.
    RoutingDump,
    /// Compare analytic gradients against finite differences.
    Gradcheck,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr as one `error:` message.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command; returns the text printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    match cli.command {
        Command::Train => cmd_train(cli),
        Command::Compare => cmd_compare(cli),
        Command::Interference => cmd_interference(cli),
        Command::RoutingDump => cmd_routing_dump(cli),
        Command::Gradcheck => cmd_gradcheck(cli),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Argument("this command needs --config PATH".into()))?;
    let cfg = RunConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn variant(cfg: &RunConfig, suite: &TaskSuite, seed: u64) -> Variant {
    let a = &cfg.adapter;
    match cfg.variant {
        VariantKind::Lora => a.lora(&suite.spec, a.rank),
        VariantKind::Mixlora => Variant::Mixlora(a.mixlora(&suite.spec, seed)),
        VariantKind::LoraSpecialist => a.specialist(&suite.spec),
    }
}

fn checkpoint_names(trained: &Trained) -> Vec<String> {
    if trained.models.len() == 1 {
        vec!["checkpoint.mlc".into()]
    } else {
        (0..trained.models.len()).map(|t| format!("checkpoint_task{t}.mlc")).collect()
    }
}

fn cmd_train(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let seed = cfg.seeds[0];
    let suite = gen_tasks(&cfg.tasks, seed)?;
    let trained = train(&variant(&cfg, &suite, seed), &suite, &cfg.train, seed)?;
    let held_out = evaluate(&trained, &suite, &cfg.train, seed)?;

    let mut summary = String::new();
    for ((model, adam), name) in trained.models.iter().zip(&trained.optimizers).zip(checkpoint_names(&trained)) {
        let path = dir.join(name);
        Checkpoint::with_optimizer(model.clone(), adam.clone()).save(&path)?;
        let _ = writeln!(summary, "wrote {}", path.display());
    }

    // steps of each model in order; specialists train one after another
    let per_model = cfg.train.steps;
    let mut curve = String::from("model,step,task,loss\n");
    for (k, loss) in trained.curves.steps.iter().enumerate() {
        let (model, step) = if trained.models.len() == 1 { (0, k) } else { (k / per_model, k % per_model) };
        let task = if trained.models.len() == 1 { step % suite.num_tasks() } else { model };
        let _ = writeln!(curve, "{model},{step},{task},{loss:.16e}");
    }
    let mut epochs = String::from("task,epoch,loss\n");
    for (t, losses) in trained.curves.per_task.iter().enumerate() {
        for (e, loss) in losses.iter().enumerate() {
            let _ = writeln!(epochs, "{t},{e},{loss:.16e}");
        }
    }
    let mut eval = String::from("task,loss\n");
    for (t, loss) in held_out.iter().enumerate() {
        let _ = writeln!(eval, "{t},{loss:.16e}");
    }
    for (name, body) in [("loss_curve.csv", &curve), ("epoch_losses.csv", &epochs), ("eval.csv", &eval)] {
        let path = dir.join(name);
        write(&path, body)?;
        let _ = writeln!(summary, "wrote {}", path.display());
    }
    let mean = held_out.iter().sum::<f64>() / held_out.len() as f64;
    let _ = writeln!(
        summary,
        "{} seed {seed}: held-out loss {mean:.6e} (noise floor {:.6e})",
        trained.kind,
        suite.noise_floor()
    );
    Ok(summary)
}

fn cmd_compare(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let exp = cfg.experiment();
    let report: ExperimentReport = match cfg.experiment {
        ExperimentKind::Compare => compare_experiment(&exp)?,
        ExperimentKind::RoutingAblation => routing_ablation(&exp)?,
        ExperimentKind::CfsAblation => cfs_ablation(&exp)?,
        ExperimentKind::RoutingSimilarity => routing_experiment(&exp)?,
        ExperimentKind::Interference => interference_comparison(&exp)?,
    };
    let mut summary = report.summary();
    for p in report.write(&dir)? {
        let _ = writeln!(summary, "wrote {}", p.display());
    }
    Ok(summary)
}

fn check_dims(model: &Model, suite: &TaskSuite, path: &Path) -> Result<()> {
    if model.d_in() != suite.spec.d_in || model.d_out() != suite.spec.d_out {
        return Err(Error::Config(format!(
            "{}: model maps {} -> {} but the configured tasks map {} -> {}",
            path.display(),
            model.d_in(),
            model.d_out(),
            suite.spec.d_in,
            suite.spec.d_out
        )));
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

fn cmd_interference(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    if cli.checkpoint.is_empty() {
        return Err(Error::Argument("interference needs at least one --checkpoint PATH".into()));
    }
    let dir = out_dir(cli, Some(&cfg))?;
    let seed = cfg.seeds[0];
    let suite = gen_tasks(&cfg.tasks, seed)?;
    let s = &cfg.interference;
    let batches = interference_batches(&suite, s, seed);
    let ids = interference_tasks(&suite, s);
    let loss = suite.tasks[0].loss;

    let mut summary = String::new();
    let mut degenerate = Vec::new();
    for path in &cli.checkpoint {
        let model = Checkpoint::load(path)?.model;
        check_dims(&model, &suite, path)?;
        let (mean, per_layer) = layer_averaged_matrix_over(&model, &batches, &ids, s.group, loss, s.lambda, seed)?;
        let name = stem(path);
        let target = dir.join(format!("interference_{name}.csv"));
        export_matrix(&mean, &target)?;
        let _ = writeln!(
            summary,
            "wrote {} (mean negative {:+.6}, mean off-diagonal {:+.6})",
            target.display(),
            mean.mean_negative(),
            mean.mean_off_diagonal()
        );
        if per_layer.len() > 1 {
            for (l, m) in per_layer.iter().enumerate() {
                let p = dir.join(format!("interference_{name}_layer{l}.csv"));
                export_matrix(m, &p)?;
                let _ = writeln!(summary, "wrote {}", p.display());
            }
        }
        degenerate.extend(mean.degenerate.iter().map(|d| format!("{name}: I({}, {}): {}", d.i, d.j, d.reason)));
    }
    if !degenerate.is_empty() {
        print!("{summary}");
        return Err(Error::Degenerate(format!(
            "{} degenerate entries written as NaN; first: {}",
            degenerate.len(),
            degenerate[0]
        )));
    }
    Ok(summary)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn cmd_routing_dump(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    let path = match cli.checkpoint.as_slice() {
        [p] => p,
        _ => return Err(Error::Argument("routing-dump needs exactly one --checkpoint PATH".into())),
    };
    let dir = out_dir(cli, Some(&cfg))?;
    let seed = cfg.seeds[0];
    let suite = gen_tasks(&cfg.tasks, seed)?;
    let model = Checkpoint::load(path)?.model;
    check_dims(&model, &suite, path)?;
    if !model.is_mixlora() {
        return Err(Error::Argument(format!("{}: routing-dump needs a MixLoRA checkpoint", path.display())));
    }

    let mut route = rng::stream(seed, "route-similarity", 0);
    let mut csv = String::from("task,instance,layer,indices_a,gates_a,indices_b,gates_b\n");
    for task in 0..suite.num_tasks() {
        let mut data = rng::stream(seed, "routing-sample", task as u64);
        for i in 0..cfg.routing_samples {
            let inst = suite.sample(task, &mut data);
            let r = model.needs_rng().then_some(&mut route);
            let trace = model.trace(&inst.input, Some(task), r)?;
            for (l, sel) in trace.selections().into_iter().enumerate() {
                let Some(sel) = sel else { continue };
                let _ = writeln!(
                    csv,
                    "{task},{i},{l},{},{},{},{}",
                    join(&sel.indices_a),
                    join(&sel.gates_a),
                    join(&sel.indices_b),
                    join(&sel.gates_b)
                );
            }
        }
    }
    let target = dir.join("routing_dump.csv");
    write(&target, &csv)?;
    Ok(format!("wrote {}\n", target.display()))
}

fn cmd_gradcheck(cli: &Cli) -> Result<String> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let settings = cfg.as_ref().map(|c| c.gradcheck.clone()).unwrap_or_else(GradCheckSettings::default);
    let seed = cli.seed.or_else(|| cfg.as_ref().map(|c| c.seeds[0])).unwrap_or(0);
    let dir = out_dir(cli, cfg.as_ref())?;
    let cases = run_suite(&settings, seed)?;

    let mut csv = String::from("instance,variant,tensor,max_error,index_flip,passed\n");
    let (mut checked, mut flipped, mut failed, mut worst) = (0usize, 0usize, Vec::new(), 0.0f64);
    for c in &cases {
        let rep = &c.report;
        for t in rep.tensors.iter().chain([&rep.input]) {
            let ok = t.max_error < rep.tolerance.rel;
            let _ = writeln!(csv, "{},{},{},{:.6e},{},{}", c.instance, c.variant, t.name, t.max_error, rep.index_flip, ok);
        }
        if rep.index_flip {
            flipped += 1;
            continue;
        }
        checked += 1;
        worst = worst.max(rep.max_error());
        if !rep.passed() {
            failed.push(format!("{} #{} (error {:.3e})", c.variant, c.instance, rep.max_error()));
        }
    }
    let target = dir.join("gradcheck.csv");
    write(&target, &csv)?;
    let summary = format!(
        "{checked} checks, {flipped} excluded for index flips, worst scaled error {worst:.3e}\nwrote {}\n",
        target.display()
    );
    if checked == 0 {
        print!("{summary}");
        return Err(Error::Numeric("every instance flipped indices under perturbation".into()));
    }
    if !failed.is_empty() {
        print!("{summary}");
        return Err(Error::Numeric(format!(
            "{} of {checked} gradient checks failed: {}",
            failed.len(),
            failed.join(", ")
        )));
    }
    Ok(summary)
}
