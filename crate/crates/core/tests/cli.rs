use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixlora::checkpoint::Checkpoint;
use mixlora::config::RunConfig;
use mixlora::harness::{gen_tasks, train, Variant};
use mixlora::interference::read_matrix;
use mixlora::mixlora::LoraLinear;
use mixlora::model::{AdapterLayer, Model};
use mixlora::rng::seeded;

const TASKS: &str = "[tasks]
num_tasks = 3
d_in = 6
d_out = 5
conflict_angle = -0.4
teacher_rank = 2
delta_norm = 2.0
input_shift = 1.0
noise_std = 0.1
seq_len = 4
";

const SMALL: &str = "seeds = [7]
routing_samples = 6

[train]
steps = 60
lr = 0.01
batch_size = 4
epoch_steps = 20
eval_samples = 8

[adapter]
num_factors = 4
rank = 2
routing = \"instance\"
gating = \"soft\"
cfs = true

[interference]
group = \"all_adapter\"
lambda = 0.1
batches_per_task = 2
batch_size = 4
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlora")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("{extra}{SMALL}{TASKS}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_on_default_settings_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("true")), "{csv}");
    assert!(csv.lines().any(|l| l.contains("task_a")) && csv.lines().any(|l| l.contains("w_ab[1]")));
}

#[test]
fn train_writes_a_checkpoint_that_reloads_to_the_same_model() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "");
    let out = d.path().join("a");
    let o = bin(&["train", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loaded = Checkpoint::load(&out.join("checkpoint.mlc")).unwrap();
    assert_eq!(loaded.optimizer.as_ref().unwrap().step, 60);

    let rc = RunConfig::load(Path::new(&cfg)).unwrap();
    let suite = gen_tasks(&rc.tasks, 7).unwrap();
    let reference = train(&Variant::Mixlora(rc.adapter.mixlora(&suite.spec, 7)), &suite, &rc.train, 7).unwrap();
    let x = suite.sample(1, &mut seeded(3)).input;
    let a = loaded.model.forward(&x, Some(1), None).unwrap();
    let b = reference.models[0].forward(&x, Some(1), None).unwrap();
    assert_eq!(a, b);

    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 61);
    assert_eq!(fs::read_to_string(out.join("epoch_losses.csv")).unwrap().lines().count(), 1 + 3 * 3);
    assert_eq!(fs::read_to_string(out.join("eval.csv")).unwrap().lines().count(), 4);
}

#[test]
fn commands_are_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "experiment = \"compare\"\n");
    for cmd in ["train", "compare"] {
        let (a, b) = (d.path().join(format!("{cmd}1")), d.path().join(format!("{cmd}2")));
        for dir in [&a, &b] {
            let o = bin(&[cmd, "--config", &cfg, "--out", s(dir)]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for n in names {
            assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
        }
    }
}

#[test]
fn specialists_get_one_checkpoint_per_task() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "variant = \"lora_specialist\"\n");
    let o = bin(&["train", "--config", &cfg, "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for t in 0..3 {
        assert!(d.path().join(format!("checkpoint_task{t}.mlc")).exists());
    }
    let curve = fs::read_to_string(d.path().join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().nth(61).unwrap().split(',').take(3).collect::<Vec<_>>(), ["1", "0", "1"]);
}

#[test]
fn compare_runs_the_configured_experiment_with_seed_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "experiment = \"routing_similarity\"\n");
    let o = bin(&["compare", "--config", &cfg, "--out", s(d.path()), "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(d.path().join("summary.txt")).unwrap();
    assert!(summary.contains("seeds: [11]"), "{summary}");
    let routing = fs::read_to_string(d.path().join("routing.csv")).unwrap();
    assert!(routing.lines().any(|l| l.starts_with("11,instance,")));
    assert!(routing.lines().any(|l| l.starts_with("11,random,")));
}

#[test]
fn interference_on_a_duplicated_task_is_all_ones() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "");
    let o = bin(&["train", "--config", &cfg, "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dup = d.path().join("dup.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("batches_per_task = 2", "batches_per_task = 1\ntasks = [2, 2, 2]");
    fs::write(&dup, text).unwrap();
    let ck = d.path().join("checkpoint.mlc");
    let o = bin(&["interference", "--config", s(&dup), "--checkpoint", s(&ck), "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ids, m) = read_matrix(&d.path().join("interference_checkpoint.csv")).unwrap();
    assert_eq!(ids, vec![2, 2, 2]);
    assert!(m.as_slice().iter().all(|&x| x == 1.0), "{m:?}");
    assert!(d.path().join("interference_checkpoint.csv.meta").exists());

    let o = bin(&["interference", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ids, m) = read_matrix(&d.path().join("interference_checkpoint.csv")).unwrap();
    assert_eq!(ids, vec![0, 1, 2]);
    assert!((0..3).all(|i| (m[(i, i)] - 1.0).abs() < 1e-9));
}

#[test]
fn degenerate_gradients_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("group = \"all_adapter\"", "group = \"lora_a\"");
    fs::write(&cfg, text).unwrap();
    // fresh LoRA: B = 0, so every A gradient vanishes
    let rc = RunConfig::load(Path::new(&cfg)).unwrap();
    let suite = gen_tasks(&rc.tasks, 7).unwrap();
    let layer = LoraLinear::init(suite.base_w.clone(), 2, 4.0, 0.4, &mut seeded(1)).unwrap();
    let ck = d.path().join("fresh.mlc");
    Checkpoint::new(Model::single(AdapterLayer::Lora(layer))).save(&ck).unwrap();
    let o = bin(&["interference", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(d.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
    let (_, m) = read_matrix(&d.path().join("interference_fresh.csv")).unwrap();
    assert!(m.as_slice().iter().all(|x| x.is_nan()));
}

#[test]
fn routing_dump_lists_every_sampled_instance() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "run.toml", "");
    assert_eq!(code(&bin(&["train", "--config", &cfg, "--out", s(d.path())])), 0);
    let ck = d.path().join("checkpoint.mlc");
    let o = bin(&["routing-dump", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(d.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("routing_dump.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 6);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[..3], ["0", "0", "0"]);
    assert_eq!(row[3].split(';').count(), 2);
    let gates: f64 = row[4].split(';').map(|g| g.parse::<f64>().unwrap()).sum();
    assert!((gates - 1.0).abs() < 1e-12);

    let lora = config(d.path(), "lora.toml", "variant = \"lora\"\n");
    let ld = d.path().join("lora");
    assert_eq!(code(&bin(&["train", "--config", &lora, "--out", s(&ld)])), 0);
    let o = bin(&["routing-dump", "--config", &cfg, "--checkpoint", s(&ld.join("checkpoint.mlc"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_code_one_and_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let bad = config(d.path(), "bad.toml", "unknown_key = 3\n");
    let o = bin(&["train", "--config", &bad]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.starts_with("error: ") && err.contains("line 1"), "{err}");
    assert!(err.contains("bad.toml"), "{err}");

    let infeasible = config(d.path(), "angle.toml", "");
    let t = fs::read_to_string(&infeasible).unwrap().replace("-0.4", "-0.9");
    fs::write(&infeasible, t).unwrap();
    assert_eq!(code(&bin(&["compare", "--config", &infeasible])), 1);

    assert_eq!(code(&bin(&["train"])), 1);
    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["--help"])), 0);
}

#[test]
fn io_and_format_errors_exit_with_code_three() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["train", "--config", "/no/such/run.toml"])), 3);
    let cfg = config(d.path(), "run.toml", "");
    let junk = d.path().join("junk.mlc");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = bin(&["interference", "--config", &cfg, "--checkpoint", s(&junk), "--out", s(d.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = bin(&["routing-dump", "--config", &cfg, "--checkpoint", "/no/such.mlc", "--out", s(d.path())]);
    assert_eq!(code(&o), 3);
}
