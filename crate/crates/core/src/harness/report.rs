//! Experiment reports: a human-readable summary plus CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::interference::{self, InterferenceMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SeedLosses {
    pub seed: u64,
    /// Held-out loss per task.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

impl SeedLosses {
    pub fn new(seed: u64, per_task: Vec<f64>) -> Self {
        let mean = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        Self { seed, per_task, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub per_seed: Vec<SeedLosses>,
}

impl VariantResult {
    pub fn mean_over_seeds(&self) -> f64 {
        self.per_seed.iter().map(|s| s.mean).sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    pub fn std_over_seeds(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_over_seeds();
        (self.per_seed.iter().map(|s| (s.mean - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn seed(&self, seed: u64) -> Option<&SeedLosses> {
        self.per_seed.iter().find(|s| s.seed == seed)
    }
}

/// Mean Jaccard similarity of selected factor sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingStats {
    pub within: f64,
    pub cross: f64,
    pub within_pairs: usize,
    pub cross_pairs: usize,
}

impl RoutingStats {
    pub fn gap(&self) -> f64 {
        self.within - self.cross
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub seed: u64,
    pub variant: String,
    pub stats: RoutingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceRecord {
    pub seed: u64,
    pub lora: InterferenceMatrix,
    pub mixlora: InterferenceMatrix,
}

impl InterferenceRecord {
    /// `I_mixlora − I_lora`, entry by entry.
    pub fn deltas(&self) -> Vec<f64> {
        self.mixlora
            .scores
            .as_slice()
            .iter()
            .zip(self.lora.scores.as_slice())
            .map(|(m, l)| m - l)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: String,
    /// The configuration that produced this report, verbatim.
    pub config_echo: String,
    pub seeds: Vec<u64>,
    pub noise_floor: f64,
    pub variants: Vec<VariantResult>,
    pub routing: Vec<RoutingRecord>,
    pub interference: Vec<InterferenceRecord>,
}

impl ExperimentReport {
    pub fn new(kind: &str, config_echo: String, seeds: Vec<u64>, noise_floor: f64) -> Self {
        Self {
            kind: kind.to_string(),
            config_echo,
            seeds,
            noise_floor,
            variants: Vec::new(),
            routing: Vec::new(),
            interference: Vec::new(),
        }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Mean loss of `name` minus that of `reference` at `seed`.
    pub fn gap(&self, name: &str, reference: &str, seed: u64) -> Option<f64> {
        Some(self.variant(name)?.seed(seed)?.mean - self.variant(reference)?.seed(seed)?.mean)
    }

    /// Seeds at which `a` has strictly lower mean loss than `b`.
    pub fn wins(&self, a: &str, b: &str) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| self.gap(a, b, s).is_some_and(|g| g < 0.0))
            .count()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("experiment: {}\nseeds: {:?}\nnoise floor: {:.6e}\n", self.kind, self.seeds, self.noise_floor);
        if !self.variants.is_empty() {
            s.push_str("\nfinal held-out loss (mean over tasks)\n");
            s.push_str(&format!("{:<18}", "variant"));
            for seed in &self.seeds {
                s.push_str(&format!("{:>14}", format!("seed {seed}")));
            }
            s.push_str(&format!("{:>14}{:>14}\n", "mean", "std"));
            for v in &self.variants {
                s.push_str(&format!("{:<18}", v.name));
                for seed in &self.seeds {
                    match v.seed(*seed) {
                        Some(l) => s.push_str(&format!("{:>14.6e}", l.mean)),
                        None => s.push_str(&format!("{:>14}", "-")),
                    }
                }
                s.push_str(&format!("{:>14.6e}{:>14.6e}\n", v.mean_over_seeds(), v.std_over_seeds()));
            }
        }
        if !self.routing.is_empty() {
            s.push_str("\nrouting similarity (Jaccard)\n");
            for r in &self.routing {
                s.push_str(&format!(
                    "seed {:<6} {:<12} within {:.4} cross {:.4} gap {:+.4}\n",
                    r.seed,
                    r.variant,
                    r.stats.within,
                    r.stats.cross,
                    r.stats.gap()
                ));
            }
        }
        if !self.interference.is_empty() {
            s.push_str("\ninterference (mean of negative entries, layer-averaged)\n");
            for r in &self.interference {
                s.push_str(&format!(
                    "seed {:<6} lora {:+.4} mixlora {:+.4} degenerate {}/{}\n",
                    r.seed,
                    r.lora.mean_negative(),
                    r.mixlora.mean_negative(),
                    r.lora.degenerate.len(),
                    r.mixlora.degenerate.len()
                ));
            }
        }
        s.push_str("\nconfig\n");
        s.push_str(&self.config_echo);
        if !self.config_echo.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    /// One row per variant, seed and task.
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("variant,seed,task,loss\n");
        for v in &self.variants {
            for l in &v.per_seed {
                for (t, x) in l.per_task.iter().enumerate() {
                    s.push_str(&format!("{},{},{},{:.16e}\n", v.name, l.seed, t, x));
                }
            }
        }
        s
    }

    pub fn routing_csv(&self) -> String {
        let mut s = String::from("seed,variant,within,cross,gap,within_pairs,cross_pairs\n");
        for r in &self.routing {
            s.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{},{}\n",
                r.seed,
                r.variant,
                r.stats.within,
                r.stats.cross,
                r.stats.gap(),
                r.stats.within_pairs,
                r.stats.cross_pairs
            ));
        }
        s
    }

    pub fn interference_csv(&self) -> String {
        let mut s = String::from("seed,i,j,lora,mixlora,delta\n");
        for r in &self.interference {
            let ids = &r.lora.task_ids;
            let d = r.deltas();
            for (a, i) in ids.iter().enumerate() {
                for (b, j) in ids.iter().enumerate() {
                    let k = a * ids.len() + b;
                    s.push_str(&format!(
                        "{},{},{},{:.16e},{:.16e},{:.16e}\n",
                        r.seed,
                        i,
                        j,
                        r.lora.scores.as_slice()[k],
                        r.mixlora.scores.as_slice()[k],
                        d[k]
                    ));
                }
            }
        }
        s
    }

    /// Writes `summary.txt` and the non-empty CSV tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![("summary.txt".to_string(), self.summary())];
        if !self.variants.is_empty() {
            files.push(("losses.csv".into(), self.losses_csv()));
        }
        if !self.routing.is_empty() {
            files.push(("routing.csv".into(), self.routing_csv()));
        }
        if !self.interference.is_empty() {
            files.push(("interference.csv".into(), self.interference_csv()));
        }
        let mut written = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        for r in &self.interference {
            for (name, m) in [("lora", &r.lora), ("mixlora", &r.mixlora)] {
                let p = dir.join(format!("interference_{name}_seed{}.csv", r.seed));
                interference::export_matrix(m, &p)?;
                written.push(p);
            }
        }
        Ok(written)
    }
}
