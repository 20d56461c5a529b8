use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Route on the sequence-averaged hidden state of each instance.
    Instance,
    /// Route on a trainable per-task embedding row.
    Task,
    /// Draw `r` factors uniformly at random on every forward.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Selected factors are scaled by their renormalized router scores.
    Soft,
    /// Selected factors enter with weight exactly one.
    Hard,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(RoutingMode { Instance => "instance", Task => "task", Random => "random" });
text_enum!(GatingMode { Soft => "soft", Hard => "hard" });

/// Shape and behaviour of one adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixLoraConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Size `E` of the factor pool.
    pub num_factors: usize,
    /// Number `r` of factors used per instance.
    pub rank: usize,
    pub alpha: f64,
    pub routing: RoutingMode,
    pub gating: GatingMode,
    pub cfs: bool,
    pub init_std: f64,
    pub seed: u64,
    /// Rows of the task tables; only used under task routing.
    #[serde(default)]
    pub num_tasks: usize,
}

impl MixLoraConfig {
    /// Defaults: α = 2E, instance routing, soft gates, conditional router
    /// on, σ = 1/√d_in.
    pub fn new(d_in: usize, d_out: usize, num_factors: usize, rank: usize) -> Self {
        Self {
            d_in,
            d_out,
            num_factors,
            rank,
            alpha: 2.0 * num_factors as f64,
            routing: RoutingMode::Instance,
            gating: GatingMode::Soft,
            cfs: true,
            init_std: if d_in > 0 { 1.0 / (d_in as f64).sqrt() } else { 1.0 },
            seed: 0,
            num_tasks: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_routing(mut self, routing: RoutingMode) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_gating(mut self, gating: GatingMode) -> Self {
        self.gating = gating;
        self
    }

    pub fn with_cfs(mut self, cfs: bool) -> Self {
        self.cfs = cfs;
        self
    }

    pub fn with_init_std(mut self, std: f64) -> Self {
        self.init_std = std;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_num_tasks(mut self, n: usize) -> Self {
        self.num_tasks = n;
        self
    }

    /// Checks the invariants and returns the effective config (random
    /// routing forces hard gates).
    pub fn validated(&self) -> Result<Self> {
        let c = self;
        if c.d_in == 0 || c.d_out == 0 {
            return Err(Error::Config("d_in and d_out must be at least 1".into()));
        }
        if c.num_factors == 0 || c.rank == 0 {
            return Err(Error::Config("num_factors and rank must be at least 1".into()));
        }
        if c.rank > c.num_factors {
            return Err(Error::Config(format!(
                "rank {} exceeds the factor pool size {}",
                c.rank, c.num_factors
            )));
        }
        if !(c.alpha > 0.0 && c.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", c.alpha)));
        }
        if !(c.init_std > 0.0 && c.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be positive, got {}", c.init_std)));
        }
        if c.routing == RoutingMode::Task && c.num_tasks == 0 {
            return Err(Error::Config("task routing needs num_tasks >= 1".into()));
        }
        let mut out = c.clone();
        if out.routing == RoutingMode::Random {
            out.gating = GatingMode::Hard;
        }
        Ok(out)
    }
}
