//! Deterministic seed splitting.
//!
//! Every random stream in a run is derived from one top-level seed:
//!
//! ```text
//! stream_seed = splitmix64(root ^ splitmix64(fnv1a(label) ^ index))
//! ```
//!
//! and the stream itself is a `ChaCha8Rng` seeded with that value. Labels
//! name the consumer and `index` distinguishes replicas:
//!
//! | label | index | draws |
//! |---|---|---|
//! | `tasks` | 0 | base weight, teacher deltas, input means |
//! | `init` | model (specialist task, else 0) | adapter initialization |
//! | `batch` | step | joint training batch |
//! | `specialist` | `task·steps + step` | specialist training batch |
//! | `route` | model | random routing during training |
//! | `eval` | task | held-out evaluation instances |
//! | `route-eval` | 0 | random routing during evaluation |
//! | `routing-sample` | task | instances for routing similarity and dumps |
//! | `route-similarity` | 0 | random routing for those instances |
//! | `interference-data` | `task·batches_per_task + b` | interference batches |
//! | `interference` | batch position | random routing for interference gradients |
//! | `gradcheck` | instance | gradient-check layers and inputs |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

pub type StreamRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(label) ^ index))
}

pub fn stream(root: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z
}

/// Matrix with i.i.d. `N(0, std²)` entries drawn in row-major order.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, "init", 0).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = stream(7, "init", 0).gen();
        let y: u64 = stream(7, "init", 1).gen();
        let z: u64 = stream(7, "tasks", 0).gen();
        let w: u64 = stream(8, "init", 0).gen();
        assert!(x != y && x != z && x != w);
    }
}
