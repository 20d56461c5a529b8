//! Synthetic regression tasks with a controlled pairwise conflict.
//!
//! Every task shares one frozen base weight `W` and adds its own teacher
//! adjustment `Δ_t = U_t·Vᵀ`, where `V` (`d_in×k`) has orthonormal columns
//! shared by all tasks and the flattened `U_t` have unit norm and pairwise
//! inner product `c`. Since `V` is orthonormal, `⟨Δ_s, Δ_t⟩ = ⟨U_s, U_t⟩`, so
//! the deltas inherit the Gram matrix `(1 − c)·I + c·11ᵀ` exactly.
//!
//! That Gram matrix is positive semidefinite only for `c ≥ −1/(T − 1)`;
//! anything below is rejected as infeasible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::LossSpec;
use crate::interference::TaskBatch;
use crate::linalg::{dot, Matrix, Vector};
use crate::model::Instance;
use crate::rng::{self, gaussian, gaussian_matrix};

/// Shape of a generated task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_tasks: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Pairwise cosine between flattened teacher deltas.
    pub conflict_angle: f64,
    /// Rank `k` of every teacher delta.
    pub teacher_rank: usize,
    /// Frobenius norm of every teacher delta.
    pub delta_norm: f64,
    /// Norm of each task's input mean.
    pub input_shift: f64,
    pub noise_std: f64,
    pub seq_len: usize,
}

impl TaskSpec {
    pub fn new(num_tasks: usize, d_in: usize, d_out: usize, conflict_angle: f64) -> Self {
        Self {
            num_tasks,
            d_in,
            d_out,
            conflict_angle,
            teacher_rank: 2,
            delta_norm: 4.0,
            input_shift: 3.0,
            noise_std: 0.1,
            seq_len: 8,
        }
    }

    /// Most negative equal pairwise cosine `T` vectors can have.
    pub fn min_feasible_angle(num_tasks: usize) -> f64 {
        -1.0 / (num_tasks.max(2) - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.conflict_angle;
        let t = self.num_tasks;
        if t < 2 {
            return Err(Error::Construction(format!("need at least two tasks, got {t}")));
        }
        if self.d_in == 0 || self.d_out == 0 || self.seq_len == 0 || self.teacher_rank == 0 {
            return Err(Error::Construction("dimensions, sequence length and teacher rank must be positive".into()));
        }
        if self.teacher_rank > self.d_in {
            return Err(Error::Construction(format!(
                "teacher rank {} exceeds d_in {}",
                self.teacher_rank, self.d_in
            )));
        }
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::Construction(format!("conflict angle {c} is outside [-1, 1]")));
        }
        let min = Self::min_feasible_angle(t);
        if c < min - 1e-12 {
            return Err(Error::Construction(format!(
                "{t} vectors cannot share pairwise cosine {c}; the minimum is -1/(T-1) = {min}"
            )));
        }
        if t > self.d_out * self.teacher_rank && c < 1.0 {
            return Err(Error::Construction(format!(
                "{t} tasks need {t} independent directions but the delta space has only {}",
                self.d_out * self.teacher_rank
            )));
        }
        for (name, v) in [
            ("delta_norm", self.delta_norm),
            ("input_shift", self.input_shift),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Construction(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub id: usize,
    pub teacher_delta: Matrix,
    pub input_mean: Vector,
    pub noise_std: f64,
    pub loss: LossSpec,
}

/// Tasks plus the frozen base weight they share.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub spec: TaskSpec,
    pub base_w: Matrix,
    pub tasks: Vec<SyntheticTask>,
}

/// Orthonormalizes `vectors` in order; fails if they are not independent.
fn gram_schmidt(vectors: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..vectors.len() {
        for j in 0..i {
            let (head, tail) = vectors.split_at_mut(i);
            let p = dot(&tail[0], &head[j]);
            tail[0].iter_mut().zip(&head[j]).for_each(|(x, q)| *x -= p * q);
        }
        let n = dot(&vectors[i], &vectors[i]).sqrt();
        if n < 1e-10 {
            return Err(Error::Construction("random basis was rank deficient".into()));
        }
        vectors[i].iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Lower-triangular `L` with `L·Lᵀ = (1 − c)·I + c·11ᵀ`. Zero pivots (the
/// singular boundary cases) give zero columns.
fn equiangular_factor(t: usize, c: f64) -> Result<Matrix> {
    let g = |i: usize, j: usize| if i == j { 1.0 } else { c };
    let mut l = Matrix::zeros(t, t);
    for j in 0..t {
        let mut d = g(j, j);
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-9 {
            return Err(Error::Construction(format!("cosine {c} is infeasible for {t} tasks")));
        }
        let pivot = d.max(0.0).sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..t {
            let mut s = g(i, j);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = if pivot > 1e-7 { s / pivot } else { 0.0 };
        }
    }
    Ok(l)
}

/// Builds a suite whose teacher deltas have pairwise cosine
/// `spec.conflict_angle`; deterministic in `seed`.
pub fn gen_tasks(spec: &TaskSpec, seed: u64) -> Result<TaskSuite> {
    spec.validate()?;
    let (t, k) = (spec.num_tasks, spec.teacher_rank);
    let mut r = rng::stream(seed, "tasks", 0);
    let base_w = gaussian_matrix(&mut r, spec.d_out, spec.d_in, 1.0 / (spec.d_in as f64).sqrt());

    let mut v: Vec<Vec<f64>> = (0..k).map(|_| (0..spec.d_in).map(|_| gaussian(&mut r, 1.0)).collect()).collect();
    gram_schmidt(&mut v)?;

    let dim = spec.d_out * k;
    let basis_len = t.min(dim);
    let mut basis: Vec<Vec<f64>> =
        (0..basis_len).map(|_| (0..dim).map(|_| gaussian(&mut r, 1.0)).collect()).collect();
    gram_schmidt(&mut basis)?;
    let l = equiangular_factor(t, spec.conflict_angle)?;

    let mut tasks = Vec::with_capacity(t);
    for i in 0..t {
        let mut u = vec![0.0; dim];
        for (m, e) in basis.iter().enumerate() {
            let w = l[(i, m)];
            u.iter_mut().zip(e).for_each(|(x, b)| *x += w * b);
        }
        let n = dot(&u, &u).sqrt();
        let scale = spec.delta_norm / n;
        // Δ = U·Vᵀ with U laid out d_out×k
        let delta = Matrix::from_fn(spec.d_out, spec.d_in, |o, c| {
            (0..k).map(|q| u[o * k + q] * v[q][c]).sum::<f64>() * scale
        });
        let dir: Vec<f64> = (0..spec.d_in).map(|_| gaussian(&mut r, 1.0)).collect();
        let dn = dot(&dir, &dir).sqrt();
        let input_mean = Vector::from(dir.iter().map(|x| x * spec.input_shift / dn).collect::<Vec<_>>());
        tasks.push(SyntheticTask {
            id: i,
            teacher_delta: delta,
            input_mean,
            noise_std: spec.noise_std,
            loss: LossSpec::mse(),
        });
    }
    Ok(TaskSuite {
        spec: spec.clone(),
        base_w,
        tasks,
    })
}

pub fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    dot(a.as_slice(), b.as_slice()) / (a.frobenius_norm() * b.frobenius_norm())
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Loss of the teacher itself: the irreducible noise variance under MSE.
    pub fn noise_floor(&self) -> f64 {
        self.spec.noise_std * self.spec.noise_std
    }

    /// One instance: `x = μ_t + z`, `y = (W + Δ_t)·x + ε` row by row.
    pub fn sample<R: Rng + ?Sized>(&self, task: usize, rng: &mut R) -> Instance {
        let t = &self.tasks[task];
        let (seq, di, dout) = (self.spec.seq_len, self.spec.d_in, self.spec.d_out);
        let input = Matrix::from_fn(seq, di, |_, c| t.input_mean[c] + gaussian(rng, 1.0));
        let teacher = self.base_w.add(&t.teacher_delta).expect("same shape");
        let clean = crate::linalg::matmul(&input, &teacher.transpose()).expect("shapes agree");
        let target = Matrix::from_fn(seq, dout, |s, o| clean[(s, o)] + gaussian(rng, t.noise_std));
        Instance { input, target }
    }

    pub fn batch<R: Rng + ?Sized>(&self, task: usize, size: usize, rng: &mut R) -> TaskBatch {
        TaskBatch {
            task,
            instances: (0..size).map(|_| self.sample(task, rng)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: usize, c: f64) -> TaskSpec {
        TaskSpec::new(t, 16, 16, c)
    }

    fn pairwise(s: &TaskSuite) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..s.num_tasks() {
            for j in i + 1..s.num_tasks() {
                out.push(cosine(&s.tasks[i].teacher_delta, &s.tasks[j].teacher_delta));
            }
        }
        out
    }

    #[test]
    fn constructed_cosines_match_request() {
        for (t, c) in [(2, 0.0), (2, -1.0), (2, 1.0), (4, -1.0 / 3.0), (4, 0.3), (3, -0.5), (5, 0.9), (4, 1.0)] {
            let s = gen_tasks(&spec(t, c), 11).unwrap();
            for got in pairwise(&s) {
                assert!((got - c).abs() < 1e-6, "T={t} c={c}: got {got}");
            }
            for task in &s.tasks {
                assert!((task.teacher_delta.frobenius_norm() - 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_pair_by_inner_product() {
        let s = gen_tasks(&spec(2, 0.0), 3).unwrap();
        let ip = dot(s.tasks[0].teacher_delta.as_slice(), s.tasks[1].teacher_delta.as_slice());
        assert!(ip.abs() < 1e-9);
    }

    #[test]
    fn antiparallel_and_identical_deltas() {
        let s = gen_tasks(&spec(2, -1.0), 4).unwrap();
        let sum = s.tasks[0].teacher_delta.add(&s.tasks[1].teacher_delta).unwrap();
        assert!(sum.frobenius_norm() < 1e-9);
        let s = gen_tasks(&spec(3, 1.0), 4).unwrap();
        for t in 1..3 {
            assert!(s.tasks[t].teacher_delta.max_abs_diff(&s.tasks[0].teacher_delta) < 1e-12);
        }
    }

    #[test]
    fn teacher_deltas_have_requested_rank() {
        let s = gen_tasks(&spec(4, 0.2), 5).unwrap();
        for t in &s.tasks {
            // rows lie in the span of k = 2 orthonormal directions
            let d = &t.teacher_delta;
            let g = crate::linalg::matmul(d, &d.transpose()).unwrap();
            // a rank-2 Gram matrix has all 3×3 principal minors ~ 0
            let m = |a: usize, b: usize| g[(a, b)];
            let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
            assert!(det.abs() < 1e-9 * g.frobenius_norm().powi(3));
        }
    }

    #[test]
    fn infeasible_requests_are_construction_errors() {
        for s in [
            spec(4, -0.5),
            spec(3, -0.6),
            spec(1, 0.0),
            spec(2, 1.5),
            TaskSpec { teacher_rank: 17, ..spec(2, 0.0) },
            TaskSpec::new(5, 2, 1, 0.0),
        ] {
            assert!(matches!(gen_tasks(&s, 0), Err(Error::Construction(_))), "{s:?}");
        }
        assert!(gen_tasks(&spec(4, TaskSpec::min_feasible_angle(4)), 0).is_ok());
    }

    #[test]
    fn generation_and_sampling_are_deterministic() {
        let a = gen_tasks(&spec(3, 0.1), 9).unwrap();
        assert_eq!(a, gen_tasks(&spec(3, 0.1), 9).unwrap());
        assert_ne!(a, gen_tasks(&spec(3, 0.1), 10).unwrap());
        let x = a.sample(1, &mut rng::seeded(1));
        assert_eq!(x, a.sample(1, &mut rng::seeded(1)));
        assert_eq!(x.input.shape(), (8, 16));
        assert_eq!(x.target.shape(), (8, 16));
    }

    #[test]
    fn teacher_reaches_the_noise_floor() {
        let s = gen_tasks(&spec(2, 0.0), 2).unwrap();
        let mut r = rng::seeded(3);
        let mut total = 0.0;
        let n = 400;
        for _ in 0..n {
            let inst = s.sample(0, &mut r);
            let teacher = s.base_w.add(&s.tasks[0].teacher_delta).unwrap();
            let pred = crate::linalg::matmul(&inst.input, &teacher.transpose()).unwrap();
            total += LossSpec::mse().loss(&pred, &inst.target).unwrap();
        }
        let mean = total / n as f64;
        assert!((mean / s.noise_floor() - 1.0).abs() < 0.05, "{mean}");
    }
}
