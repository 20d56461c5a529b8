//! Plain LoRA layer, `h̃ = W h + α·B A h`, used as the reference the routed
//! adapter must reduce to and as the joint/specialist baseline.

use rand::Rng;

use super::{combine, next_layer_id, ParamId};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::rng::gaussian_matrix;

#[derive(Debug)]
pub struct LoraLinear {
    base_w: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    alpha: f64,
    init_std: f64,
    id: u64,
    version: u64,
}

impl Clone for LoraLinear {
    fn clone(&self) -> Self {
        Self {
            base_w: self.base_w.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            alpha: self.alpha,
            init_std: self.init_std,
            id: next_layer_id(),
            version: 0,
        }
    }
}

impl PartialEq for LoraLinear {
    fn eq(&self, o: &Self) -> bool {
        self.base_w == o.base_w && self.a == o.a && self.b == o.b && self.alpha == o.alpha
    }
}

#[derive(Debug, Clone)]
pub struct LoraTrace {
    pub(crate) layer_id: u64,
    pub(crate) version: u64,
    pub input: Matrix,
    pub delta_w: Matrix,
    pub output: Matrix,
}

impl LoraLinear {
    /// `A ~ N(0, σ²)` drawn row-major from `rng`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(base_w: Matrix, rank: usize, alpha: f64, init_std: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let (d_out, d_in) = base_w.shape();
        let a = gaussian_matrix(rng, rank, d_in, init_std);
        let b = Matrix::zeros(d_out, rank);
        Ok(Self {
            base_w,
            a,
            b,
            alpha,
            init_std,
            id: next_layer_id(),
            version: 0,
        })
    }

    pub fn from_parts(base_w: Matrix, a: Matrix, b: Matrix, alpha: f64, init_std: f64) -> Result<Self> {
        let (d_out, d_in) = base_w.shape();
        if a.cols() != d_in || b.rows() != d_out || a.rows() != b.cols() || a.rows() == 0 {
            return Err(Error::Shape(format!(
                "inconsistent LoRA shapes: W {d_out}x{d_in}, A {}x{}, B {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            base_w,
            a,
            b,
            alpha,
            init_std,
            id: next_layer_id(),
            version: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
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

    pub fn params(&self) -> Vec<(ParamId, &Matrix)> {
        vec![(ParamId::LoraA, &self.a), (ParamId::LoraB, &self.b)]
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Matrix)> {
        self.version += 1;
        vec![(ParamId::LoraA, &mut self.a), (ParamId::LoraB, &mut self.b)]
    }

    pub fn delta_w(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("shapes checked at construction")
    }

    pub fn trace(&self, h: &Matrix) -> Result<LoraTrace> {
        let delta_w = self.delta_w();
        let base_out = matmul(h, &self.base_w.transpose())?;
        let adapt = matmul(h, &delta_w.transpose())?;
        let output = combine(&base_out, &adapt, self.alpha);
        Ok(LoraTrace {
            layer_id: self.id,
            version: self.version,
            input: h.clone(),
            delta_w,
            output,
        })
    }

    pub fn forward(&self, h: &Matrix) -> Result<Matrix> {
        Ok(self.trace(h)?.output)
    }
}
