//! Extended-precision forward pass used as the finite-difference oracle.
//!
//! Evaluating the perturbed objective in 128-bit arithmetic and subtracting
//! before rounding leaves only the truncation error of the central
//! difference. In `f64` the router softmaxes and gate renormalization add a
//! few ulp of noise per evaluation, which divided by `2ε` is comparable to
//! the smallest gradient entries being checked.

use std::cell::RefCell;
use std::cmp::Ordering;

use astro_float::{BigFloat, Consts, RoundingMode};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixlora::{AdaptedLinear, GatingMode, LoraLinear, RoutingMode};

const P: usize = 128;
const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Clone)]
pub(crate) struct Hp(BigFloat);

impl Hp {
    fn of(x: f64) -> Self {
        Hp(BigFloat::from_f64(x, P))
    }

    fn add(&self, o: &Hp) -> Hp {
        Hp(self.0.add(&o.0, P, RM))
    }

    fn sub(&self, o: &Hp) -> Hp {
        Hp(self.0.sub(&o.0, P, RM))
    }

    fn mul(&self, o: &Hp) -> Hp {
        Hp(self.0.mul(&o.0, P, RM))
    }

    fn div(&self, o: &Hp) -> Hp {
        Hp(self.0.div(&o.0, P, RM))
    }

    fn cmp(&self, o: &Hp) -> Ordering {
        self.0.partial_cmp(&o.0).unwrap_or(Ordering::Equal)
    }

    fn to_f64(&self) -> Result<f64> {
        let s = self.0.to_string();
        s.parse()
            .map_err(|_| Error::Numeric(format!("extended-precision value {s} is not a finite number")))
    }
}

fn sum(xs: impl IntoIterator<Item = Hp>) -> Hp {
    xs.into_iter().fold(Hp::of(0.0), |a, x| a.add(&x))
}

fn dot(a: &[Hp], b: &[Hp]) -> Hp {
    sum(a.iter().zip(b).map(|(x, y)| x.mul(y)))
}

fn lift(m: &Matrix) -> Vec<Vec<Hp>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&x| Hp::of(x)).collect()).collect()
}

fn column(m: &[Vec<Hp>], c: usize) -> Vec<Hp> {
    m.iter().map(|row| row[c].clone()).collect()
}

fn mean_rows(m: &[Vec<Hp>]) -> Vec<Hp> {
    let n = Hp::of(m.len() as f64);
    (0..m[0].len()).map(|c| sum(column(m, c)).div(&n)).collect()
}

thread_local! {
    static CONSTS: RefCell<Option<Consts>> = const { RefCell::new(None) };
}

fn exp(x: &Hp) -> Result<Hp> {
    CONSTS.with(|c| {
        let mut c = c.borrow_mut();
        if c.is_none() {
            *c = Some(Consts::new().map_err(|e| Error::Numeric(format!("extended-precision constants: {e:?}")))?);
        }
        Ok(Hp(x.0.exp(P, RM, c.as_mut().expect("just set"))))
    })
}

fn softmax(v: &[Hp]) -> Result<Vec<Hp>> {
    let m = v.iter().max_by(|a, b| a.cmp(b)).expect("non-empty").clone();
    let ex = v.iter().map(|x| exp(&x.sub(&m))).collect::<Result<Vec<_>>>()?;
    let total = sum(ex.iter().cloned());
    Ok(ex.iter().map(|x| x.div(&total)).collect())
}

fn top_k(v: &[Hp], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].cmp(&v[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

fn renormalized(scores: &[Hp], indices: &[usize]) -> Vec<Hp> {
    let total = sum(indices.iter().map(|&i| scores[i].clone()));
    indices.iter().map(|&i| scores[i].div(&total)).collect()
}

/// `⟨h·(W + α·ΔW)ᵀ, U⟩` for a routed layer, with the selected indices.
pub(crate) fn routed_objective(
    layer: &AdaptedLinear,
    h: &Matrix,
    task_id: Option<usize>,
    upstream: &Matrix,
) -> Result<(Hp, Vec<usize>, Vec<usize>)> {
    let cfg = layer.config();
    let (e, r) = (cfg.num_factors, cfg.rank);
    let soft = cfg.gating == GatingMode::Soft;
    let hh = lift(h);
    let w = lift(layer.base_w());
    let base: Vec<Vec<Hp>> = hh.iter().map(|row| w.iter().map(|wr| dot(row, wr)).collect()).collect();
    let (pooled_a, pooled_b) = match cfg.routing {
        RoutingMode::Instance => (mean_rows(&hh), mean_rows(&base)),
        RoutingMode::Task => {
            let t = task_id.ok_or_else(|| Error::Argument("task routing requires a task id".into()))?;
            let (ta, tb) = layer.route_task(t)?;
            (ta.iter().map(|&x| Hp::of(x)).collect(), tb.iter().map(|&x| Hp::of(x)).collect())
        }
        RoutingMode::Random => return Err(Error::Argument("random routing has no gradient to check".into())),
    };

    let a_pool = lift(&layer.pool.a);
    let b_pool = lift(&layer.pool.b);
    let logits_a: Vec<Hp> = lift(&layer.routers.w_a).iter().map(|row| dot(row, &pooled_a)).collect();
    let p_a = softmax(&logits_a)?;
    let idx_a = top_k(&p_a, r);
    let gates_a = if soft { renormalized(&p_a, &idx_a) } else { vec![Hp::of(1.0); r] };
    let a_rows: Vec<Vec<Hp>> = idx_a
        .iter()
        .zip(&gates_a)
        .map(|(&k, g)| a_pool[k].iter().map(|x| x.mul(g)).collect())
        .collect();

    let logits_b: Vec<Hp> = lift(&layer.routers.w_b_ifs).iter().map(|row| dot(row, &pooled_b)).collect();
    let p_ifs = softmax(&logits_b)?;
    let fused = match &layer.routers.w_ab {
        Some(w_ab) => {
            let mut r_cfs = vec![Hp::of(0.0); e];
            for (i, wi) in w_ab.iter().enumerate() {
                let wi = lift(wi);
                let logits: Vec<Hp> = (0..e).map(|c| dot(&a_rows[i], &column(&wi, c))).collect();
                for (acc, p) in r_cfs.iter_mut().zip(softmax(&logits)?) {
                    *acc = acc.add(&p);
                }
            }
            let p_cfs = softmax(&r_cfs)?;
            p_ifs.iter().zip(&p_cfs).map(|(x, y)| x.add(y)).collect()
        }
        None => p_ifs,
    };
    let idx_b = top_k(&fused, r);
    let gates_b = if soft { renormalized(&fused, &idx_b) } else { vec![Hp::of(1.0); r] };

    let alpha = Hp::of(cfg.alpha);
    let u = lift(upstream);
    let mut total = Hp::of(0.0);
    for (s, row) in hh.iter().enumerate() {
        for o in 0..cfg.d_out {
            let mut adapt = Hp::of(0.0);
            for i in 0..r {
                let bo = b_pool[idx_b[i]][o].mul(&gates_b[i]);
                adapt = adapt.add(&bo.mul(&dot(row, &a_rows[i])));
            }
            total = total.add(&u[s][o].mul(&base[s][o].add(&alpha.mul(&adapt))));
        }
    }
    Ok((total, idx_a, idx_b))
}

/// `⟨h·(W + α·BA)ᵀ, U⟩` for plain LoRA.
pub(crate) fn lora_objective(layer: &LoraLinear, h: &Matrix, upstream: &Matrix) -> Hp {
    let hh = lift(h);
    let w = lift(layer.base_w());
    let (a, b) = (lift(&layer.a), lift(&layer.b));
    let alpha = Hp::of(layer.alpha());
    let u = lift(upstream);
    let mut total = Hp::of(0.0);
    for (s, row) in hh.iter().enumerate() {
        let ah: Vec<Hp> = a.iter().map(|ar| dot(ar, row)).collect();
        for (o, wo) in w.iter().enumerate() {
            let out = dot(row, wo).add(&alpha.mul(&dot(&b[o], &ah)));
            total = total.add(&u[s][o].mul(&out));
        }
    }
    total
}

/// Central differences of `f` around `theta`, each divided by the step
/// actually taken after rounding `θ ± ε` to `f64`.
pub(crate) fn central_diff<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Hp>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let (up, down) = (theta[i] + eps, theta[i] - eps);
        probe[i] = up;
        let plus = f(&probe)?;
        probe[i] = down;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        out.push(plus.sub(&minus).div(&Hp::of(up).sub(&Hp::of(down))).to_f64()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixlora::MixLoraConfig;
    use crate::rng::{gaussian_matrix, seeded};

    #[test]
    fn agrees_with_the_f64_forward() {
        let w = gaussian_matrix(&mut seeded(1), 2, 3, 1.0);
        let mut l = AdaptedLinear::init(MixLoraConfig::new(3, 2, 4, 2), w, &mut seeded(2)).unwrap();
        l.pool.b = gaussian_matrix(&mut seeded(3), 4, 2, 0.7);
        let h = gaussian_matrix(&mut seeded(4), 2, 3, 1.0);
        let u = gaussian_matrix(&mut seeded(5), 2, 2, 1.0);
        let (out, sel) = l.forward(&h, None).unwrap();
        let (f, ia, ib) = routed_objective(&l, &h, None, &u).unwrap();
        let plain: f64 = out.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum();
        assert!((f.to_f64().unwrap() - plain).abs() < 1e-13);
        assert_eq!((ia, ib), (sel.indices_a, sel.indices_b));
    }

    #[test]
    fn difference_of_a_cubic_is_exact_to_rounding() {
        let d = central_diff(|t| Ok(Hp::of(t[0]).mul(&Hp::of(t[0])).mul(&Hp::of(t[0]))), &[0.7], 1e-5).unwrap();
        // (x+ε)³ − (x−ε)³ = 2ε(3x² + ε²)
        assert!((d[0] - (3.0 * 0.49 + 1e-10)).abs() < 1e-15);
    }
}
