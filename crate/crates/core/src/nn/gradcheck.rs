//! Reverse-mode gradients versus central finite differences.
//!
//! Non-scalar outputs are reduced to a scalar by a fixed random projection
//! `<out, r>`, so every output coordinate contributes to the check.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ctx, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is essentially zero are judged on absolute agreement.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const RETRY_ABOVE: f64 = 1e-6;
pub const RETRY_STEP_DIVISOR: f64 = 10.0;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates re-measured at the smaller step (see [`check_params`]).
    pub retried: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, worst: String::new(), worst_index: 0, checked: 0, retried: 0 }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = name.to_string();
            self.worst_index = index;
        }
    }

    /// Errors with the offending tensor name when the tolerance is exceeded.
    pub fn ensure(&self, tol: f64) -> Result<()> {
        if self.max_rel_err.is_finite() && self.max_rel_err < tol {
            Ok(())
        } else {
            Err(Error::GradCheck { name: self.worst.clone(), rel_err: self.max_rel_err })
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks gradients with respect to leaf inputs of `f`. Every coordinate of
/// every input is perturbed.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs, true)?;
    let r = projection(g.value(out).shape(), seed);
    let grads = g.backward_with(out, r.clone())?;
    let mut report = GradCheckReport::new();
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let name = format!("input{i}");
        for j in 0..inputs[i].numel() {
            let analytic = grads.get(v).map_or(0.0, |t| t.data()[j]);
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + eps;
            let (gp, _, op) = eval(&values, false)?;
            let lp = gp.value(op).dot(&r);
            values[i].data_mut()[j] = orig - eps;
            let (gm, _, om) = eval(&values, false)?;
            let lm = gm.value(om).dot(&r);
            values[i].data_mut()[j] = orig;
            report.record(&name, j, analytic, (lp - lm) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to the trainable parameters of `store`,
/// sampling up to `per_param` coordinates from each tensor.
///
/// A network loss is only piecewise smooth (PReLU), and a stencil of width
/// `2 * eps` can straddle a kink even where the gradient is well defined.
/// Coordinates whose error exceeds [`RETRY_ABOVE`] are measured again with
/// step `eps / RETRY_STEP_DIVISOR` and scored by the better of the two.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    per_param: usize,
    eps: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let (analytic, r) = {
        let mut ctx = Ctx::new(store, true);
        let out = f(&mut ctx)?;
        let r = projection(ctx.value(out).shape(), seed);
        let grads = ctx.g.backward_with(out, r.clone())?;
        (ctx.param_grads(&grads), r)
    };
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(s, false);
        let out = f(&mut ctx)?;
        Ok(ctx.value(out).dot(&r))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    for name in store.trainable_names() {
        let n = store.get(&name)?.numel();
        for j in coords(n, per_param, &mut rng) {
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[j]);
            let orig = store.get(&name)?.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                work.get_mut(&name)?.data_mut()[j] = orig + h;
                let lp = loss(&work)?;
                work.get_mut(&name)?.data_mut()[j] = orig - h;
                let lm = loss(&work)?;
                work.get_mut(&name)?.data_mut()[j] = orig;
                Ok((lp - lm) / (2.0 * h))
            };
            let mut numeric = central(eps)?;
            if rel_err(a, numeric) > RETRY_ABOVE {
                let fine = central(eps / RETRY_STEP_DIVISOR)?;
                if rel_err(a, fine) < rel_err(a, numeric) {
                    numeric = fine;
                }
                report.retried += 1;
            }
            report.record(&name, j, a, numeric);
        }
    }
    Ok(report)
}
