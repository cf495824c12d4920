use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed set of named parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Allocates moments for exactly the given parameters.
    pub fn new(config: AdamConfig, store: &ParamStore<T>, names: &[String]) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in names {
            let shape = store.get(name)?.shape().to_vec();
            m.insert(name.clone(), Tensor::zeros(&shape));
            v.insert(name.clone(), Tensor::zeros(&shape));
        }
        Ok(Self { config, t: 0, m, v })
    }

    pub fn from_parts(
        config: AdamConfig,
        t: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        if m.keys().ne(v.keys()) {
            return Err(Error::Invalid("first and second moments cover different parameters".into()));
        }
        Ok(Self { config, t, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.m.iter().zip(self.v.values()).map(|((k, m), v)| (k.as_str(), m, v))
    }

    /// One update. Parameters tracked by the optimizer but missing from
    /// `grads` are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if let Some(name) = grads.keys().find(|k| !self.m.contains_key(*k)) {
            return Err(Error::Invalid(format!("gradient for `{name}`, which the optimizer does not track")));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::c(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).expect("moments share keys");
            let p = store.get_mut(name)?;
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let gd = g.map(Tensor::data);
            for i in 0..p.numel() {
                let gi = gd.map_or(T::zero(), |d| d[i]);
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data_mut()[i] -= step;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::c(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.declare("w", &[3], Init::Constant(1.0)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let names = vec!["w".to_string()];
        let mut opt = Adam::new(AdamConfig::default(), &s, &names).unwrap();
        let g = Tensor::new(&[3], vec![0.5, -2.0, 1e-3]).unwrap();
        opt.step(&mut s, &BTreeMap::from([("w".to_string(), g.clone())])).unwrap();
        for (&p, &gv) in s.get("w").unwrap().data().iter().zip(g.data()) {
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expect = 1.0 - 2e-4 * gv / (gv.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig::default(), &s, &["w".to_string()]).unwrap();
        opt.step(&mut s, &BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))])).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig::default(), &s, &["w".to_string()]).unwrap();
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(opt.step(&mut s, &bad).is_err());
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
