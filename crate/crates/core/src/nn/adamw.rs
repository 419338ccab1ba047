//! AdamW: Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::layers::NamedParams;
use super::tensor::{lit, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// Optimizer state. Moments are created lazily on the first update of each
/// parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `params` that has a gradient.
    /// Parameters missing from `grads` are treated as having zero gradient
    /// (they still decay). Nothing is modified if any gradient is non-finite.
    pub fn step<P: NamedParams<T> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &Gradients<T>,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let mut named = params.named_mut();
        for (name, p) in named.iter() {
            if let Ok(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            if let Some(m) = self.moments.get(name) {
                if m.first.shape() != p.shape() {
                    return Err(Error::shape(format!("moment shape mismatch for {name}")));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let b1: T = lit(c.beta1);
        let b2: T = lit(c.beta2);
        let one = T::one();
        let bc1: T = lit(1.0 - c.beta1.powf(self.step as f64));
        let bc2: T = lit(1.0 - c.beta2.powf(self.step as f64));
        let lr: T = lit(c.lr);
        let eps: T = lit(c.eps);
        let decay: T = lit(1.0 - c.lr * c.weight_decay);

        for (name, p) in named.iter_mut() {
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.shape()),
                second: Tensor::zeros(p.shape()),
            });
            let g = grads.get(name).ok();
            let pd = p.data_mut();
            let (m1, m2) = (m.first.data_mut(), m.second.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m1[i] = b1 * m1[i] + (one - b1) * gi;
                m2[i] = b2 * m2[i] + (one - b2) * gi * gi;
                let m_hat = m1[i] / bc1;
                let v_hat = m2[i] / bc2;
                pd[i] *= decay;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    struct One(Tensor<f64>);

    impl NamedParams<f64> for One {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("p".into(), &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("p".into(), &mut self.0)]
        }
    }

    /// Gradients of `sum(c ⊙ p)`, i.e. exactly `c`.
    fn grads_of(p: &Tensor<f64>, c: f64) -> Gradients<f64> {
        let mut g = Graph::new();
        let v = g.param("p", p);
        let scaled = g.scale(v, c);
        let l = g.sum_all(scaled);
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = One(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.0.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            let g = grads_of(&p.0, 0.0);
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.0, before);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut p = One(Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let g = grads_of(&p.0, 1.0);
        opt.step(&mut p, &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.0.data()[0] - expect).abs() < 1e-15);
        assert!((p.0.data()[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = One(Tensor::scalar(2.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        });
        let mut expect = 2.0;
        for _ in 0..3 {
            let g = grads_of(&p.0, 0.0);
            opt.step(&mut p, &g).unwrap();
            expect *= 1.0 - 1e-3 * 0.01;
        }
        assert!((p.0.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = One(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let before = p.0.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let g = grads_of(&p.0, 3.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.0, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = One(Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = grads_of(&p.0, f64::NAN);
        match opt.step(&mut p, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.0.data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }
}
