use std::collections::BTreeMap;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Optimizer with state kept per parameter slot. A slot that is not
/// passed to [`Optimizer::update`] is not touched, not even by momentum.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: BTreeMap<usize, Moments>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Updates the parameter in `slot` from its gradient.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for slot {slot}");
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, d) in param.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * d;
                }
            }
            OptimizerKind::Adam => {
                let st = self.state.entry(slot).or_insert_with(|| Moments {
                    m: Tensor::zeros(grad.rows(), grad.cols()),
                    v: Tensor::zeros(grad.rows(), grad.cols()),
                    t: 0,
                });
                st.t += 1;
                let bc1 = 1.0 - BETA1.powi(st.t);
                let bc2 = 1.0 - BETA2.powi(st.t);
                let m = st.m.data_mut();
                let v = st.v.data_mut();
                for (j, (w, &d)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * d;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * d * d;
                    *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::frobenius_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::row_vector(&[1.0, 2.0]);
        let g = Tensor::row_vector(&[0.5, -1.0]);
        Optimizer::new(OptimizerKind::Sgd).update(0, &mut p, &g, 0.1);
        assert_eq!(p, Tensor::row_vector(&[0.95, 2.1]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::row_vector(&[1.0, 2.0]);
        let g = Tensor::row_vector(&[0.5, -3.0]);
        Optimizer::new(OptimizerKind::Adam).update(0, &mut p, &g, 0.01);
        assert!((p.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((p.get(0, 1) - 2.01).abs() < 1e-9);
    }

    #[test]
    fn skipped_slot_keeps_its_momentum_to_itself() {
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let mut a = Tensor::row_vector(&[1.0]);
        let mut b = Tensor::row_vector(&[1.0]);
        opt.update(0, &mut a, &Tensor::row_vector(&[1.0]), 0.1);
        opt.update(1, &mut b, &Tensor::row_vector(&[1.0]), 0.1);
        let frozen = a.clone();
        opt.update(1, &mut b, &Tensor::row_vector(&[1.0]), 0.1);
        assert_eq!(a, frozen);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::row_vector(&[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].frobenius_norm_sq() - 1.0).abs() < 1e-12);
    }
}
