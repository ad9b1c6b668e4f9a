//! Parameter update rules with decoupled weight decay.
//!
//! Every rule first shrinks each parameter by `1 - lr * weight_decay` and
//! then applies its gradient step.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Moments are kept per parameter in the order the
/// parameters are passed to [`Optimizer::step`].
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam {
        hyper: AdamHyper,
        t: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                hyper: AdamHyper::default(),
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam { .. } => OptimizerKind::Adam,
            Optimizer::Sgd => OptimizerKind::Sgd,
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
        lr: f64,
        weight_decay: f64,
    ) {
        let decay = (1.0 - lr * weight_decay) as f32;
        match self {
            Optimizer::Sgd => {
                let lr = lr as f32;
                for p in params {
                    let grad = p.grad().map(<[f32]>::to_vec);
                    let data = p.data_mut();
                    data.iter_mut().for_each(|w| *w *= decay);
                    if let Some(g) = grad {
                        data.iter_mut().zip(&g).for_each(|(w, &gv)| *w -= lr * gv);
                    }
                }
            }
            Optimizer::Adam { hyper, t, m, v } => {
                *t += 1;
                let b1 = hyper.beta1 as f32;
                let b2 = hyper.beta2 as f32;
                let eps = hyper.eps as f32;
                let bc1 = (1.0 - hyper.beta1.powf(*t as f64)) as f32;
                let bc2 = (1.0 - hyper.beta2.powf(*t as f64)) as f32;
                let lr = lr as f32;
                for (i, p) in params.into_iter().enumerate() {
                    if m.len() <= i {
                        m.push(vec![0.0; p.numel()]);
                        v.push(vec![0.0; p.numel()]);
                    }
                    let grad = p.grad().map(<[f32]>::to_vec);
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    let data = p.data_mut();
                    for j in 0..data.len() {
                        let g = grad.as_ref().map_or(0.0, |g| g[j]);
                        mi[j] = b1 * mi[j] + (1.0 - b1) * g;
                        vi[j] = b2 * vi[j] + (1.0 - b2) * g * g;
                        let m_hat = mi[j] / bc1;
                        let v_hat = vi[j] / bc2;
                        data[j] = data[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor<f32>> {
        vec![
            Tensor::new([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap(),
            Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap(),
        ]
    }

    #[test]
    fn zero_gradient_only_decays() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut ps = params();
            for p in &mut ps {
                let zeros = vec![0.0; p.numel()];
                p.accumulate_grad(&zeros);
            }
            let before = ps.clone();
            let mut opt = Optimizer::new(kind);
            opt.step(ps.iter_mut(), 1e-3, 1e-4);
            let factor = (1.0 - 1e-3 * 1e-4) as f32;
            for (a, b) in ps.iter().zip(&before) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(*x, *y * factor, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut ps = params();
        for p in &mut ps {
            let g = vec![0.7; p.numel()];
            p.accumulate_grad(&g);
        }
        let before = ps.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(ps.iter_mut(), 0.0, 1e-4);
        for (a, b) in ps.iter().zip(&before) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn sgd_follows_the_gradient() {
        let mut ps = params();
        ps[0].accumulate_grad(&[1.0, 1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.step(ps.iter_mut().take(1), 0.1, 0.0);
        assert_eq!(ps[0].data(), &[0.9, -2.1, 0.4]);
    }

    #[test]
    fn first_adam_step_has_unit_magnitude() {
        let mut ps = params();
        ps[0].accumulate_grad(&[0.3, -5.0, 1e-3]);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(ps.iter_mut().take(1), 0.01, 0.0);
        let moved: Vec<f32> = ps[0]
            .data()
            .iter()
            .zip(params()[0].data())
            .map(|(a, b)| a - b)
            .collect();
        assert!((moved[0] + 0.01).abs() < 1e-6);
        assert!((moved[1] - 0.01).abs() < 1e-6);
        assert!((moved[2] + 0.01).abs() < 1e-4);
    }
}
