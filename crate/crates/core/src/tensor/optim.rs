use super::Tensor;
use crate::error::{Error, Result};

/// Step size, momentum and L2 weight decay for [`SgdMomentum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with Nesterov momentum and weight decay folded into the gradient:
///
/// ```text
/// d = g + wd·p
/// v = μ·v + d
/// p = p − lr·(d + μ·v)
/// ```
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub hyper: OptimizerState,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(hyper: OptimizerState, shapes: &[&[usize]]) -> Self {
        let velocity = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        SgdMomentum { hyper, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Updates every parameter in place from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let OptimizerState {
            lr,
            momentum,
            weight_decay,
        } = self.hyper;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + weight_decay * *pv;
                *vv = momentum * *vv + d;
                *pv -= lr * (d + momentum * *vv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_opt(lr: f64, momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum::new(
            OptimizerState {
                lr,
                momentum,
                weight_decay,
            },
            &[&[1]],
        )
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut opt = scalar_opt(0.1, 0.0, 0.0);
        let mut p = Tensor::scalar(2.0);
        opt.step(&mut [&mut p], &[&Tensor::scalar(3.0)]).unwrap();
        assert_eq!(p.item(), Some(2.0 - 0.1 * 3.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut opt = scalar_opt(0.1, 0.9, 0.0);
        let mut p = Tensor::scalar(-1.25);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.item(), Some(-1.25));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = scalar_opt(0.0, 0.9, 1e-4);
        let mut p = Tensor::scalar(0.3);
        opt.step(&mut [&mut p], &[&Tensor::scalar(7.0)]).unwrap();
        assert_eq!(p.item(), Some(0.3));
    }

    #[test]
    fn two_nesterov_steps_match_hand_unrolled() {
        // f(p) = p², g = 2p
        let (lr, mu, wd) = (0.1, 0.9, 1e-4);
        let p0: f64 = 1.0;
        let d1 = 2.0 * p0 + wd * p0;
        let v1 = d1;
        let p1 = p0 - lr * (d1 + mu * v1);
        let d2 = 2.0 * p1 + wd * p1;
        let v2 = mu * v1 + d2;
        let p2 = p1 - lr * (d2 + mu * v2);

        let mut opt = scalar_opt(lr, mu, wd);
        let mut p = Tensor::scalar(p0);
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * p.item().unwrap());
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!((p.item().unwrap() - p2).abs() < 1e-15);
        assert!((opt.velocity()[0].item().unwrap() - v2).abs() < 1e-15);
        assert!((p1 - 0.619981).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut opt = scalar_opt(0.1, 0.9, 0.0);
        let mut p = Tensor::zeros(&[2]);
        assert!(matches!(
            opt.step(&mut [&mut p], &[&Tensor::zeros(&[2])]),
            Err(Error::Shape(_))
        ));
    }
}
