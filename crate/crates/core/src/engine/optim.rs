use crate::error::{PatError, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
///
/// With `clip_norm` set, the raw gradients are first rescaled so their
/// global L2 norm is at most that value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

/// Global L2 norm over a list of tensors.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

impl Sgd {
    pub fn step(
        &self,
        lr: f64,
        params: &mut [Tensor<f32>],
        velocity: &mut [Tensor<f32>],
        grads: &[Tensor<f32>],
    ) -> Result<()> {
        if params.len() != velocity.len() || params.len() != grads.len() {
            return Err(PatError::State("optimizer slots out of sync with parameters".into()));
        }
        let norm = global_norm(grads);
        let clip = match self.clip_norm {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        let (lr, mu, wd) = (lr as f32, self.momentum as f32, self.weight_decay as f32);
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
            if p.dims() != g.dims() || p.dims() != v.dims() {
                return Err(PatError::Shape {
                    op: "sgd",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
            for ((x, m), &d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *m = mu * *m + clip * d + wd * *x;
                *x -= lr * *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let sgd = Sgd {
            momentum: 0.5,
            weight_decay: 0.0,
            clip_norm: None,
        };
        let mut p = vec![Tensor::new(vec![1], vec![1.0f32]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        let g = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        sgd.step(0.1, &mut p, &mut v, &g).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-7);
        sgd.step(0.1, &mut p, &mut v, &g).unwrap();
        // v = 0.5 * 2 + 2 = 3
        assert!((p[0].data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let sgd = Sgd {
            momentum: 0.0,
            weight_decay: 0.1,
            clip_norm: None,
        };
        let mut p = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd.step(1.0, &mut p, &mut v, &[Tensor::zeros(&[1])]).unwrap();
        assert!((p[0].data()[0] - 1.8).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let sgd = Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        };
        let mut p = vec![Tensor::zeros(&[2])];
        let mut v = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
        sgd.step(1.0, &mut p, &mut v, &g).unwrap();
        assert!((p[0].data()[0] + 0.6).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.8).abs() < 1e-6);
        // below the cap nothing changes
        let g = vec![Tensor::new(vec![2], vec![0.3f32, 0.4]).unwrap()];
        sgd.step(1.0, &mut p, &mut v, &g).unwrap();
        assert!((p[0].data()[0] + 0.9).abs() < 1e-6);
    }
}
