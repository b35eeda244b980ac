use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One bias-corrected update. Missing gradients count as zero.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Option<Array2<f64>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else {
                // Moments still decay so the schedule matches a zero gradient.
                self.m[i] *= b1;
                self.v[i] *= b2;
                let (m, v) = (&self.m[i], &self.v[i]);
                Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    *p -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + wd * *p);
                });
                continue;
            };
            if g.dim() != p.dim() {
                return Err(Error::Shape(format!("gradient {:?} vs parameter {:?}", g.dim(), p.dim())));
            }
            Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p);
            });
        }
        Ok(())
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = array![[1.0, -2.0]];
        let before = p.clone();
        let mut opt = Adam::new(1e-2);
        for _ in 0..10 {
            opt.step(vec![&mut p], &[Some(Array2::zeros((1, 2)))]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut p = array![[0.0, 0.0]];
        let mut opt = Adam::new(1e-3);
        let g = array![[0.3, -7.0]];
        let mut prev = p.clone();
        for _ in 0..1000 {
            prev = p.clone();
            opt.step(vec![&mut p], &[Some(g.clone())]).unwrap();
        }
        let step = &p - &prev;
        assert!((step[[0, 0]] + 1e-3).abs() < 1e-8);
        assert!((step[[0, 1]] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn clipping_rescales() {
        let mut g = vec![Some(array![[3.0, 4.0]]), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[[0, 0]] - 0.6).abs() < 1e-15);
    }
}
