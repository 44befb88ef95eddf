use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Learning rate at `step`: linear warmup from 0 to `peak_lr`, then
/// half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter; the parameter list must keep the same
    /// order and shapes across calls.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(
                "parameter list changed between optimizer steps".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 10, 0.5), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, 0.5), 0.5);
        assert!(cosine_lr(100, 100, 10, 0.5).abs() < 1e-12);
        assert!((cosine_lr(55, 100, 10, 0.5) - 0.25).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 10, 0, 1.0), 1.0);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let lrs: Vec<f64> = (10..=100).map(|s| cosine_lr(s, 100, 10, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)², minimum at 3.
        let mut w = Matrix::row_vector(&[-2.0]);
        let mut opt = AdamW::new(0.0);
        let total = 4000;
        for s in 0..total {
            let g = Matrix::row_vector(&[2.0 * (w.get(0, 0) - 3.0)]);
            opt.step(vec![&mut w], &[g], cosine_lr(s, total, 0, 0.1))
                .unwrap();
        }
        assert!((w.get(0, 0) - 3.0).abs() < 1e-6, "{}", w.get(0, 0));
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut w = Matrix::row_vector(&[1.0]);
        let mut opt = AdamW::new(0.1);
        opt.step(vec![&mut w], &[Matrix::zeros(1, 1)], 0.5).unwrap();
        assert!((w.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lists_error() {
        let mut w = Matrix::zeros(1, 1);
        assert!(AdamW::new(0.0).step(vec![&mut w], &[], 0.1).is_err());
    }
}
