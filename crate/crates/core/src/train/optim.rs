use crate::tensor::Matrix;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix<f64>>,
    v: Vec<Matrix<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params[i]` for every `i` listed in `active`; `grads` is
    /// parallel to `active`.
    pub fn update(&mut self, params: &mut [Matrix<f64>], active: &[usize], grads: &[Matrix<f64>], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (&i, g) in active.iter().zip(grads) {
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = params[i].as_mut_slice();
            for k in 0..p.len() {
                let gk = g.as_slice()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= lr * (m[k] / b1t) / ((v[k] / b2t).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear warmup, then ×0.3 at 25%, 50% and 75% of `total`.
pub fn step_decay_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let drops = [0.25, 0.5, 0.75]
        .iter()
        .filter(|&&f| step as f64 >= f * total as f64)
        .count();
    base * 0.3f64.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()];
        let g = vec![Matrix::from_vec(1, 2, vec![0.5, -3.0]).unwrap()];
        let mut opt = Adam::new(&[(1, 2)]);
        opt.update(&mut p, &[0], &g, 0.1);
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p[0].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![5.0]).unwrap()];
        let mut opt = Adam::new(&[(1, 1)]);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.5))];
            opt.update(&mut p, &[0], &g, 0.05);
        }
        assert!((p[0].get(0, 0) - 1.5).abs() < 1e-2);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(step_decay_lr(1.0, 0, 100, 4), 0.25);
        assert_eq!(step_decay_lr(1.0, 10, 100, 4), 1.0);
        assert!((step_decay_lr(1.0, 60, 100, 4) - 0.09).abs() < 1e-12);
        assert!((step_decay_lr(1.0, 99, 100, 4) - 0.027).abs() < 1e-12);
    }
}
