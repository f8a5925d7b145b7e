use super::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` using the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::dim(format!(
                    "adam: parameter {i} has {} elements, gradient {}",
                    p.numel(),
                    g.len()
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::dim("adam: parameter set changed between steps"));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut p = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p], &[&[3.0, -0.5, 1e-3]]).unwrap();
        for (w, sign) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 0.01).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // Scalar reference: w ← w − lr·m̂/(√v̂+ε) on f(w) = (w − 3)².
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..100 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.step(&mut [&mut p], &[&[g]]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.1, "{}", p.data()[0]);
    }

    #[test]
    fn clipping_caps_joint_norm_only_when_exceeded() {
        let mut g = vec![vec![3.0], vec![4.0, 0.0]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0, 0.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::zeros(vec![2]);
        let mut opt = Adam::new(0.1);
        assert!(matches!(opt.step(&mut [&mut p], &[&[0.0]]), Err(Error::Dimension(_))));
    }
}
