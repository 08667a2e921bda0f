use alloc::vec::Vec;

use super::NetworkError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::ADAM
    }
}

/// Moment accumulators mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zeroed state for tensors with the given lengths.
    pub fn new(kind: OptimizerKind, learning_rate: f64, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| alloc::vec![0.0; n]).collect();
        OptimizerState { kind, learning_rate, step: 0, first_moment: zeros(), second_moment: zeros() }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NetworkError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NetworkError::ShapeMismatch("optimizer tensor count"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(NetworkError::ShapeMismatch("optimizer tensor length"));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g.iter()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    for i in 0..p.len() {
                        let d = g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let g = vec![0.3, -0.1, 9.0];
        for kind in [OptimizerKind::ADAM, OptimizerKind::Sgd] {
            let mut st = OptimizerState::new(kind, 0.0, &[3]);
            st.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = OptimizerState::new(OptimizerKind::ADAM, 5e-4, &[2]);
        for _ in 0..3 {
            st.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_by_hand() {
        // m1 = 0.1, v1 = 0.001; bias-corrected both are 1, so the step is
        // lr / (1 + eps).
        let lr = 5e-4;
        let mut p = vec![0.25];
        let mut st = OptimizerState::new(OptimizerKind::ADAM, lr, &[1]);
        st.step(&mut [p.as_mut_slice()], &[&[1.0]]).unwrap();
        let expected = 0.25 - lr / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 0.1, &[1]);
        st.step(&mut [p.as_mut_slice()], &[&[2.0]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::new(OptimizerKind::ADAM, 0.1, &[2]);
        assert!(st.step(&mut [p.as_mut_slice()], &[&[1.0]]).is_err());
        assert!(st.step(&mut [], &[]).is_err());
        assert_eq!(st.step, 0);
    }
}
