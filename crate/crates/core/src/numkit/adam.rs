use super::{Matrix, NumError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter adaptive-moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update, in place.
    pub fn update(&mut self, params: &mut Matrix, grads: &Matrix, lr: f64) -> Result<(), NumError> {
        assert!(lr > 0.0, "learning rate must be positive");
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                lhs: params.shape(),
                rhs: grads.shape(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.data()[i];
            let m = ADAM_BETA1 * self.m.data()[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            params.data_mut()[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::new(1, 2);
        st.update(&mut p, &Matrix::zeros(1, 2), 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        // With bias correction, step 1 moves each entry by ~lr*sign(g).
        let mut p = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let g = Matrix::from_rows(&[vec![0.3, -2.0]]);
        let mut st = AdamState::new(1, 2);
        st.update(&mut p, &g, 0.01).unwrap();
        assert!((p.at(0, 0) + 0.01).abs() < 1e-6);
        assert!((p.at(0, 1) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = Matrix::from_rows(&[vec![0.5, -0.5]]);
            let mut st = AdamState::new(1, 2);
            for k in 0..50 {
                let g = p.map(|x| x * (k as f64 % 3.0 - 1.0));
                st.update(&mut p, &g, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::new(2, 2);
        assert!(st.update(&mut p, &Matrix::zeros(1, 2), 0.01).is_err());
    }
}
