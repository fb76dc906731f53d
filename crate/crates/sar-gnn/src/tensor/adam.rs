use crate::error::{Error, Result};

use super::Param;

/// Per-parameter Adam moment buffers plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(params: &[Param], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update with bias correction over `params`, which must be the
/// same list (same order) the state was built from. Every parameter must
/// hold a gradient; gradients are zeroed after the update.
pub fn adam_step(params: &[Param], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "adam_step: state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if state.first_moment[i].len() != n {
            return Err(Error::Contract(format!(
                "adam_step: moment buffer {} has stale shape",
                i
            )));
        }
        if p.borrow().grad().is_none() {
            return Err(Error::Contract(format!(
                "adam_step: parameter {} has no gradient",
                i
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (i, p) in params.iter().enumerate() {
        let mut tensor = p.borrow_mut();
        let grad = tensor.grad().unwrap().to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = tensor.data_mut();
        for j in 0..grad.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(data: Vec<f64>) -> Param {
        let n = data.len();
        Param::new(Tensor::new(vec![n], data).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = param(vec![1.0, -2.0, 3.0]);
        p.borrow_mut().accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p), 0.1);
        adam_step(std::slice::from_ref(&p), &mut state).unwrap();
        assert_eq!(p.data_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With g = 1 the bias-corrected moments are m̂ = 1, v̂ = 1, so the
        // first update is lr / (1 + eps) ≈ lr.
        let p = param(vec![0.5]);
        p.borrow_mut().accumulate_grad(&[1.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p), 0.1);
        adam_step(std::slice::from_ref(&p), &mut state).unwrap();
        let moved = 0.5 - p.data_vec()[0];
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
        assert!(p.grad_vec().is_none(), "gradient should be cleared");
    }

    #[test]
    fn step_count_increments() {
        let p = param(vec![0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p), 0.01);
        for _ in 0..2 {
            p.borrow_mut().accumulate_grad(&[1.0]);
            adam_step(std::slice::from_ref(&p), &mut state).unwrap();
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let p = param(vec![0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p), 0.01);
        assert!(matches!(
            adam_step(std::slice::from_ref(&p), &mut state),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
