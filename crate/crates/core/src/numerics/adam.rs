use crate::error::{check_dim, Error, Result};
use crate::numerics::mlp::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &ParamVector) -> Self {
        Self::new(params.len())
    }

    /// In-place bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
        check_dim("adam parameters", self.first_moment.len(), params.len())?;
        check_dim("adam gradients", params.len(), grads.len())?;
        if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient component {i} = {}",
                grads.values[i]
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Value-returning form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grads: &ParamVector,
    lr: f64,
) -> Result<(ParamVector, AdamState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grads, lr)?;
    Ok((params, state))
}
