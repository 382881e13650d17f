use super::{AutodiffError, Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// First and second moment estimates, one pair per parameter in the store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: Vec<Option<(Matrix, Matrix)>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable parameter. Gradients are
/// left in place; the caller zeroes them.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    config: AdamConfig,
) -> Result<(), AutodiffError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(AutodiffError::InvalidArgument(format!("learning rate {lr}")));
    }
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id);
        let (m, v) = state.moments[id.index()].get_or_insert_with(|| {
            let (r, c) = p.value.shape();
            (Matrix::zeros(r, c), Matrix::zeros(r, c))
        });
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        if !p.value.is_finite() {
            return Err(AutodiffError::NonFinite("adam_step"));
        }
    }
    Ok(())
}
