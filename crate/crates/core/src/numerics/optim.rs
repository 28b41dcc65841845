use super::NumericsError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f32,
    pub decay: f32,
    pub epsilon: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// One RMSprop update of `param` in place:
///
/// ```text
/// acc   <- decay * acc + (1 - decay) * grad^2
/// param <- param - lr * grad / (sqrt(acc) + eps)
/// ```
pub fn rmsprop_step(
    param: &mut Tensor,
    grad: &Tensor,
    acc: &mut Tensor,
    config: &RmsPropConfig,
) -> Result<(), NumericsError> {
    if param.shape() != grad.shape() || param.shape() != acc.shape() {
        return Err(NumericsError::shape(
            "rmsprop_step",
            format!("param {:?}, grad {:?}, acc {:?}", param.shape(), grad.shape(), acc.shape()),
        ));
    }
    let RmsPropConfig { learning_rate, decay, epsilon } = *config;
    for ((p, &g), a) in param.data_mut().iter_mut().zip(grad.data()).zip(acc.data_mut()) {
        *a = decay * *a + (1.0 - decay) * g * g;
        *p -= learning_rate * g / (a.sqrt() + epsilon);
    }
    Ok(())
}

/// Per-parameter squared-gradient accumulators.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: RmsPropConfig,
    accumulators: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(config: RmsPropConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            accumulators: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    /// Applies one step to every parameter. `params` and `grads` must be in
    /// the same order the state was created with.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.accumulators.len() || grads.len() != self.accumulators.len() {
            return Err(NumericsError::shape(
                "OptimizerState::step",
                format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.accumulators.len()
                ),
            ));
        }
        for ((p, g), a) in params.into_iter().zip(grads).zip(&mut self.accumulators) {
            rmsprop_step(p, g, a, &self.config)?;
        }
        Ok(())
    }
}
