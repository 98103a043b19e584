use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
///
/// Parameters that receive no gradient in an update keep their moments
/// and their own bias-correction count untouched.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    param_steps: Vec<u64>,
}

impl<F: Real> AdamState<F> {
    pub fn new<'t>(config: AdamConfig, params: impl IntoIterator<Item = &'t Tensor<F>>) -> Self {
        let lens: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            config,
            step: 0,
            first: lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            param_steps: vec![0; lens.len()],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[F] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[F] {
        &self.second[i]
    }
}

/// One bias-corrected Adam update. `grads[i] == None` skips parameter `i`.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Option<Vec<F>>],
    state: &mut AdamState<F>,
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), grads.len()],
            &[state.first.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != state.first[i].len() {
            return Err(Error::shape("adam_step", p.shape(), &[state.first[i].len()]));
        }
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
        }
    }

    let c = state.config;
    let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
    let (lr, eps) = (F::lit(c.learning_rate), F::lit(c.epsilon));
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        state.param_steps[i] += 1;
        let t = state.param_steps[i] as i32;
        let bc1 = F::one() - F::lit(c.beta1.powi(t));
        let bc2 = F::one() - F::lit(c.beta2.powi(t));
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (F::one() - b1) * gj;
            *vj = b2 * *vj + (F::one() - b2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::scalar(0.5f64)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Some(vec![1.0])], &mut state).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let want = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn step_counter_advances() {
        let mut params = vec![Tensor::scalar(0.0f32)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Some(vec![0.3])], &mut state).unwrap();
        assert_eq!(state.step(), 1);
        adam_step(&mut params, &[Some(vec![0.3])], &mut state).unwrap();
        assert_eq!(state.step(), 2);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut params = vec![Tensor::scalar(1.0f64), Tensor::scalar(1.0)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Some(vec![1.0]), Some(vec![1.0])], &mut state).unwrap();
        let frozen = params[1].data()[0];
        adam_step(&mut params, &[Some(vec![1.0]), None], &mut state).unwrap();
        assert_eq!(params[1].data()[0], frozen);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::<f32>::zeros([2])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(adam_step(&mut params, &[Some(vec![1.0])], &mut state).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut params = vec![Tensor::new([values.len()], values.clone()).unwrap()];
            let mut state = AdamState::new(AdamConfig::default(), &params);
            adam_step(&mut params, &[Some(vec![0.0; values.len()])], &mut state).unwrap();
            prop_assert_eq!(params[0].data(), &values[..]);
        }
    }
}
