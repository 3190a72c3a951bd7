use crate::error::{Error, Result};
use crate::ndcore::{ParamStore, Scalar, Tensor};

/// Adam with decoupled weight decay, applied only to parameters registered
/// with `decay = true`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `grads[k]` is the gradient of the loss being minimized
    /// for the `k`-th parameter of `store`.
    pub fn step<S: Scalar>(&self, store: &mut ParamStore<S>, grads: &[Tensor<S>], state: &mut AdamState<S>) -> Result<()> {
        if grads.len() != store.len() || state.first.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                state.first.len(),
                store.len()
            )));
        }
        state.steps += 1;
        let t = state.steps as f64;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powf(t));
        let c2 = S::lit(1.0 - self.beta2.powf(t));
        let lr = S::lit(self.learning_rate);
        let eps = S::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { S::lit(self.learning_rate * self.weight_decay) } else { S::zero() };
            let g = &grads[k];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: g.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let m = state.first[k].data_mut();
            let v = state.second[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi = *pi - lr * update - decay * *pi;
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with the store's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub steps: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamState {
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}
