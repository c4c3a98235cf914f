//! Parameter initialization and binding of a [`ParamStore`] onto a graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{Gradients, Graph, ParamStore, Tensor, TensorError, Var};

/// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid init shape")
}

/// Graph handles for every parameter of a store.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Pushes every parameter onto `g`, as trainable leaves or as constants.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::Argument {
            op: "params",
            detail: format!("missing parameter `{name}`"),
        })
    }

    /// Moves the gradients of all bound parameters out of `grads`, keyed by name.
    /// Parameters that did not take part in the loss get a zero gradient.
    pub fn collect(&self, g: &Graph, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}
