use std::collections::BTreeMap;

use super::store::ParameterStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Momentum SGD: `v = momentum * v + g; p -= lr * v`.
    Sgd { lr: f64, momentum: f64 },
    /// Adam with bias-corrected moments.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    /// Same optimizer with the step size replaced.
    pub fn with_learning_rate(&self, new_lr: f64) -> Self {
        let mut o = self.clone();
        match &mut o {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
        o
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub optimizer: Optimizer,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Hyperparams {
    pub fn new(optimizer: Optimizer) -> Self {
        Hyperparams {
            optimizer,
            clip_norm: None,
        }
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Applies one optimizer update in place. `grads` must carry exactly the
/// parameter names of `params`.
pub fn sgd_like_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    hp: &Hyperparams,
) -> Result<()> {
    if grads.len() != params.len() || params.names().any(|n| grads.get(n).is_none()) {
        let missing: Vec<&String> = params.names().filter(|n| grads.get(n).is_none()).collect();
        let extra: Vec<&String> = grads
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !params.contains(n))
            .collect();
        return Err(Error::usage(format!(
            "gradient keys do not match parameters (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    let scale = match hp.clip_norm {
        Some(max) => {
            let norm = global_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let step = state.step as f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name).expect("checked above");
        let p = params.get_mut(&name).expect("listed name");
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "sgd_like_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let n = p.numel();
        match hp.optimizer {
            Optimizer::Sgd { lr, momentum } => {
                let v = state.first.entry(name).or_insert_with(|| vec![0.0; n]);
                for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vv = momentum * *vv + gv * scale;
                    *pv -= lr * *vv;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                let v = state.second.entry(name).or_insert_with(|| vec![0.0; n]);
                let c1 = 1.0 - beta1.powf(step);
                let c2 = 1.0 - beta2.powf(step);
                for (((pv, gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let gs = gv * scale;
                    *mv = beta1 * *mv + (1.0 - beta1) * gs;
                    *vv = beta2 * *vv + (1.0 - beta2) * gs * gs;
                    *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                }
            }
        }
        if !p.is_finite() {
            return Err(Error::NonFinite { op: "sgd_like_step" });
        }
    }
    Ok(())
}

/// Zero gradient table matching `params`.
pub fn zero_gradients(params: &ParameterStore) -> Gradients {
    let mut g = Gradients::default();
    for (name, t) in params.iter() {
        g.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    g
}
