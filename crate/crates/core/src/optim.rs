use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::Trainable;

/// `base_lr * (1 + cos(pi * step / total)) / 2`, clamped at zero.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64 / total).min(1.0);
    (base_lr * 0.5 * (1.0 + (PI * t).cos())).max(0.0)
}

/// Heavy-ball velocity buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v` for every named gradient.
///
/// All updates are computed before any parameter is written; a non-finite
/// result fails the whole step with [`Error::Divergence`] and leaves the
/// parameters untouched.
pub fn sgd_momentum_step(
    params: &mut impl Trainable,
    grads: &BTreeMap<String, Vec<f64>>,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    step: usize,
) -> Result<()> {
    let mut staged = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let param = params.tensor_mut(name)?;
        if param.len() != g.len() {
            return Err(Error::dim("sgd_momentum_step", param.shape(), &[g.len()]));
        }
        let v = match opt.velocity.get(name) {
            Some(v) if v.len() != g.len() => {
                return Err(Error::dim("sgd_momentum_step", &[v.len()], &[g.len()]))
            }
            Some(v) => v.iter().zip(g).map(|(v, g)| momentum * v + g).collect::<Vec<_>>(),
            None => g.clone(),
        };
        let updated: Vec<f64> = param.data().iter().zip(&v).map(|(p, v)| p - lr * v).collect();
        if updated.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        staged.push((name.clone(), v, updated));
    }
    for (name, v, updated) in staged {
        params.tensor_mut(&name)?.data_mut().copy_from_slice(&updated);
        opt.velocity.insert(name, v);
    }
    Ok(())
}
