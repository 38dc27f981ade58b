//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binding, ParamStore, Trainable};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            samples: Some(20),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero gradients from
/// reporting round-off as error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Runs `build` once with `params` bound as trainable leaves, backpropagates,
/// and compares against central differences.
pub fn grad_check<F>(build: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&build, params)?;
    compare_gradients(build, params, &analytic, opts)
}

pub fn analytic_gradients<F>(build: &F, params: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: Fn(&mut Graph, &Binding) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let binding = params.bind(&mut g, true);
    let loss = build(&mut g, &binding)?;
    g.backward(loss)?;
    Ok(g.param_grads())
}

/// Checks a supplied set of analytic gradients against central differences.
pub fn compare_gradients<F>(
    build: F,
    params: &ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Contract("grad_check needs eps > 0 and tol > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let binding = p.bind(&mut g, true);
        let loss = build(&mut g, &binding)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let len = tensor.len();
        let coords: Vec<usize> = match opts.samples {
            Some(k) if k < len => index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let grads = analytic
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let mut max_err: f64 = 0.0;
        for &c in &coords {
            let orig = tensor.data()[c];
            work.tensor_mut(name)?.data_mut()[c] = orig + opts.eps;
            let plus = eval(&work)?;
            work.tensor_mut(name)?.data_mut()[c] = orig - opts.eps;
            let minus = eval(&work)?;
            work.tensor_mut(name)?.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grads[c], numeric);
            max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
        }
        report.entries.push(ParamCheck {
            name: name.to_string(),
            checked: coords.len(),
            max_rel_error: max_err,
            passed: max_err < opts.tol,
        });
    }
    Ok(report)
}
