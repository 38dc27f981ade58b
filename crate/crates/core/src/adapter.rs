//! Residual linear adapter: `lambda * relu(f W + b) + (1 - lambda) * f`.
//!
//! The adapter acts on the projected embedding before normalization and the
//! result is re-normalized, so matching stays a cosine rule and `lambda = 0`
//! reproduces the unadapted embedding bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelParams, PromptSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Visual,
    Language,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Visual, Placement::Language, Placement::Both];

    pub fn visual(self) -> bool {
        matches!(self, Placement::Visual | Placement::Both)
    }

    pub fn language(self) -> bool {
        matches!(self, Placement::Language | Placement::Both)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Visual => "visual",
            Placement::Language => "language",
            Placement::Both => "both",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Placement::Visual),
            "language" => Ok(Placement::Language),
            "both" => Ok(Placement::Both),
            other => Err(Error::Config(format!("unknown adapter placement `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Visual,
    Language,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Visual => "adapter/visual",
            Branch::Language => "adapter/text",
        }
    }

    pub fn weight_name(self) -> String {
        format!("{}/weight", self.prefix())
    }

    pub fn bias_name(self) -> String {
        format!("{}/bias", self.prefix())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    lambda: f64,
    placement: Placement,
    store: ParamStore,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("residual factor {lambda} outside [0, 1]")));
    }
    Ok(())
}

impl AdapterParams {
    /// Weights uniform in `±1/sqrt(width)`, bias zero, one adapter per branch
    /// named by `placement`.
    pub fn init(width: usize, placement: Placement, lambda: f64, rng: &mut impl Rng) -> Result<Self> {
        check_lambda(lambda)?;
        if width == 0 {
            return Err(Error::Config("adapter width must be >= 1".into()));
        }
        let bound = 1.0 / (width as f64).sqrt();
        let mut store = ParamStore::new();
        for branch in branches(placement) {
            let w = (0..width * width).map(|_| rng.random_range(-bound..=bound)).collect();
            store.insert(branch.weight_name(), Tensor::new(vec![width, width], w)?);
            store.insert(branch.bias_name(), Tensor::zeros(&[width])?);
        }
        Ok(AdapterParams {
            lambda,
            placement,
            store,
        })
    }

    /// Builds adapter params from explicit arrays; used by checkpoint loading
    /// and tests.
    pub fn from_parts(lambda: f64, placement: Placement, store: ParamStore) -> Result<Self> {
        check_lambda(lambda)?;
        let mut width = None;
        for branch in branches(placement) {
            let w = store.get(&branch.weight_name())?;
            let (r, c) = w.expect_matrix("adapter")?;
            let b = store.get(&branch.bias_name())?;
            if r != c || b.shape() != [c] || width.is_some_and(|x| x != c) {
                return Err(Error::dim("adapter", w.shape(), b.shape()));
            }
            width = Some(c);
        }
        if store.len() != 2 * branches(placement).len() {
            return Err(Error::Contract("unexpected arrays in adapter store".into()));
        }
        Ok(AdapterParams {
            lambda,
            placement,
            store,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn width(&self) -> usize {
        let branch = branches(self.placement)[0];
        self.store.get(&branch.bias_name()).map_or(0, Tensor::len)
    }

    fn applies_to(&self, branch: Branch) -> bool {
        match branch {
            Branch::Visual => self.placement.visual(),
            Branch::Language => self.placement.language(),
        }
    }

    /// Applies this adapter's `branch` on the graph.
    pub fn adapt_node(&self, g: &mut Graph, b: &Binding, branch: Branch, f: NodeId) -> Result<NodeId> {
        if !self.applies_to(branch) {
            return Err(Error::Config(format!(
                "adapter placement `{}` has no {branch:?} branch",
                self.placement
            )));
        }
        adapt_node(g, f, b.id(&branch.weight_name())?, b.id(&branch.bias_name())?, self.lambda)
    }
}

fn branches(placement: Placement) -> Vec<Branch> {
    let mut out = Vec::new();
    if placement.visual() {
        out.push(Branch::Visual);
    }
    if placement.language() {
        out.push(Branch::Language);
    }
    out
}

pub fn adapt_node(g: &mut Graph, f: NodeId, w: NodeId, b: NodeId, lambda: f64) -> Result<NodeId> {
    let width = g.value(f).cols();
    let w_shape = g.value(w).shape();
    if w_shape != [width, width] {
        return Err(Error::dim("adapt", g.value(f).shape(), w_shape));
    }
    let a = g.affine(f, w, b)?;
    let r = g.relu(a)?;
    let adapted = g.scale(r, lambda)?;
    let kept = g.scale(f, 1.0 - lambda)?;
    g.add(adapted, kept)
}

/// Value-level residual adapter on a batch of features.
pub fn adapt(f: &Tensor, w: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let mut g = Graph::new();
    let (f, w, b) = (g.constant(f.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let out = adapt_node(&mut g, f, w, b, lambda)?;
    Ok(g.value(out).clone())
}

/// Normalized visual embedding, routed through the adapter when one is given.
pub fn visual_embedding(
    g: &mut Graph,
    model: &ModelParams,
    mb: &Binding,
    adapter: Option<(&AdapterParams, &Binding)>,
    x: NodeId,
) -> Result<NodeId> {
    let mut f = model.visual_projected(g, mb, x)?;
    if let Some((a, ab)) = adapter.filter(|(a, _)| a.placement.visual()) {
        f = a.adapt_node(g, ab, Branch::Visual, f)?;
    }
    g.l2_normalize(f)
}

/// Normalized text embedding, routed through the adapter when one is given.
pub fn text_embedding(
    g: &mut Graph,
    model: &ModelParams,
    mb: &Binding,
    adapter: Option<(&AdapterParams, &Binding)>,
    class_ids: &[usize],
    prompt: PromptSpec,
) -> Result<NodeId> {
    let mut f = model.text_projected(g, mb, class_ids, prompt)?;
    if let Some((a, ab)) = adapter.filter(|(a, _)| a.placement.language()) {
        f = a.adapt_node(g, ab, Branch::Language, f)?;
    }
    g.l2_normalize(f)
}

pub fn adapted_visual(model: &ModelParams, adapter: &AdapterParams, x: &Tensor) -> Result<Tensor> {
    if !adapter.placement.visual() {
        return Err(Error::Config(format!(
            "adapter placement `{}` does not adapt the visual branch",
            adapter.placement
        )));
    }
    let mut g = Graph::new();
    let mb = model.store().bind(&mut g, false);
    let ab = adapter.store.bind(&mut g, false);
    let x = g.constant(x.clone());
    let v = visual_embedding(&mut g, model, &mb, Some((adapter, &ab)), x)?;
    Ok(g.value(v).clone())
}

pub fn adapted_text(
    model: &ModelParams,
    adapter: &AdapterParams,
    class_ids: &[usize],
    prompt: PromptSpec,
) -> Result<Tensor> {
    if !adapter.placement.language() {
        return Err(Error::Config(format!(
            "adapter placement `{}` does not adapt the language branch",
            adapter.placement
        )));
    }
    let mut g = Graph::new();
    let mb = model.store().bind(&mut g, false);
    let ab = adapter.store.bind(&mut g, false);
    let u = text_embedding(&mut g, model, &mb, Some((adapter, &ab)), class_ids, prompt)?;
    Ok(g.value(u).clone())
}
