//! Dual encoder over feature vectors and class/template identifiers, projected
//! into a shared unit-norm embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binding, ParamDigest, ParamStore, Trainable, ADAPTER_PREFIX};
use crate::tensor::Tensor;

pub const CLASS_EMBEDDING: &str = "text/class_embedding";
pub const TEMPLATE_EMBEDDING: &str = "text/template_embedding";
pub const PROJ_VISUAL: &str = "proj/visual";
pub const PROJ_TEXT: &str = "proj/text";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width `m` of the input feature vectors.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// `d_v`
    pub visual_out: usize,
    /// `e`, width of class and template embeddings.
    pub embed_dim: usize,
    pub text_hidden: Vec<usize>,
    /// `d_l`
    pub text_out: usize,
    /// `d`, the shared embedding width.
    pub joint_dim: usize,
    pub num_classes: usize,
    pub num_templates: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input_dim,
            self.visual_out,
            self.embed_dim,
            self.text_out,
            self.joint_dim,
            self.num_classes,
            self.num_templates,
        ];
        if all.iter().chain(&self.hidden).chain(&self.text_hidden).any(|&d| d == 0) {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Selects the prompt template row added to every class embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    store: ParamStore,
}

fn layer_name(branch: &str, i: usize, part: &str) -> String {
    format!("{branch}/layer{i}/{part}")
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

fn insert_mlp(
    store: &mut ParamStore,
    branch: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let widths: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect();
    for (i, pair) in widths.windows(2).enumerate() {
        store.insert(layer_name(branch, i, "weight"), uniform_init(pair[0], pair[1], pair[0], rng)?);
        store.insert(layer_name(branch, i, "bias"), Tensor::zeros(&[pair[1]])?);
    }
    Ok(())
}

fn mlp_forward(g: &mut Graph, b: &Binding, branch: &str, layers: usize, mut h: NodeId) -> Result<NodeId> {
    for i in 0..layers {
        h = g.affine(h, b.id(&layer_name(branch, i, "weight"))?, b.id(&layer_name(branch, i, "bias"))?)?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

fn project(g: &mut Graph, b: &Binding, proj: &str, h: NodeId) -> Result<NodeId> {
    let width = g.value(b.id(proj)?).cols();
    let zero = g.constant(Tensor::zeros(&[width])?);
    g.affine(h, b.id(proj)?, zero)
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Embedding tables use
    /// `fan_in = 1`.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        insert_mlp(&mut store, "visual", dims.input_dim, &dims.hidden, dims.visual_out, rng)?;
        insert_mlp(&mut store, "text", dims.embed_dim, &dims.text_hidden, dims.text_out, rng)?;
        store.insert(CLASS_EMBEDDING, uniform_init(dims.num_classes, dims.embed_dim, 1, rng)?);
        store.insert(TEMPLATE_EMBEDDING, uniform_init(dims.num_templates, dims.embed_dim, 1, rng)?);
        store.insert(PROJ_VISUAL, uniform_init(dims.visual_out, dims.joint_dim, dims.visual_out, rng)?);
        store.insert(PROJ_TEXT, uniform_init(dims.text_out, dims.joint_dim, dims.text_out, rng)?);
        Ok(ModelParams { dims, store })
    }

    /// Rebuilds parameters from named arrays, inferring every dimension from
    /// the array shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let shape2 = |name: &str| -> Result<(usize, usize)> {
            let t = store.get(name)?;
            t.expect_matrix("from_store")
        };
        let chain = |branch: &str| -> Result<(usize, Vec<usize>, usize)> {
            let mut widths = Vec::new();
            let mut i = 0;
            while store.contains(&layer_name(branch, i, "weight")) {
                let (r, c) = shape2(&layer_name(branch, i, "weight"))?;
                if let Some(&prev) = widths.last() {
                    if prev != r {
                        return Err(Error::dim("from_store", &[prev], &[r, c]));
                    }
                } else {
                    widths.push(r);
                }
                let bias = store.get(&layer_name(branch, i, "bias"))?;
                if bias.shape() != [c] {
                    return Err(Error::dim("from_store", &[r, c], bias.shape()));
                }
                widths.push(c);
                i += 1;
            }
            if widths.len() < 2 {
                return Err(Error::UnknownParameter(layer_name(branch, 0, "weight")));
            }
            let input = widths[0];
            let output = *widths.last().unwrap();
            Ok((input, widths[1..widths.len() - 1].to_vec(), output))
        };
        let (input_dim, hidden, visual_out) = chain("visual")?;
        let (embed_dim, text_hidden, text_out) = chain("text")?;
        let (num_classes, e1) = shape2(CLASS_EMBEDDING)?;
        let (num_templates, e2) = shape2(TEMPLATE_EMBEDDING)?;
        let (pv_in, joint_dim) = shape2(PROJ_VISUAL)?;
        let (pl_in, pl_out) = shape2(PROJ_TEXT)?;
        if e1 != embed_dim || e2 != embed_dim {
            return Err(Error::dim("from_store", &[embed_dim], &[e1, e2]));
        }
        if pv_in != visual_out || pl_in != text_out || pl_out != joint_dim {
            return Err(Error::dim("from_store", &[pv_in, joint_dim], &[pl_in, pl_out]));
        }
        let dims = ModelDims {
            input_dim,
            hidden,
            visual_out,
            embed_dim,
            text_hidden,
            text_out,
            joint_dim,
            num_classes,
            num_templates,
        };
        let expected = 2 * (dims.hidden.len() + dims.text_hidden.len() + 2) + 4;
        if store.len() != expected || store.names().any(|n| n.starts_with(ADAPTER_PREFIX)) {
            return Err(Error::Contract(format!(
                "backbone store has {} arrays, expected {expected}",
                store.len()
            )));
        }
        if !store.all_finite() {
            return Err(Error::Contract("non-finite backbone parameter".into()));
        }
        Ok(ModelParams { dims, store })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn digest(&self) -> ParamDigest {
        self.store.digest()
    }

    fn check_prompt(&self, prompt: PromptSpec) -> Result<()> {
        if prompt.template_id >= self.dims.num_templates {
            return Err(Error::Index {
                what: "prompt templates",
                index: prompt.template_id,
                len: self.dims.num_templates,
            });
        }
        Ok(())
    }

    fn check_classes(&self, class_ids: &[usize]) -> Result<()> {
        if let Some(&bad) = class_ids.iter().find(|&&c| c >= self.dims.num_classes) {
            return Err(Error::Index {
                what: "class embedding table",
                index: bad,
                len: self.dims.num_classes,
            });
        }
        Ok(())
    }

    /// Visual MLP followed by the visual projection, before normalization.
    pub fn visual_projected(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let xv = g.value(x);
        let (_, m) = xv.expect_matrix("encode_visual")?;
        if m != self.dims.input_dim {
            return Err(Error::dim("encode_visual", xv.shape(), &[xv.rows(), self.dims.input_dim]));
        }
        let h = mlp_forward(g, b, "visual", self.dims.hidden.len() + 1, x)?;
        project(g, b, PROJ_VISUAL, h)
    }

    /// Class embedding plus template embedding, text MLP and text projection,
    /// before normalization.
    pub fn text_projected(
        &self,
        g: &mut Graph,
        b: &Binding,
        class_ids: &[usize],
        prompt: PromptSpec,
    ) -> Result<NodeId> {
        self.check_classes(class_ids)?;
        self.check_prompt(prompt)?;
        if class_ids.is_empty() {
            return Err(Error::Contract("encode_text needs at least one class".into()));
        }
        let cls = g.gather(b.id(CLASS_EMBEDDING)?, class_ids)?;
        let tpl = g.gather(b.id(TEMPLATE_EMBEDDING)?, &vec![prompt.template_id; class_ids.len()])?;
        let feat = g.add(cls, tpl)?;
        let h = mlp_forward(g, b, "text", self.dims.text_hidden.len() + 1, feat)?;
        project(g, b, PROJ_TEXT, h)
    }

    pub fn visual_embedding(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let f = self.visual_projected(g, b, x)?;
        g.l2_normalize(f)
    }

    pub fn text_embedding(
        &self,
        g: &mut Graph,
        b: &Binding,
        class_ids: &[usize],
        prompt: PromptSpec,
    ) -> Result<NodeId> {
        let f = self.text_projected(g, b, class_ids, prompt)?;
        g.l2_normalize(f)
    }
}

/// Unit-norm visual embeddings of the rows of `x`.
pub fn encode_visual(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let x = g.constant(x.clone());
    let v = params.visual_embedding(&mut g, &b, x)?;
    Ok(g.value(v).clone())
}

/// Unit-norm text embeddings, one row per class id.
pub fn encode_text(params: &ModelParams, class_ids: &[usize], prompt: PromptSpec) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let u = params.text_embedding(&mut g, &b, class_ids, prompt)?;
    Ok(g.value(u).clone())
}

/// Read-only view over backbone parameters; every write is refused.
#[derive(Debug)]
pub struct FrozenView<'a> {
    params: &'a ModelParams,
    digest: ParamDigest,
}

pub fn freeze(params: &ModelParams) -> FrozenView<'_> {
    FrozenView {
        digest: params.digest(),
        params,
    }
}

impl FrozenView<'_> {
    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Digest recorded at freeze time.
    pub fn digest(&self) -> &ParamDigest {
        &self.digest
    }

    /// Fails if the underlying parameters no longer match the recorded digest.
    pub fn verify(&self, current: &ModelParams) -> Result<()> {
        let now = current.digest();
        if now != self.digest {
            return Err(Error::FrozenViolation {
                before: self.digest.0.clone(),
                after: now.0,
            });
        }
        Ok(())
    }
}

impl Trainable for FrozenView<'_> {
    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Err(Error::FrozenParameter(name.to_string()))
    }
}
