use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams};
use crate::contrastive::{predict, ClassBank};
use crate::data::{LongTailedDataset, Shot};
use crate::encoder::{ModelParams, PromptSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub many: usize,
    pub medium: usize,
    pub few: usize,
}

/// Top-1 accuracy overall, per shot split and per class. A split with no
/// classes reports `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<f64>,
    /// Evaluated instances per split.
    pub n_eval: SplitCounts,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], shots: &[Shot]) -> Result<Self> {
        if labels.len() != predictions.len() || labels.is_empty() {
            return Err(Error::dim("metrics", &[labels.len()], &[predictions.len()]));
        }
        let k = shots.len();
        let mut correct = vec![0usize; k];
        let mut total = vec![0usize; k];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= k {
                return Err(Error::Index {
                    what: "shot tags",
                    index: y,
                    len: k,
                });
            }
            total[y] += 1;
            correct[y] += usize::from(y == p);
        }
        let split = |tag: Shot| {
            let (c, t) = (0..k)
                .filter(|&j| shots[j] == tag)
                .fold((0, 0), |(c, t), j| (c + correct[j], t + total[j]));
            (if t == 0 { None } else { Some(c as f64 / t as f64) }, t)
        };
        let (many, n_many) = split(Shot::Many);
        let (medium, n_medium) = split(Shot::Medium);
        let (few, n_few) = split(Shot::Few);
        Ok(Metrics {
            overall: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
            many,
            medium,
            few,
            per_class: (0..k)
                .map(|j| if total[j] == 0 { 0.0 } else { correct[j] as f64 / total[j] as f64 })
                .collect(),
            n_eval: SplitCounts {
                many: n_many,
                medium: n_medium,
                few: n_few,
            },
        })
    }
}

/// Predicted class for every test row, by nearest text embedding over all
/// classes. The adapter, when given, is applied on the branches its
/// placement names.
pub fn predict_test(
    params: &ModelParams,
    adapter: Option<&AdapterParams>,
    dataset: &LongTailedDataset,
    tau: f64,
    prompt: PromptSpec,
) -> Result<Vec<usize>> {
    let dims = params.dims();
    if dims.num_classes != dataset.num_classes() || dims.input_dim != dataset.dim() {
        return Err(Error::dim(
            "evaluate",
            &[dims.num_classes, dims.input_dim],
            &[dataset.num_classes(), dataset.dim()],
        ));
    }
    if dataset.num_test() == 0 {
        return Err(Error::Contract("dataset has no test rows".into()));
    }
    let mut g = Graph::new();
    let mb = params.store().bind(&mut g, false);
    let ab = adapter.map(|a| (a, a.store().bind(&mut g, false)));
    let ab = ab.as_ref().map(|(a, b)| (*a, b));
    let classes: Vec<usize> = (0..dataset.num_classes()).collect();
    let u = adapter::text_embedding(&mut g, params, &mb, ab, &classes, prompt)?;
    let bank = ClassBank::new(g.value(u).clone(), classes)?;
    let test: Vec<usize> = dataset.test_indices().collect();
    let x = g.constant(dataset.rows(&test)?);
    let v = adapter::visual_embedding(&mut g, params, &mb, ab, x)?;
    let v = g.value(v);
    (0..v.rows()).map(|r| predict(v.row(r), &bank, tau)).collect()
}

pub fn evaluate(
    params: &ModelParams,
    adapter: Option<&AdapterParams>,
    dataset: &LongTailedDataset,
    tau: f64,
    prompt: PromptSpec,
) -> Result<Metrics> {
    let preds = predict_test(params, adapter, dataset, tau, prompt)?;
    let labels = &dataset.labels()[dataset.test_indices()];
    Metrics::from_predictions(labels, &preds, dataset.shots())
}
