//! Training orchestration: optional warm start, Phase A contrastive
//! fine-tuning of the whole backbone, Phase B adapter training over a frozen
//! backbone, and the joint single-stage baseline.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSource, Mode, RunConfig};
use crate::contrastive::{l2v_node, v2l_node};
use crate::data::{LongTailedDataset, SamplerState, SamplerStrategy};
use crate::encoder::{freeze, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::graph::{Graph, NodeId};
use crate::optim::{cosine_lr, sgd_momentum_step, OptimizerState};
use crate::params::{Binding, ADAPTER_PREFIX};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const STREAM_INIT: u64 = 10;
const STREAM_SAMPLER_A: u64 = 11;
const STREAM_ADAPTER_INIT: u64 = 12;
const STREAM_SAMPLER_B: u64 = 13;
const STREAM_SAMPLER_WARM: u64 = 14;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warm,
    A,
    B,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warm => "warm",
            Phase::A => "a",
            Phase::B => "b",
            Phase::Joint => "joint",
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    /// Learning rate at the first step of the epoch for the phase's primary
    /// parameter group (the adapter in Phase B, the backbone otherwise).
    pub lr: f64,
    /// Global step index of the first step of the epoch within its phase.
    pub first_step: usize,
    pub steps: usize,
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }
}

pub fn steps_per_epoch(dataset: &LongTailedDataset, batch_size: usize) -> usize {
    dataset.num_train().div_ceil(batch_size).max(1)
}

pub fn init_model(config: &RunConfig, dataset: &LongTailedDataset) -> Result<ModelParams> {
    let dims = config.model.dims(dataset.dim(), dataset.num_classes());
    ModelParams::init(dims, &mut stream_rng(config.seed, STREAM_INIT))
}

pub fn init_adapter(config: &RunConfig, model: &ModelParams) -> Result<AdapterParams> {
    AdapterParams::init(
        model.dims().joint_dim,
        config.placement,
        config.lambda,
        &mut stream_rng(config.seed, STREAM_ADAPTER_INIT),
    )
}

struct LoopSpec {
    phase: Phase,
    epochs: usize,
    sampler: SamplerStrategy,
    sampler_stream: u64,
    /// `None` freezes the backbone.
    backbone_lr: Option<f64>,
    adapter_lr: f64,
}

fn forward_loss(
    g: &mut Graph,
    config: &RunConfig,
    model: &ModelParams,
    mb: &Binding,
    adapter: Option<(&AdapterParams, &Binding)>,
    x: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let v = adapter::visual_embedding(g, model, mb, adapter, x)?;
    let u = adapter::text_embedding(g, model, mb, adapter, labels, config.prompt())?;
    let loss = v2l_node(g, v, u, config.tau)?;
    if config.symmetric_loss {
        let back = l2v_node(g, v, u, config.tau)?;
        return g.add(loss, back);
    }
    Ok(loss)
}

fn run_loop(
    config: &RunConfig,
    train: &LongTailedDataset,
    eval_on: &LongTailedDataset,
    model: &mut ModelParams,
    mut adapter: Option<&mut AdapterParams>,
    spec: LoopSpec,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if spec.epochs == 0 {
        return Ok(log);
    }
    let per_epoch = steps_per_epoch(train, config.batch_size);
    let total = spec.epochs * per_epoch;
    let mut sampler = SamplerState::new(spec.sampler, stream_rng(config.seed, spec.sampler_stream));
    let mut opt_backbone = OptimizerState::new();
    let mut opt_adapter = OptimizerState::new();
    let prompt = config.prompt();
    let mut step = 0;
    for epoch in 1..=spec.epochs {
        let first_step = step;
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            sampler.set_progress(step as f64 / total as f64)?;
            let batch = sampler.draw_batch(train, config.batch_size)?;
            let (labels, rows): (Vec<usize>, Vec<usize>) = batch.into_iter().unzip();

            let mut g = Graph::new();
            let mb = model.store().bind(&mut g, spec.backbone_lr.is_some());
            let ab = adapter.as_deref().map(|a| (a, a.store().bind(&mut g, true)));
            let ab_ref = ab.as_ref().map(|(a, b)| (*a, b));
            let x = g.constant(train.rows(&rows)?);
            let loss = forward_loss(&mut g, config, model, &mb, ab_ref, x, &labels).map_err(|e| match e {
                // overflow upstream of a normalization: the loss is not finite
                Error::DegenerateEmbedding { norm, .. } if !norm.is_finite() => Error::Divergence {
                    step,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            let value = g.value(loss).item();
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            g.backward(loss)?;

            let (adapter_grads, backbone_grads): (BTreeMap<_, _>, BTreeMap<_, _>) = g
                .param_grads()
                .into_iter()
                .partition(|(name, _)| name.starts_with(ADAPTER_PREFIX));
            if let Some(base) = spec.backbone_lr {
                let lr = cosine_lr(step, total, base);
                sgd_momentum_step(model.store_mut(), &backbone_grads, &mut opt_backbone, lr, config.momentum, step)?;
            }
            if let Some(a) = adapter.as_deref_mut() {
                let lr = cosine_lr(step, total, spec.adapter_lr);
                sgd_momentum_step(a.store_mut(), &adapter_grads, &mut opt_adapter, lr, config.momentum, step)?;
            }
            step += 1;
        }
        let metrics = evaluate(model, adapter.as_deref(), eval_on, config.tau, prompt)?;
        let primary = match spec.backbone_lr {
            Some(base) if spec.phase != Phase::B => base,
            _ => spec.adapter_lr,
        };
        log.records.push(EpochRecord {
            epoch,
            phase: spec.phase,
            mean_loss: loss_sum / per_epoch as f64,
            lr: cosine_lr(first_step, total, primary),
            first_step,
            steps: per_epoch,
            overall: metrics.overall,
            many: metrics.many,
            medium: metrics.medium,
            few: metrics.few,
        });
    }
    Ok(log)
}

/// Initial backbone: random, or briefly trained on a balanced pool around the
/// synthetic class means when `warm_start` is configured.
pub fn warm_start(config: &RunConfig, dataset: &LongTailedDataset) -> Result<(ModelParams, TrainLog)> {
    let mut model = init_model(config, dataset)?;
    let Some(ws) = &config.warm_start else {
        return Ok((model, TrainLog::default()));
    };
    let DatasetSource::Synthetic(spec) = &config.dataset else {
        return Err(Error::Config("warm_start requires a synthetic dataset".into()));
    };
    let pool = spec.warm_pool(ws.per_class)?;
    let log = run_loop(
        config,
        &pool,
        dataset,
        &mut model,
        None,
        LoopSpec {
            phase: Phase::Warm,
            epochs: ws.epochs,
            sampler: SamplerStrategy::Instance,
            sampler_stream: STREAM_SAMPLER_WARM,
            backbone_lr: Some(ws.lr),
            adapter_lr: ws.lr,
        },
    )?;
    Ok((model, log))
}

/// Contrastive fine-tuning of every backbone parameter on the training split.
pub fn train_phase_a(
    config: &RunConfig,
    dataset: &LongTailedDataset,
    init: ModelParams,
) -> Result<(ModelParams, TrainLog)> {
    let mut model = init;
    let log = run_loop(
        config,
        dataset,
        dataset,
        &mut model,
        None,
        LoopSpec {
            phase: Phase::A,
            epochs: config.epochs_a,
            sampler: config.phase_a_sampler(),
            sampler_stream: STREAM_SAMPLER_A,
            backbone_lr: Some(config.lr_backbone),
            adapter_lr: config.lr_adapter,
        },
    )?;
    Ok((model, log))
}

/// Adapter training over a frozen backbone. Fails with
/// [`Error::FrozenViolation`] if the backbone digest changes.
pub fn train_phase_b(
    params: &ModelParams,
    config: &RunConfig,
    dataset: &LongTailedDataset,
) -> Result<(AdapterParams, TrainLog)> {
    let frozen = freeze(params);
    let mut working = params.clone();
    let mut adapter = init_adapter(config, params)?;
    let log = run_loop(
        config,
        dataset,
        dataset,
        &mut working,
        Some(&mut adapter),
        LoopSpec {
            phase: Phase::B,
            epochs: config.epochs_b,
            sampler: config.phase_b_sampler(),
            sampler_stream: STREAM_SAMPLER_B,
            backbone_lr: None,
            adapter_lr: config.lr_adapter,
        },
    )?;
    frozen.verify(&working)?;
    Ok((adapter, log))
}

/// Single stage of `epochs_a + epochs_b` epochs updating backbone and adapter
/// together on the Phase-A sampler.
pub fn train_joint(
    config: &RunConfig,
    dataset: &LongTailedDataset,
    init: ModelParams,
) -> Result<(ModelParams, AdapterParams, TrainLog)> {
    let mut model = init;
    let mut adapter = init_adapter(config, &model)?;
    let log = run_loop(
        config,
        dataset,
        dataset,
        &mut model,
        Some(&mut adapter),
        LoopSpec {
            phase: Phase::Joint,
            epochs: config.epochs_a + config.epochs_b,
            sampler: config.phase_a_sampler(),
            sampler_stream: STREAM_SAMPLER_A,
            backbone_lr: Some(config.lr_backbone),
            adapter_lr: config.lr_adapter,
        },
    )?;
    Ok((model, adapter, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub model: ModelParams,
    pub adapter: Option<AdapterParams>,
    pub log: TrainLog,
    pub metrics: Metrics,
    /// Metrics of the backbone alone after Phase A, in two-phase runs.
    pub phase_a_metrics: Option<Metrics>,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adapter: self.adapter.clone(),
        }
    }
}

/// Runs `config.mode` end to end on an already loaded dataset.
pub fn run_on(config: &RunConfig, dataset: &LongTailedDataset) -> Result<RunOutput> {
    config.validate()?;
    let (init, mut log) = warm_start(config, dataset)?;
    let prompt = config.prompt();
    let eval = |m: &ModelParams, a: Option<&AdapterParams>| evaluate(m, a, dataset, config.tau, prompt);
    match config.mode {
        Mode::ZeroShotBaseline => Ok(RunOutput {
            metrics: eval(&init, None)?,
            model: init,
            adapter: None,
            log,
            phase_a_metrics: None,
        }),
        Mode::PhaseAOnly => {
            let (model, a_log) = train_phase_a(config, dataset, init)?;
            log.extend(a_log);
            Ok(RunOutput {
                metrics: eval(&model, None)?,
                model,
                adapter: None,
                log,
                phase_a_metrics: None,
            })
        }
        Mode::TwoPhase => {
            let (model, a_log) = train_phase_a(config, dataset, init)?;
            log.extend(a_log);
            let phase_a_metrics = eval(&model, None)?;
            let (adapter, b_log) = train_phase_b(&model, config, dataset)?;
            log.extend(b_log);
            Ok(RunOutput {
                metrics: eval(&model, Some(&adapter))?,
                model,
                adapter: Some(adapter),
                log,
                phase_a_metrics: Some(phase_a_metrics),
            })
        }
        Mode::Joint => {
            let (model, adapter, j_log) = train_joint(config, dataset, init)?;
            log.extend(j_log);
            Ok(RunOutput {
                metrics: eval(&model, Some(&adapter))?,
                model,
                adapter: Some(adapter),
                log,
                phase_a_metrics: None,
            })
        }
    }
}

pub fn run(config: &RunConfig) -> Result<RunOutput> {
    run_on(config, &config.dataset.load()?)
}
