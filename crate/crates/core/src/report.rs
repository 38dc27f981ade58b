//! Experiment reporting: residual-factor sweeps, ablation grids and
//! multi-seed summaries, emitted as JSON lines or an aligned text table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::data::{LongTailedDataset, SamplerStrategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::train::{run_on, train_phase_a, train_phase_b, warm_start};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// `None` when Phase B stopped on a numerical failure; see `failure`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.metrics.is_some()
    }
}

/// Failures that belong to one residual factor rather than to the whole
/// sweep: at large `lambda` the ReLU branch can die for a row, leaving
/// nothing to normalize.
fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::DegenerateEmbedding { .. } | Error::Divergence { .. })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// The shared Phase-A backbone evaluated without an adapter.
    pub phase_a: Metrics,
    pub rows: Vec<SweepRow>,
}

/// Trains Phase A once, then Phase B once per `lambda` from the same backbone
/// and the same Phase-B seed. A Phase B that degenerates or diverges is
/// recorded on its row and the sweep moves on; any other error aborts.
pub fn sweep_lambda(config: &RunConfig, lambdas: &[f64]) -> Result<SweepReport> {
    sweep_lambda_on(config, &config.dataset.load()?, lambdas)
}

pub fn sweep_lambda_on(config: &RunConfig, dataset: &LongTailedDataset, lambdas: &[f64]) -> Result<SweepReport> {
    if config.mode != Mode::TwoPhase {
        return Err(Error::Config(format!("lambda sweep needs mode two_phase, got {}", config.mode)));
    }
    config.validate()?;
    let (init, _) = warm_start(config, dataset)?;
    let (model, _) = train_phase_a(config, dataset, init)?;
    let phase_a = evaluate(&model, None, dataset, config.tau, config.prompt())?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = RunConfig {
            lambda,
            ..config.clone()
        };
        cfg.validate()?;
        let outcome = train_phase_b(&model, &cfg, dataset)
            .and_then(|(adapter, _)| evaluate(&model, Some(&adapter), dataset, cfg.tau, cfg.prompt()));
        rows.push(match outcome {
            Ok(metrics) => SweepRow {
                lambda,
                metrics: Some(metrics),
                failure: None,
            },
            Err(e) if is_numerical(&e) => SweepRow {
                lambda,
                metrics: None,
                failure: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    }
    Ok(SweepReport { phase_a, rows })
}

/// `0, 1/(n-1), ..., 1`.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Placement,
    BalancePhaseA,
    BalancePhaseB,
    /// The strategy used by whichever phases are balanced.
    Sampler,
    Mode,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Placement,
        Axis::BalancePhaseA,
        Axis::BalancePhaseB,
        Axis::Sampler,
        Axis::Mode,
    ];

    pub fn default_values(self) -> Vec<String> {
        let v: Vec<String> = match self {
            Axis::Placement => crate::adapter::Placement::ALL.iter().map(ToString::to_string).collect(),
            Axis::BalancePhaseA | Axis::BalancePhaseB => vec!["false".into(), "true".into()],
            Axis::Sampler => [
                SamplerStrategy::ClassBalanced,
                SamplerStrategy::SquareRoot,
                SamplerStrategy::MixBalanced,
            ]
            .iter()
            .map(ToString::to_string)
            .collect(),
            Axis::Mode => [Mode::TwoPhase, Mode::PhaseAOnly, Mode::Joint]
                .iter()
                .map(ToString::to_string)
                .collect(),
        };
        v
    }

    pub fn apply(self, config: &mut RunConfig, value: &str) -> Result<()> {
        let flag = |v: &str| {
            v.parse::<bool>()
                .map_err(|_| Error::Config(format!("axis {self} expects true|false, got `{v}`")))
        };
        match self {
            Axis::Placement => config.placement = value.parse()?,
            Axis::BalancePhaseA => config.balance_phase_a = flag(value)?,
            Axis::BalancePhaseB => config.balance_phase_b = flag(value)?,
            Axis::Sampler => {
                let s: SamplerStrategy = value.parse()?;
                config.sampler_a = s;
                config.sampler_b = s;
            }
            Axis::Mode => config.mode = value.parse()?,
        }
        Ok(())
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Placement => "placement",
            Axis::BalancePhaseA => "balance_phase_a",
            Axis::BalancePhaseB => "balance_phase_b",
            Axis::Sampler => "sampler",
            Axis::Mode => "mode",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisSpec {
    pub axis: Axis,
    pub values: Vec<String>,
}

impl AxisSpec {
    pub fn new(axis: Axis) -> Self {
        AxisSpec {
            axis,
            values: axis.default_values(),
        }
    }
}

/// Parses `placement,sampler=square_root|mix_balanced`: comma-separated axes,
/// each optionally restricted to `|`-separated values.
pub fn parse_axes(text: &str) -> Result<Vec<AxisSpec>> {
    let mut out: Vec<AxisSpec> = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, values) = match item.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (item, None),
        };
        let axis: Axis = name.parse()?;
        if out.iter().any(|a| a.axis == axis) {
            return Err(Error::Config(format!("axis {axis} given twice")));
        }
        let spec = match values {
            None => AxisSpec::new(axis),
            Some(v) => AxisSpec {
                axis,
                values: v.split('|').map(|s| s.trim().to_string()).collect(),
            },
        };
        if spec.values.is_empty() || spec.values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("axis {axis} has an empty value")));
        }
        out.push(spec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// In axis order.
    pub key: CellKey,
    pub seed: u64,
    pub metrics: Metrics,
}

/// `(axis, value)` pairs naming one grid cell.
pub type CellKey = Vec<(String, String)>;

/// Every cell configuration of the Cartesian product, in row-major order.
pub fn grid_configs(config: &RunConfig, axes: &[AxisSpec]) -> Result<Vec<(CellKey, RunConfig)>> {
    let mut cells = vec![(Vec::new(), config.clone())];
    for spec in axes {
        let mut next = Vec::with_capacity(cells.len() * spec.values.len());
        for (key, cfg) in &cells {
            for value in &spec.values {
                let mut cfg = cfg.clone();
                spec.axis.apply(&mut cfg, value)?;
                let mut key = key.clone();
                key.push((spec.axis.to_string(), value.clone()));
                next.push((key, cfg));
            }
        }
        cells = next;
    }
    for (_, cfg) in &cells {
        cfg.validate()?;
    }
    Ok(cells)
}

/// Runs every cell under the configuration's seed. Each cell trains from
/// scratch, so any row can be reproduced on its own.
pub fn ablation_grid(config: &RunConfig, axes: &[AxisSpec]) -> Result<Vec<GridRow>> {
    ablation_grid_on(config, &config.dataset.load()?, axes)
}

pub fn ablation_grid_on(config: &RunConfig, dataset: &LongTailedDataset, axes: &[AxisSpec]) -> Result<Vec<GridRow>> {
    grid_configs(config, axes)?
        .into_iter()
        .map(|(key, cfg)| {
            Ok(GridRow {
                key,
                seed: cfg.seed,
                metrics: run_on(&cfg, dataset)?.metrics,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    /// `None` for an empty slice. Even counts take the mean of the middle two.
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Spread {
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} [{:.3}, {:.3}]", self.median, self.min, self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpread {
    pub seeds: usize,
    pub overall: Spread,
    pub many: Option<Spread>,
    pub medium: Option<Spread>,
    pub few: Option<Spread>,
}

impl MetricsSpread {
    pub fn of(runs: &[Metrics]) -> Option<Self> {
        let split = |f: fn(&Metrics) -> Option<f64>| {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.and_then(|v| Spread::of(&v))
        };
        Some(MetricsSpread {
            seeds: runs.len(),
            overall: Spread::of(&runs.iter().map(|m| m.overall).collect::<Vec<_>>())?,
            many: split(|m| m.many),
            medium: split(|m| m.medium),
            few: split(|m| m.few),
        })
    }
}

/// The default five seeds of trend reports.
pub const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Runs `config` re-seeded with each seed (dataset included) and summarizes.
pub fn multi_seed(config: &RunConfig, seeds: &[u64]) -> Result<(Vec<Metrics>, MetricsSpread)> {
    let runs = seeds
        .iter()
        .map(|&s| crate::train::run(&config.clone().with_seed(s)).map(|o| o.metrics))
        .collect::<Result<Vec<_>>>()?;
    let spread = MetricsSpread::of(&runs).ok_or_else(|| Error::Config("no seeds given".into()))?;
    Ok((runs, spread))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("report rows serialize") + "\n")
        .collect()
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
}

/// Accuracy columns for a metrics record, in table order.
pub fn metric_cells(m: &Metrics) -> Vec<String> {
    vec![fmt_acc(m.many), fmt_acc(m.medium), fmt_acc(m.few), fmt_acc(Some(m.overall))]
}

pub const METRIC_HEADERS: [&str; 4] = ["many", "medium", "few", "overall"];

/// Left-aligned columns separated by two spaces, with a dashed rule under the
/// header.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let s: Vec<String> = (0..cols)
            .map(|i| {
                let c = cells.get(i).map_or("", String::as_str);
                format!("{c:<w$}", w = width[i])
            })
            .collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out += &(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  ") + "\n");
    for row in rows {
        out += &line(row);
    }
    out
}

pub fn sweep_table(report: &SweepReport) -> String {
    let headers: Vec<String> = std::iter::once("lambda").chain(METRIC_HEADERS).map(String::from).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![format!("{:.2}", r.lambda)];
            match (&r.metrics, &r.failure) {
                (Some(m), _) => cells.extend(metric_cells(m)),
                (None, failure) => cells.push(format!("failed: {}", failure.as_deref().unwrap_or("?"))),
            }
            cells
        })
        .collect();
    render_table(&headers, &rows)
}

pub fn grid_table(rows: &[GridRow]) -> String {
    let mut headers: Vec<String> = rows
        .first()
        .map(|r| r.key.iter().map(|(a, _)| a.clone()).collect())
        .unwrap_or_default();
    headers.extend(METRIC_HEADERS.map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = r.key.iter().map(|(_, v)| v.clone()).collect();
            cells.extend(metric_cells(&r.metrics));
            cells
        })
        .collect();
    render_table(&headers, &body)
}
