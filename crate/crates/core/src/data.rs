//! Long-tailed datasets: synthesis, shot-split bookkeeping and class samplers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// Shot-frequency bucket of a class, by its training count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    Many,
    Medium,
    Few,
}

/// `> 100` is many, `20..=100` medium, `< 20` few.
pub fn shot_of(count: u64) -> Shot {
    if count > 100 {
        Shot::Many
    } else if count >= 20 {
        Shot::Medium
    } else {
        Shot::Few
    }
}

pub fn shot_split(class_counts: &[u64]) -> Vec<Shot> {
    class_counts.iter().map(|&c| shot_of(c)).collect()
}

/// `n_j = round(n_max * rho^(-(j-1)/(K-1)))`, floored at 1.
pub fn exponential_counts(classes: usize, n_max: u64, rho: f64) -> Result<Vec<u64>> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::InvalidRatio(rho));
    }
    check_shape(classes, n_max)?;
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|j| {
            let n = n_max as f64 * rho.powf(-(j as f64) / last);
            (n.round() as u64).max(1)
        })
        .collect())
}

/// Rank power law `n_j = round(n_max * j^(-1/alpha))`, floored at 1, so that
/// `n_1 = n_max` and counts never increase.
pub fn pareto_counts(classes: usize, n_max: u64, alpha: f64) -> Result<Vec<u64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidPower(alpha));
    }
    check_shape(classes, n_max)?;
    Ok((1..=classes)
        .map(|j| {
            let n = n_max as f64 * (j as f64).powf(-1.0 / alpha);
            (n.round() as u64).max(1)
        })
        .collect())
}

fn check_shape(classes: usize, n_max: u64) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n_max < 1 {
        return Err(Error::Config("n_max must be >= 1".into()));
    }
    Ok(())
}

/// Labeled feature rows: training rows first, then a class-balanced test split.
#[derive(Clone, Debug, PartialEq)]
pub struct LongTailedDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    num_train: usize,
    class_counts: Vec<u64>,
    test_counts: Vec<u64>,
    shots: Vec<Shot>,
    class_rows: Vec<Vec<usize>>,
}

impl LongTailedDataset {
    /// Validates and indexes a dataset. Rows `0..num_train` are training rows.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, num_train: usize) -> Result<Self> {
        let (rows, _) = features.expect_matrix("dataset")?;
        if rows != labels.len() || num_train > rows {
            return Err(Error::dim("dataset", features.shape(), &[labels.len(), num_train]));
        }
        if num_classes == 0 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if let Some((row, _)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Index {
                what: "class labels",
                index: labels[row],
                len: num_classes,
            });
        }
        if let Some(row) = (0..rows).find(|&r| features.row(r).iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract(format!("non-finite feature in row {row}")));
        }
        let mut class_counts = vec![0u64; num_classes];
        let mut test_counts = vec![0u64; num_classes];
        let mut class_rows = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if i < num_train {
                class_counts[l] += 1;
                class_rows[l].push(i);
            } else {
                test_counts[l] += 1;
            }
        }
        if let Some(j) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("class {j} has no training rows")));
        }
        if test_counts.iter().any(|&c| c != test_counts[0]) {
            return Err(Error::Contract(format!("test split is not balanced: {test_counts:?}")));
        }
        Ok(LongTailedDataset {
            shots: shot_split(&class_counts),
            features,
            labels,
            num_classes,
            num_train,
            class_counts,
            test_counts,
            class_rows,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_train(&self) -> usize {
        self.num_train
    }

    pub fn num_test(&self) -> usize {
        self.labels.len() - self.num_train
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn test_counts(&self) -> &[u64] {
        &self.test_counts
    }

    pub fn test_per_class(&self) -> u64 {
        self.test_counts[0]
    }

    pub fn shots(&self) -> &[Shot] {
        &self.shots
    }

    /// Training row indices belonging to `class`.
    pub fn class_rows(&self, class: usize) -> &[usize] {
        &self.class_rows[class]
    }

    pub fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        self.features.select_rows(idx)
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.num_train..self.labels.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Exponential,
    Pareto,
}

fn default_rho() -> f64 {
    40.0
}
fn default_alpha() -> f64 {
    6.0
}
fn default_sigma() -> f64 {
    0.35
}
fn default_test_per_class() -> u64 {
    50
}

/// Parameters of a synthetic long-tailed dataset built from Gaussian clusters
/// around random unit-norm class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub profile: Profile,
    pub classes: usize,
    pub n_max: u64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: u64,
    pub seed: u64,
}

const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_WARM: u64 = 3;

impl SynthSpec {
    /// 20 classes, `n_max = 200`, exponential decay with ratio 40 in 16
    /// dimensions.
    pub fn default_task(seed: u64) -> Self {
        SynthSpec {
            profile: Profile::Exponential,
            classes: 20,
            n_max: 200,
            rho: default_rho(),
            alpha: default_alpha(),
            dim: 16,
            sigma: default_sigma(),
            test_per_class: default_test_per_class(),
            seed,
        }
    }

    pub fn train_counts(&self) -> Result<Vec<u64>> {
        match self.profile {
            Profile::Exponential => exponential_counts(self.classes, self.n_max, self.rho),
            Profile::Pareto => pareto_counts(self.classes, self.n_max, self.alpha),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Unit-norm class mean directions, one row per class.
    pub fn class_means(&self) -> Result<Tensor> {
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        let mut rng = self.rng(STREAM_MEANS);
        let mut data = Vec::with_capacity(self.classes * self.dim);
        for _ in 0..self.classes {
            loop {
                let row: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm(&row);
                if n > 1e-9 {
                    data.extend(row.iter().map(|x| x / n));
                    break;
                }
            }
        }
        Tensor::new(vec![self.classes, self.dim], data)
    }

    fn draw_rows(&self, means: &Tensor, counts: &[u64], rng: &mut ChaCha8Rng, out: &mut Vec<f64>, labels: &mut Vec<usize>) {
        for (class, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mean = means.row(class);
                out.extend(mean.iter().map(|&mu| {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + self.sigma * z
                }));
                labels.push(class);
            }
        }
    }

    pub fn generate(&self) -> Result<LongTailedDataset> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("invalid cluster spread {}", self.sigma)));
        }
        let counts = self.train_counts()?;
        let means = self.class_means()?;
        let test = vec![self.test_per_class; self.classes];
        let num_train: u64 = counts.iter().sum();
        let total = (num_train + self.test_per_class * self.classes as u64) as usize;
        let mut data = Vec::with_capacity(total * self.dim);
        let mut labels = Vec::with_capacity(total);
        self.draw_rows(&means, &counts, &mut self.rng(STREAM_TRAIN), &mut data, &mut labels);
        self.draw_rows(&means, &test, &mut self.rng(STREAM_TEST), &mut data, &mut labels);
        let features = Tensor::new(vec![total, self.dim], data)?;
        LongTailedDataset::new(features, labels, self.classes, num_train as usize)
    }

    /// Balanced pool drawn around the same class means with an independent
    /// noise stream; all rows are training rows.
    pub fn warm_pool(&self, per_class: u64) -> Result<LongTailedDataset> {
        if per_class == 0 {
            return Err(Error::Config("warm-start pool needs at least one row per class".into()));
        }
        let means = self.class_means()?;
        let counts = vec![per_class; self.classes];
        let total = (per_class * self.classes as u64) as usize;
        let mut data = Vec::with_capacity(total * self.dim);
        let mut labels = Vec::with_capacity(total);
        self.draw_rows(&means, &counts, &mut self.rng(STREAM_WARM), &mut data, &mut labels);
        LongTailedDataset::new(Tensor::new(vec![total, self.dim], data)?, labels, self.classes, total)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerStrategy {
    #[default]
    Instance,
    ClassBalanced,
    SquareRoot,
    MixBalanced,
}

impl SamplerStrategy {
    pub const ALL: [SamplerStrategy; 4] = [
        SamplerStrategy::Instance,
        SamplerStrategy::ClassBalanced,
        SamplerStrategy::SquareRoot,
        SamplerStrategy::MixBalanced,
    ];
}

impl fmt::Display for SamplerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerStrategy::Instance => "instance",
            SamplerStrategy::ClassBalanced => "class_balanced",
            SamplerStrategy::SquareRoot => "square_root",
            SamplerStrategy::MixBalanced => "mix_balanced",
        })
    }
}

impl FromStr for SamplerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerStrategy::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler strategy `{s}`")))
    }
}

/// Per-class sampling probabilities.
///
/// `mix_balanced` blends linearly from instance-balanced at `progress = 0`
/// to class-balanced at `progress = 1`.
pub fn sampler_probs(strategy: SamplerStrategy, class_counts: &[u64], progress: f64) -> Result<Vec<f64>> {
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::Contract("sampler needs a positive count for every class".into()));
    }
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Contract(format!("progress {progress} outside [0, 1]")));
    }
    let k = class_counts.len() as f64;
    let total: f64 = class_counts.iter().map(|&n| n as f64).sum();
    let instance = || class_counts.iter().map(|&n| n as f64 / total).collect::<Vec<_>>();
    Ok(match strategy {
        SamplerStrategy::Instance => instance(),
        SamplerStrategy::ClassBalanced => vec![1.0 / k; class_counts.len()],
        SamplerStrategy::SquareRoot => {
            let roots: Vec<f64> = class_counts.iter().map(|&n| (n as f64).sqrt()).collect();
            let sum: f64 = roots.iter().sum();
            roots.iter().map(|r| r / sum).collect()
        }
        SamplerStrategy::MixBalanced => instance()
            .into_iter()
            .map(|p| (1.0 - progress) * p + progress / k)
            .collect(),
    })
}

/// Seeded two-stage sampler: a class by `sampler_probs`, then a training row
/// uniformly within that class.
#[derive(Clone, Debug)]
pub struct SamplerState {
    strategy: SamplerStrategy,
    rng: ChaCha8Rng,
    progress: f64,
}

impl SamplerState {
    pub fn new(strategy: SamplerStrategy, rng: ChaCha8Rng) -> Self {
        SamplerState {
            strategy,
            rng,
            progress: 0.0,
        }
    }

    pub fn from_seed(strategy: SamplerStrategy, seed: u64) -> Self {
        SamplerState::new(strategy, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn strategy(&self) -> SamplerStrategy {
        self.strategy
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Advances training progress; it may never move backwards.
    pub fn set_progress(&mut self, progress: f64) -> Result<()> {
        if !(progress >= self.progress && progress <= 1.0) {
            return Err(Error::Contract(format!(
                "progress must be non-decreasing within [0, 1]: {} -> {progress}",
                self.progress
            )));
        }
        self.progress = progress;
        Ok(())
    }

    /// Returns `(class, row index)` of one training row.
    pub fn draw(&mut self, dataset: &LongTailedDataset) -> Result<(usize, usize)> {
        let probs = sampler_probs(self.strategy, dataset.class_counts(), self.progress)?;
        Ok(self.draw_with(&probs, dataset))
    }

    pub fn draw_batch(&mut self, dataset: &LongTailedDataset, n: usize) -> Result<Vec<(usize, usize)>> {
        let probs = sampler_probs(self.strategy, dataset.class_counts(), self.progress)?;
        Ok((0..n).map(|_| self.draw_with(&probs, dataset)).collect())
    }

    fn draw_with(&mut self, probs: &[f64], dataset: &LongTailedDataset) -> (usize, usize) {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut class = probs.len() - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = j;
                break;
            }
        }
        let rows = dataset.class_rows(class);
        let row = rows[self.rng.random_range(0..rows.len())];
        (class, row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_examples() {
        assert_eq!(exponential_counts(3, 100, 100.0).unwrap(), [100, 10, 1]);
        assert_eq!(exponential_counts(5, 30, 1.0).unwrap(), [30; 5]);
        let c = exponential_counts(10, 500, 50.0).unwrap();
        assert_eq!(c[0] / c[9], 50);
        assert!(matches!(exponential_counts(3, 100, 0.5), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn pareto_examples() {
        let c = pareto_counts(50, 300, 6.0).unwrap();
        assert_eq!(c[0], 300);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(pareto_counts(5, 10, 0.0), Err(Error::InvalidPower(_))));
        assert!(matches!(pareto_counts(5, 10, -1.0), Err(Error::InvalidPower(_))));
    }

    #[test]
    fn pareto_thousand_classes() {
        let c = pareto_counts(1000, 1280, 6.0).unwrap();
        let tail = *c.last().unwrap();
        assert!(tail >= 1);
        // rank power law: head/tail = K^(1/alpha)
        let expected_tail = (1280.0 * 1000f64.powf(-1.0 / 6.0)).round() as u64;
        assert_eq!(tail, expected_tail);
        assert_eq!(tail, 405);
    }

    #[test]
    fn shot_thresholds() {
        assert_eq!(shot_split(&[150, 50, 5]), [Shot::Many, Shot::Medium, Shot::Few]);
        assert_eq!(shot_split(&[100, 20, 19, 101]), [Shot::Medium, Shot::Medium, Shot::Few, Shot::Many]);
        assert!(shot_split(&[101; 4]).iter().all(|&s| s == Shot::Many));
    }

    #[test]
    fn sampler_closed_forms() {
        let p = sampler_probs(SamplerStrategy::ClassBalanced, &[9, 4, 2, 1], 0.0).unwrap();
        assert_eq!(p, [0.25; 4]);
        let p = sampler_probs(SamplerStrategy::SquareRoot, &[100, 1], 0.0).unwrap();
        assert!((p[0] - 10.0 / 11.0).abs() < 1e-12 && (p[1] - 1.0 / 11.0).abs() < 1e-12);
        let counts = [40, 10, 5, 1];
        let inst = sampler_probs(SamplerStrategy::Instance, &counts, 0.0).unwrap();
        let cb = sampler_probs(SamplerStrategy::ClassBalanced, &counts, 0.0).unwrap();
        assert_eq!(sampler_probs(SamplerStrategy::MixBalanced, &counts, 0.0).unwrap(), inst);
        let end = sampler_probs(SamplerStrategy::MixBalanced, &counts, 1.0).unwrap();
        for (a, b) in end.iter().zip(&cb) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_strategy_is_config_error() {
        assert!(matches!("oversample".parse::<SamplerStrategy>(), Err(Error::Config(_))));
        assert_eq!("square_root".parse::<SamplerStrategy>().unwrap(), SamplerStrategy::SquareRoot);
    }

    fn tiny_dataset(counts: &[u64]) -> LongTailedDataset {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n as usize));
        }
        let n = labels.len();
        let features = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        LongTailedDataset::new(features, labels, counts.len(), n).unwrap()
    }

    #[test]
    fn single_class_always_draws_class_zero() {
        let ds = tiny_dataset(&[7]);
        let mut s = SamplerState::from_seed(SamplerStrategy::ClassBalanced, 3);
        for _ in 0..50 {
            let (c, row) = s.draw(&ds).unwrap();
            assert_eq!(c, 0);
            assert!(row < 7);
        }
    }

    #[test]
    fn draws_are_reproducible_and_within_class() {
        let ds = tiny_dataset(&[30, 10, 3]);
        let mut a = SamplerState::from_seed(SamplerStrategy::SquareRoot, 9);
        let mut b = SamplerState::from_seed(SamplerStrategy::SquareRoot, 9);
        let da = a.draw_batch(&ds, 200).unwrap();
        assert_eq!(da, b.draw_batch(&ds, 200).unwrap());
        for (c, row) in da {
            assert_eq!(ds.labels()[row], c);
        }
    }

    #[test]
    fn progress_is_monotone() {
        let mut s = SamplerState::from_seed(SamplerStrategy::MixBalanced, 0);
        s.set_progress(0.5).unwrap();
        assert!(s.set_progress(0.4).is_err());
        assert!(s.set_progress(1.5).is_err());
        s.set_progress(1.0).unwrap();
    }

    #[test]
    fn synthetic_dataset_invariants() {
        let spec = SynthSpec {
            classes: 6,
            n_max: 120,
            rho: 30.0,
            dim: 5,
            test_per_class: 7,
            ..SynthSpec::default_task(4)
        };
        let ds = spec.generate().unwrap();
        assert_eq!(ds.class_counts(), spec.train_counts().unwrap().as_slice());
        assert_eq!(ds.num_train() as u64, ds.class_counts().iter().sum::<u64>());
        assert!(ds.test_counts().iter().all(|&c| c == 7));
        assert_eq!(ds, spec.generate().unwrap());
        let means = spec.class_means().unwrap();
        for r in 0..6 {
            assert!((norm(means.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn warm_pool_is_disjoint_from_train() {
        let spec = SynthSpec {
            classes: 4,
            n_max: 40,
            dim: 6,
            ..SynthSpec::default_task(2)
        };
        let ds = spec.generate().unwrap();
        let pool = spec.warm_pool(10).unwrap();
        assert!(pool.class_counts().iter().all(|&c| c == 10));
        for p in 0..pool.num_rows() {
            for t in 0..ds.num_rows() {
                assert_ne!(pool.features().row(p), ds.features().row(t));
            }
        }
    }

    #[test]
    fn dataset_rejects_unbalanced_test_split() {
        let features = Tensor::zeros(&[4, 2]).unwrap();
        assert!(LongTailedDataset::new(features, vec![0, 1, 0, 0], 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn sampler_probs_form_a_distribution(
            counts in prop::collection::vec(1u64..5000, 1..40),
            progress in 0.0f64..=1.0,
        ) {
            for s in SamplerStrategy::ALL {
                let p = sampler_probs(s, &counts, progress).unwrap();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn shot_split_commutes_with_permutation(
            counts in prop::collection::vec(1u64..300, 1..30),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..counts.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let tags = shot_split(&counts);
            let permuted: Vec<u64> = perm.iter().map(|&i| counts[i]).collect();
            let permuted_tags: Vec<Shot> = perm.iter().map(|&i| tags[i]).collect();
            prop_assert_eq!(shot_split(&permuted), permuted_tags);
        }

        #[test]
        fn exponential_head_tail_ratio(k in 2usize..60, rho in 1.0f64..200.0) {
            let n_max = 1000;
            let c = exponential_counts(k, n_max, rho).unwrap();
            prop_assert_eq!(c[0], n_max);
            let tail = c[k - 1] as f64;
            let exact = n_max as f64 / rho;
            prop_assert!((tail - exact).abs() <= 0.5 + 1e-9);
        }
    }
}
