//! Image-to-text and text-to-image matching losses and the nearest-text
//! classification rule.

use crate::error::{Error, Result};
use crate::graph::{logsumexp, Graph, NodeId};
use crate::tensor::{dot, norm, Tensor};

const UNIT_TOL: f64 = 1e-9;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = norm(t.row(r));
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Index-aligned image and text embeddings with a temperature.
#[derive(Clone, Debug)]
pub struct BatchPair {
    v: Tensor,
    u: Tensor,
    tau: f64,
}

impl BatchPair {
    pub fn new(v: Tensor, u: Tensor, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        v.expect_matrix("batch_pair")?;
        if v.shape() != u.shape() {
            return Err(Error::dim("batch_pair", v.shape(), u.shape()));
        }
        check_unit_rows(&v, "image embedding")?;
        check_unit_rows(&u, "text embedding")?;
        Ok(BatchPair { v, u, tau })
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Same pair with image and text roles exchanged.
    pub fn swapped(&self) -> BatchPair {
        BatchPair {
            v: self.u.clone(),
            u: self.v.clone(),
            tau: self.tau,
        }
    }
}

/// Image-to-text loss node: cross-entropy of each image against all texts in
/// the batch with its own text as the target.
pub fn v2l_node(g: &mut Graph, v: NodeId, u: NodeId, tau: f64) -> Result<NodeId> {
    let logits = g.similarity(v, u, tau)?;
    g.diagonal_cross_entropy(logits)
}

/// Text-to-image loss node; identical to `v2l_node` with roles swapped.
pub fn l2v_node(g: &mut Graph, v: NodeId, u: NodeId, tau: f64) -> Result<NodeId> {
    v2l_node(g, u, v, tau)
}

pub fn loss_v2l(batch: &BatchPair) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(batch.v.clone());
    let u = g.constant(batch.u.clone());
    let l = v2l_node(&mut g, v, u, batch.tau)?;
    Ok(g.value(l).clone())
}

pub fn loss_l2v(batch: &BatchPair) -> Result<Tensor> {
    loss_v2l(&batch.swapped())
}

/// One unit-norm text embedding per candidate class.
#[derive(Clone, Debug)]
pub struct ClassBank {
    u: Tensor,
    class_ids: Vec<usize>,
}

impl ClassBank {
    pub fn new(u: Tensor, class_ids: Vec<usize>) -> Result<Self> {
        u.expect_matrix("class_bank")?;
        if u.rows() != class_ids.len() {
            return Err(Error::dim("class_bank", u.shape(), &[class_ids.len()]));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("class bank ids must be distinct".into()));
        }
        check_unit_rows(&u, "class bank")?;
        Ok(ClassBank { u, class_ids })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.u
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    fn scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.u.cols() {
            return Err(Error::dim("class_bank", &[v.len()], self.u.shape()));
        }
        Ok((0..self.len()).map(|i| dot(v, self.u.row(i))).collect())
    }
}

/// Softmax over `v . u_i / tau` against every class in the bank.
pub fn zero_shot_probs(v: &[f64], bank: &ClassBank, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let logits: Vec<f64> = bank.scores(v)?.into_iter().map(|s| s / tau).collect();
    let lse = logsumexp(&logits);
    Ok(logits.iter().map(|z| (z - lse).exp()).collect())
}

/// Class id with the highest probability; ties go to the lowest bank row.
///
/// The argmax is taken over raw similarities, which orders classes exactly as
/// the probabilities do for every `tau > 0`.
pub fn predict(v: &[f64], bank: &ClassBank, tau: f64) -> Result<usize> {
    check_tau(tau)?;
    let scores = bank.scores(v)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(bank.class_ids[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = norm(&row);
            data.extend(row.iter().map(|x| x / r));
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    /// Direct double loop over the text-to-image loss.
    fn naive_l2v(v: &Tensor, u: &Tensor, tau: f64) -> f64 {
        let n = v.rows();
        let mut total = 0.0;
        for i in 0..n {
            let num = (dot(u.row(i), v.row(i)) / tau).exp();
            let den: f64 = (0..n).map(|j| (dot(u.row(i), v.row(j)) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let v = Tensor::from_rows(&[[0.6, 0.8]]).unwrap();
        for tau in [0.1, 1.0, 7.0] {
            let b = BatchPair::new(v.clone(), v.clone(), tau).unwrap();
            assert_eq!(loss_v2l(&b).unwrap().item(), 0.0);
            assert_eq!(loss_l2v(&b).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn orthonormal_pairs() {
        let id = Tensor::identity(2).unwrap();
        let b = BatchPair::new(id.clone(), id, 1.0).unwrap();
        let hand = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_v2l(&b).unwrap().item() - hand).abs() < 1e-10);
    }

    #[test]
    fn l2v_is_v2l_with_roles_swapped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (v, u) = (unit_rows(5, 4, &mut rng), unit_rows(5, 4, &mut rng));
        let b = BatchPair::new(v.clone(), u.clone(), 0.7).unwrap();
        let swapped = BatchPair::new(u, v, 0.7).unwrap();
        assert_eq!(
            loss_l2v(&b).unwrap().item().to_bits(),
            loss_v2l(&swapped).unwrap().item().to_bits()
        );
    }

    #[test]
    fn l2v_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (v, u) = (unit_rows(7, 5, &mut rng), unit_rows(7, 5, &mut rng));
        let b = BatchPair::new(v.clone(), u.clone(), 0.5).unwrap();
        assert!((loss_l2v(&b).unwrap().item() - naive_l2v(&v, &u, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (v, u) = (unit_rows(6, 4, &mut rng), unit_rows(6, 4, &mut rng));
        let perm = [3, 0, 5, 1, 4, 2];
        let (pv, pu) = (v.select_rows(&perm).unwrap(), u.select_rows(&perm).unwrap());
        let a = BatchPair::new(v, u, 1.0).unwrap();
        let b = BatchPair::new(pv, pu, 1.0).unwrap();
        assert!((loss_v2l(&a).unwrap().item() - loss_v2l(&b).unwrap().item()).abs() < 1e-10);
        assert!((loss_l2v(&a).unwrap().item() - loss_l2v(&b).unwrap().item()).abs() < 1e-10);
    }

    #[test]
    fn batch_pair_validation() {
        let id = Tensor::identity(2).unwrap();
        assert!(matches!(BatchPair::new(id.clone(), id.clone(), 0.0), Err(Error::InvalidTemperature(_))));
        let not_unit = Tensor::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(BatchPair::new(not_unit, id.clone(), 1.0).is_err());
        let wide = Tensor::identity(3).unwrap();
        assert!(BatchPair::new(wide, id, 1.0).is_err());
    }

    #[test]
    fn opposite_pair_probabilities() {
        let bank = ClassBank::new(Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(), vec![0, 1]).unwrap();
        let p = zero_shot_probs(&[1.0, 0.0], &bank, 1.0).unwrap();
        let e = 1.0f64.exp();
        let hand = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        assert!((p[0] - hand[0]).abs() < 1e-12 && (p[1] - hand[1]).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn equidistant_query_gives_uniform() {
        let bank = ClassBank::new(Tensor::identity(4).unwrap(), vec![0, 1, 2, 3]).unwrap();
        let v = [0.5, 0.5, 0.5, 0.5];
        let p = zero_shot_probs(&v, &bank, 1.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(matches!(zero_shot_probs(&v, &bank, -1.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn predict_exact_match_and_ties() {
        let bank = ClassBank::new(Tensor::identity(4).unwrap(), vec![10, 11, 12, 13]).unwrap();
        assert_eq!(predict(&[0.0, 0.0, 0.0, 1.0], &bank, 1.0).unwrap(), 13);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(predict(&[0.0, half, half, 0.0], &bank, 1.0).unwrap(), 11);
    }

    #[test]
    fn bank_rejects_duplicates() {
        assert!(ClassBank::new(Tensor::identity(2).unwrap(), vec![1, 1]).is_err());
    }

    #[test]
    fn predict_ignores_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let bank = ClassBank::new(unit_rows(6, 5, &mut rng), (0..6).collect()).unwrap();
            let v = unit_rows(1, 5, &mut rng);
            let at = |tau| predict(v.row(0), &bank, tau).unwrap();
            assert_eq!(at(0.1), at(1.0));
            assert_eq!(at(1.0), at(10.0));
        }
    }
}
