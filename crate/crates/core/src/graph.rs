//! Reverse-mode automatic differentiation over a closed operation set.
//!
//! A [`Graph`] is a forward-ordered list of nodes. Each op evaluates eagerly
//! when it is pushed, and [`Graph::backward`] walks the list in reverse,
//! accumulating gradients into every node. Leaves created with
//! [`Graph::param`] carry a name so their gradients can be collected after the
//! pass; leaves created with [`Graph::constant`] never report gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// Rows with a Euclidean norm below this are rejected by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Param(String),
    Constant,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    L2Normalize(NodeId),
    Similarity { v: NodeId, u: NodeId, tau: f64 },
    DiagonalCrossEntropy(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather { table: NodeId, rows: Vec<usize> },
    Sum(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Similarity { .. } => "similarity",
            Op::DiagonalCrossEntropy(_) => "diagonal_cross_entropy",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Param(_) | Op::Constant => vec![],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::Relu(x) | Op::L2Normalize(x) | Op::DiagonalCrossEntropy(x) | Op::Sum(x) => {
                vec![x]
            }
            Op::Similarity { v, u, .. } => vec![v, u],
            Op::Add(a, b) => vec![a, b],
            Op::Scale(x, _) => vec![x],
            Op::Gather { table, .. } => vec![table],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(op.inputs().iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id).map(|n| &n.value).ok_or(Error::Index {
            what: "graph nodes",
            index: id,
            len: self.nodes.len(),
        })
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(Op::Param(name.into()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(Op::Constant, value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (rows, inner) = xv.expect_matrix("affine")?;
        let (w_rows, cols) = wv.expect_matrix("affine")?;
        if inner != w_rows {
            return Err(Error::dim("affine", xv.shape(), wv.shape()));
        }
        if bv.shape() != [cols] {
            return Err(Error::dim("affine", wv.shape(), bv.shape()));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let mut row = bd.to_vec();
            for k in 0..inner {
                let xik = xd[i * inner + k];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wd[k * cols..(k + 1) * cols];
                for (o, &wkj) in row.iter_mut().zip(wrow) {
                    *o += xik * wkj;
                }
            }
            out.extend_from_slice(&row);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.check(x)?;
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(x), value))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.check(x)?;
        let (rows, cols) = xv.expect_matrix("l2_normalize")?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let n = norm(row);
            if !(n >= NORM_FLOOR) {
                return Err(Error::DegenerateEmbedding { row: r, norm: n });
            }
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::L2Normalize(x), value))
    }

    /// Logits `v_i . u_j / tau` for every pair of rows.
    pub fn similarity(&mut self, v: NodeId, u: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTemperature(tau));
        }
        let (vv, uv) = (self.check(v)?, self.check(u)?);
        let (n_v, d) = vv.expect_matrix("similarity")?;
        let (n_u, d_u) = uv.expect_matrix("similarity")?;
        if d != d_u {
            return Err(Error::dim("similarity", vv.shape(), uv.shape()));
        }
        let mut out = Vec::with_capacity(n_v * n_u);
        for i in 0..n_v {
            let vi = vv.row(i);
            for j in 0..n_u {
                out.push(crate::tensor::dot(vi, uv.row(j)) / tau);
            }
        }
        let value = Tensor::new(vec![n_v, n_u], out)?;
        Ok(self.push(Op::Similarity { v, u, tau }, value))
    }

    /// Mean over rows of `logsumexp(row) - row[i]`, i.e. cross-entropy with the
    /// diagonal as the target.
    pub fn diagonal_cross_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = self.check(logits)?;
        let (n, c) = lv.expect_matrix("diagonal_cross_entropy")?;
        if n != c {
            return Err(Error::dim("diagonal_cross_entropy", lv.shape(), &[n, n]));
        }
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            total += logsumexp(row) - row[i];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::DiagonalCrossEntropy(logits), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = self.check(x)?;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(x, factor), value))
    }

    /// Selects rows of a matrix; repeated indices are allowed.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let value = self.check(table)?.select_rows(rows)?;
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.check(x)?.data().iter().sum();
        Ok(self.push(Op::Sum(x), Tensor::scalar(total)))
    }

    /// Populates the gradient of `loss` in every node. Nodes the loss does not
    /// depend on receive an all-zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.check(loss)?;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, node {loss} has shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for k in (0..=loss).rev() {
            let Some(g) = grads[k].take() else { continue };
            self.backprop_node(k, &g, &mut grads)?;
            grads[k] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, k: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[k];
        match node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
                let (rows, inner) = (xv.rows(), xv.cols());
                let cols = wv.cols();
                let (xd, wd) = (xv.data(), wv.data());
                let mut dx = vec![0.0; rows * inner];
                let mut dw = vec![0.0; inner * cols];
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    let gi = &g[i * cols..(i + 1) * cols];
                    for (d, gij) in db.iter_mut().zip(gi) {
                        *d += gij;
                    }
                    for kk in 0..inner {
                        let wrow = &wd[kk * cols..(kk + 1) * cols];
                        dx[i * inner + kk] = crate::tensor::dot(gi, wrow);
                        let xik = xd[i * inner + kk];
                        if xik != 0.0 {
                            let dwrow = &mut dw[kk * cols..(kk + 1) * cols];
                            for (d, gij) in dwrow.iter_mut().zip(gi) {
                                *d += xik * gij;
                            }
                        }
                    }
                }
                accumulate(grads, x, &dx);
                accumulate(grads, w, &dw);
                accumulate(grads, b, &db);
            }
            Op::Relu(x) => {
                let xd = self.nodes[x].value.data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
            Op::L2Normalize(x) => {
                // dx = (g - y (y . g)) / |x|
                let xv = &self.nodes[x].value;
                let y = &node.value;
                let cols = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    let n = norm(xv.row(r));
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yg = crate::tensor::dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * yg) / n));
                }
                accumulate(grads, x, &dx);
            }
            Op::Similarity { v, u, tau } => {
                let (vv, uv) = (&self.nodes[v].value, &self.nodes[u].value);
                let (n_v, n_u, d) = (vv.rows(), uv.rows(), vv.cols());
                let mut dv = vec![0.0; n_v * d];
                let mut du = vec![0.0; n_u * d];
                for i in 0..n_v {
                    let vi = vv.row(i);
                    for j in 0..n_u {
                        let gij = g[i * n_u + j] / tau;
                        if gij == 0.0 {
                            continue;
                        }
                        let uj = uv.row(j);
                        for t in 0..d {
                            dv[i * d + t] += gij * uj[t];
                            du[j * d + t] += gij * vi[t];
                        }
                    }
                }
                accumulate(grads, v, &dv);
                accumulate(grads, u, &du);
            }
            Op::DiagonalCrossEntropy(l) => {
                let lv = &self.nodes[l].value;
                let n = lv.rows();
                let scale = g[0] / n as f64;
                let mut dl = Vec::with_capacity(n * n);
                for i in 0..n {
                    let row = lv.row(i);
                    let lse = logsumexp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        let target = if i == j { 1.0 } else { 0.0 };
                        dl.push(scale * (p - target));
                    }
                }
                accumulate(grads, l, &dl);
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g);
                accumulate(grads, b, g);
            }
            Op::Scale(x, factor) => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate(grads, x, &dx);
            }
            Op::Gather { table, ref rows } => {
                let tv = &self.nodes[table].value;
                let cols = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for t in 0..cols {
                        dt[r * cols + t] += g[i * cols + t];
                    }
                }
                accumulate(grads, table, &dt);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x].value.len()];
                accumulate(grads, x, &dx);
            }
        }
        Ok(())
    }

    /// Gradients of every named parameter leaf, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some((
                    name.clone(),
                    n.value
                        .grad()
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; n.value.len()]),
                )),
                _ => None,
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Row-max stabilized log-sum-exp.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central differences of `f` with respect to every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += eps;
                let mut minus = x.clone();
                minus.data_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64], skip: impl Fn(usize) -> bool) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .filter(|(i, _)| !skip(*i))
            .map(|(_, (x, y))| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.constant(Tensor::identity(2).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w0 = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b34 = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = g.affine(x, w0, b34).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]).unwrap());
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x0, w0, b0) = (random(&[4, 3], &mut rng), random(&[3, 2], &mut rng), random(&[2], &mut rng));
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.affine(x, w, b).unwrap();
            let s = g.sum(y).unwrap();
            g.value(s).item()
        };
        let mut g = Graph::new();
        let (x, w, b) = (g.param("x", x0.clone()), g.param("w", w0.clone()), g.param("b", b0.clone()));
        let y = g.affine(x, w, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let nx = numeric_grad(&x0, |t| eval(t, &w0, &b0));
        let nw = numeric_grad(&w0, |t| eval(&x0, t, &b0));
        let nb = numeric_grad(&b0, |t| eval(&x0, &w0, t));
        assert!(max_rel_err(g.grad(x).unwrap(), &nx, |_| false) < 1e-6);
        assert!(max_rel_err(g.grad(w).unwrap(), &nw, |_| false) < 1e-6);
        assert!(max_rel_err(g.grad(b).unwrap(), &nb, |_| false) < 1e-6);
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, -0.5, -3.0]).unwrap());
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    /// Weighted reduction `sum_ij y_i . p_j` so upstream gradients vary per coordinate.
    fn probe_sum(g: &mut Graph, y: NodeId, probe: &Tensor) -> NodeId {
        let p = g.constant(probe.clone());
        let s = g.similarity(y, p, 1.0).unwrap();
        g.sum(s).unwrap()
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = random(&[3, 5], &mut rng);
        let probe = random(&[2, 5], &mut rng);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = g.relu(x).unwrap();
            let s = probe_sum(&mut g, y, &probe);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let x = g.param("x", x0.clone());
        let y = g.relu(x).unwrap();
        let s = probe_sum(&mut g, y, &probe);
        g.backward(s).unwrap();
        let numeric = numeric_grad(&x0, eval);
        let kink = |i: usize| x0.data()[i].abs() < 1e-6;
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric, kink) < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);

        let unit = Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let x = g.constant(unit.clone());
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), unit.data());
    }

    #[test]
    fn l2_normalize_rejects_degenerate_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1e-13]]).unwrap());
        match g.l2_normalize(x) {
            Err(Error::DegenerateEmbedding { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = random(&[5, 8], &mut rng);
        let probe = random(&[3, 8], &mut rng);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = g.l2_normalize(x).unwrap();
            let s = probe_sum(&mut g, y, &probe);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let x = g.param("x", x0.clone());
        let y = g.l2_normalize(x).unwrap();
        for r in 0..5 {
            assert!((norm(g.value(y).row(r)) - 1.0).abs() < 1e-12);
        }
        let s = probe_sum(&mut g, y, &probe);
        g.backward(s).unwrap();
        let numeric = numeric_grad(&x0, eval);
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric, |_| false) < 1e-5);
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::identity(2).unwrap());
        let s = g.similarity(id, id, 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
        let s = g.similarity(id, id, 0.5).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(g.similarity(id, id, 0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(g.similarity(id, id, -1.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn similarity_bounded_by_cauchy_schwarz() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new();
        let a = g.constant(random(&[3, 4], &mut rng));
        let b = g.constant(random(&[3, 4], &mut rng));
        let (a, b) = (g.l2_normalize(a).unwrap(), g.l2_normalize(b).unwrap());
        for tau in [0.1, 1.0, 3.0] {
            let s = g.similarity(a, b, tau).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let direct = crate::tensor::dot(g.value(a).row(i), g.value(b).row(j)) / tau;
                    let got = g.value(s).data()[i * 3 + j];
                    assert_eq!(got, direct);
                    assert!(got.abs() <= 1.0 / tau + 1e-12);
                }
            }
        }
    }

    #[test]
    fn diagonal_cross_entropy_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::from_rows(&[[5.0]]).unwrap());
        let l = g.diagonal_cross_entropy(one).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let id = g.constant(Tensor::identity(2).unwrap());
        let l = g.diagonal_cross_entropy(id).unwrap();
        // -log(e / (e + 1)) = log(1 + e^-1)
        let hand = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).item() - hand).abs() < 1e-12);
        assert!((hand - 0.31326).abs() < 1e-5);

        let rect = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(g.diagonal_cross_entropy(rect), Err(Error::Dimension { .. })));
    }

    #[test]
    fn diagonal_cross_entropy_gradient_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = random(&[6, 6], &mut rng);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let l = g.diagonal_cross_entropy(x).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let x = g.param("x", x0.clone());
        let l = g.diagonal_cross_entropy(x).unwrap();
        g.backward(l).unwrap();
        let numeric = numeric_grad(&x0, eval);
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric, |_| false) < 1e-5);

        // large logits must not overflow
        let mut big = x0.clone();
        big.data_mut().iter_mut().for_each(|v| *v *= 1000.0);
        let v = eval(&big);
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn backward_sum_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = Graph::new();
        let x = g.param("x", random(&[2, 3], &mut rng));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param("x", random(&[2, 3], &mut rng));
        let unused = g.param("unused", random(&[2], &mut rng));
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 6]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 2]);
        assert_eq!(g.param_grads().len(), 2);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::zeros(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_scatters_gradient_to_selected_rows_only() {
        let mut g = Graph::new();
        let t = g.param("t", Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let y = g.gather(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather(t, &[3]).is_err());
    }

    #[test]
    fn nodes_are_forward_ordered() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::vector(vec![1.0]).unwrap());
        let b = g.scale(a, 2.0).unwrap();
        let c = g.add(a, b).unwrap();
        let _ = g.sum(c).unwrap();
        for (k, node) in g.nodes().iter().enumerate() {
            assert!(node.op.inputs().iter().all(|&i| i < k));
        }
    }
}
