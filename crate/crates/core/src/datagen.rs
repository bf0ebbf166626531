//! Graph data: CSBM generation, adjacency normalization, per-branch
//! convolved features and train/test splits.

use alloc::vec::Vec;
use alloc::{format, vec};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::linalg::max_asymmetry;
use crate::rng::{self, stream};
use crate::{Error, Result};

/// Contextual stochastic block model with two equal blocks.
///
/// Edges appear with probability `c_in / n` inside a block and `c_out / n`
/// across blocks, where `c_in = d + √d·λ` and `c_out = d − √d·λ`. Node `μ`
/// gets features `√(signal / n)·y_μ·u + ξ_μ` with a shared latent direction
/// `u` and independent noise `ξ_μ`, both standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct CsbmConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl CsbmConfig {
    pub fn c_in(&self) -> f64 {
        self.avg_degree + libm::sqrt(self.avg_degree) * self.homophily
    }

    pub fn c_out(&self) -> f64 {
        self.avg_degree - libm::sqrt(self.avg_degree) * self.homophily
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return Err(Error::invalid(
                "n",
                format!("must be even and >= 2, got {}", self.n),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be >= 1"));
        }
        if !(self.avg_degree > 0.0 && self.avg_degree.is_finite()) {
            return Err(Error::invalid("avg_degree", "must be positive and finite"));
        }
        if !self.homophily.is_finite() {
            return Err(Error::invalid("homophily", "must be finite"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::invalid(
                "signal_strength",
                "must be non-negative and finite",
            ));
        }
        let n = self.n as f64;
        for (name, c) in [("c_in", self.c_in()), ("c_out", self.c_out())] {
            if !(0.0..=n).contains(&c) {
                return Err(Error::invalid(
                    "homophily",
                    format!(
                        "{name} = {c} falls outside [0, n = {n}] for avg_degree {}",
                        self.avg_degree
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A graph with node features, real-valued labels and a train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    /// `D^{-1/2}(Â + I)D^{-1/2}`.
    pub adjacency_norm: DMatrix<f64>,
    /// Undirected edges `(i, j)` with `i < j`; self-loops are not listed.
    pub edges: Vec<(usize, usize)>,
    /// `n × N0`.
    pub raw_features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. The split starts empty.
    pub fn from_edges(
        edges: &[(usize, usize)],
        raw_features: DMatrix<f64>,
        labels: DVector<f64>,
    ) -> Result<Self> {
        let n = raw_features.nrows();
        if labels.len() != n {
            return Err(Error::Dimension {
                context: "Graph labels",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(pos) = labels.iter().position(|y| !y.is_finite()) {
            return Err(Error::invalid(
                "labels",
                format!("non-finite label at node {pos}"),
            ));
        }
        let mut raw = DMatrix::zeros(n, n);
        let mut canonical = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            for idx in [a, b] {
                if idx >= n {
                    return Err(Error::IndexOutOfRange { index: idx, len: n });
                }
            }
            if a == b {
                continue;
            }
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if raw[(i, j)] == 0.0 {
                canonical.push((i, j));
            }
            raw[(i, j)] = 1.0;
            raw[(j, i)] = 1.0;
        }
        canonical.sort_unstable();
        Ok(Graph {
            adjacency_norm: normalize_adjacency(&raw)?,
            edges: canonical,
            raw_features,
            labels,
            train_idx: Vec::new(),
            test_idx: Vec::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.raw_features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.raw_features.ncols()
    }

    /// Replaces the split after checking it is disjoint and in range.
    pub fn with_split(mut self, train_idx: Vec<usize>, test_idx: Vec<usize>) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        for &i in train_idx.iter().chain(&test_idx) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if seen[i] {
                return Err(Error::invalid("split", format!("node {i} listed twice")));
            }
            seen[i] = true;
        }
        self.train_idx = train_idx;
        self.test_idx = test_idx;
        Ok(self)
    }
}

/// Per-branch inputs `X_l = standardize(A^l X)`, `l = 0..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    pub features: Vec<DMatrix<f64>>,
}

impl BranchFeatures {
    pub fn num_branches(&self) -> usize {
        self.features.len()
    }
}

/// `D^{-1/2}(Â + I)D^{-1/2}` with `D` the degree matrix of `Â + I`.
pub fn normalize_adjacency(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = raw.nrows();
    if raw.ncols() != n {
        return Err(Error::Dimension {
            context: "normalize_adjacency (square)",
            expected: n,
            actual: raw.ncols(),
        });
    }
    let asym = max_asymmetry(raw);
    if asym > 0.0 {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let mut a = raw.clone();
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let mut inv_sqrt_deg = Vec::with_capacity(n);
    for (i, row_sum) in a.row_iter().map(|r| r.sum()).enumerate() {
        if row_sum.is_nan() || row_sum <= 0.0 {
            return Err(Error::invalid(
                "raw_adjacency",
                format!("node {i} has degree {row_sum}"),
            ));
        }
        inv_sqrt_deg.push(1.0 / libm::sqrt(row_sum));
    }
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Ok(a)
}

/// Samples a two-block CSBM graph with ±1 block labels.
///
/// Nodes `0..n/2` form block `+1` and the rest block `−1`; the node order is
/// not shuffled. The split of the returned graph is empty.
pub fn generate_csbm(cfg: &CsbmConfig) -> Result<Graph> {
    cfg.validate()?;
    let n = cfg.n;
    let half = n / 2;
    let p_in = cfg.c_in() / n as f64;
    let p_out = cfg.c_out() / n as f64;

    let mut edge_rng = rng::seeded(cfg.seed, stream::CSBM_EDGES);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if (i < half) == (j < half) {
                p_in
            } else {
                p_out
            };
            if edge_rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let labels = DVector::from_fn(n, |i, _| if i < half { 1.0 } else { -1.0 });
    let mut feat_rng = rng::seeded(cfg.seed, stream::CSBM_FEATURES);
    let latent: Vec<f64> = (0..cfg.feature_dim)
        .map(|_| feat_rng.sample(StandardNormal))
        .collect();
    let amp = libm::sqrt(cfg.signal_strength / n as f64);
    let mut features = DMatrix::zeros(n, cfg.feature_dim);
    for mu in 0..n {
        for (j, u) in latent.iter().enumerate() {
            let noise: f64 = feat_rng.sample(StandardNormal);
            features[(mu, j)] = amp * labels[mu] * u + noise;
        }
    }
    Graph::from_edges(&edges, features, labels)
}

/// Centers every column and scales it to unit (population) variance.
/// Columns with zero variance are left as zeros after centering.
pub fn standardize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n as f64;
        let sd = libm::sqrt(var);
        if sd > f64::EPSILON * mean.abs().max(1.0) * 16.0 {
            col /= sd;
        } else {
            col.fill(0.0);
        }
    }
    out
}

/// `X_0 = standardize(X)` and `X_l = standardize(A^l X)` for `l < L`.
pub fn branch_features(graph: &Graph, num_branches: usize) -> Result<BranchFeatures> {
    convolved_features(&graph.adjacency_norm, &graph.raw_features, num_branches)
}

pub fn convolved_features(
    adjacency: &DMatrix<f64>,
    features: &DMatrix<f64>,
    num_branches: usize,
) -> Result<BranchFeatures> {
    if num_branches == 0 {
        return Err(Error::invalid("num_branches", "must be >= 1"));
    }
    if adjacency.nrows() != features.nrows() || !adjacency.is_square() {
        return Err(Error::Dimension {
            context: "convolved_features (adjacency rows vs feature rows)",
            expected: features.nrows(),
            actual: adjacency.nrows(),
        });
    }
    let mut out = Vec::with_capacity(num_branches);
    let mut propagated = features.clone();
    for l in 0..num_branches {
        if l > 0 {
            propagated = adjacency * &propagated;
        }
        out.push(standardize_columns(&propagated));
    }
    Ok(BranchFeatures { features: out })
}

/// Uniform random split with `round(train_ratio · n)` training nodes; both
/// sides are returned sorted.
pub fn split_nodes(n: usize, train_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::invalid(
            "train_ratio",
            format!("must lie in (0, 1), got {train_ratio}"),
        ));
    }
    let p = libm::round(train_ratio * n as f64) as usize;
    if p == 0 || p >= n {
        return Err(Error::invalid(
            "train_ratio",
            format!("split of {n} nodes at ratio {train_ratio} leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, stream::SPLIT));
    let mut train = order[..p].to_vec();
    let mut test = order[p..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// `samples × dim` matrix of i.i.d. standard normal inputs.
pub fn gaussian_inputs(samples: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::seeded(seed, stream::GAUSSIAN_INPUTS);
    // row-major fill so the first rows do not depend on `samples`
    let mut m = DMatrix::zeros(samples, dim);
    for i in 0..samples {
        for j in 0..dim {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_cfg(n: usize, seed: u64) -> CsbmConfig {
        CsbmConfig {
            n,
            feature_dim: 8,
            avg_degree: 20.0,
            homophily: 4.0,
            signal_strength: 4.0,
            seed,
        }
    }

    #[test]
    fn isolated_nodes_normalize_to_identity() {
        let a = normalize_adjacency(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(a, DMatrix::identity(2, 2));
    }

    #[test]
    fn single_edge_normalizes_to_halves() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a = normalize_adjacency(&raw).unwrap();
        for v in a.iter() {
            assert_relative_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            normalize_adjacency(&raw),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn csbm_spectrum_within_unit_interval() {
        let g = generate_csbm(&small_cfg(100, 3)).unwrap();
        assert_eq!(max_asymmetry(&g.adjacency_norm), 0.0);
        let eig = symmetric_eigenvalues(&g.adjacency_norm);
        assert!(eig[0] >= -1.0 - 1e-12, "{}", eig[0]);
        assert!(*eig.last().unwrap() <= 1.0 + 1e-12);
        // the constant-degree eigenvector D^{1/2}1 has eigenvalue exactly 1
        assert_relative_eq!(*eig.last().unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn paper_scale_config_is_valid() {
        let cfg = CsbmConfig {
            n: 2600,
            feature_dim: 950,
            avg_degree: 20.0,
            homophily: 4.0,
            signal_strength: 4.0,
            seed: 0,
        };
        cfg.validate().unwrap();
        assert_relative_eq!(cfg.c_in(), 20.0 + 20f64.sqrt() * 4.0);
    }

    #[test]
    fn excessive_homophily_rejected() {
        let mut cfg = small_cfg(100, 0);
        cfg.homophily = 5.0; // c_out = 20 - 4.47*5 < 0
        assert!(cfg.validate().is_err());
        assert!(generate_csbm(&cfg).is_err());
        cfg.homophily = 4.0;
        cfg.n = 101;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csbm_is_seed_deterministic() {
        let a = generate_csbm(&small_cfg(60, 11)).unwrap();
        let b = generate_csbm(&small_cfg(60, 11)).unwrap();
        let c = generate_csbm(&small_cfg(60, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.edges, c.edges);
    }

    fn block_densities(g: &Graph) -> (usize, usize) {
        let half = g.num_nodes() / 2;
        let within = g
            .edges
            .iter()
            .filter(|(i, j)| (*i < half) == (*j < half))
            .count();
        (within, g.edges.len() - within)
    }

    #[test]
    fn within_block_density_matches_c_in() {
        let n = 1000;
        let half = n / 2;
        let pairs_within = 2 * half * (half - 1) / 2;
        let mut hits = 0usize;
        let mut cfg = small_cfg(n, 0);
        cfg.feature_dim = 1;
        for seed in 0..20 {
            cfg.seed = seed;
            hits += block_densities(&generate_csbm(&cfg).unwrap()).0;
        }
        let trials = (20 * pairs_within) as f64;
        let p = cfg.c_in() / n as f64;
        let se = (p * (1.0 - p) / trials).sqrt();
        let observed = hits as f64 / trials;
        assert!(
            (observed - p).abs() <= 3.0 * se,
            "observed {observed}, expected {p} ± {se}"
        );
    }

    #[test]
    fn zero_homophily_gives_equal_densities() {
        let n = 400;
        let mut cfg = small_cfg(n, 0);
        cfg.homophily = 0.0;
        cfg.feature_dim = 1;
        let half = n / 2;
        let pairs_within = (2 * half * (half - 1) / 2) as f64;
        let pairs_across = (half * half) as f64;
        let (mut w, mut a) = (0usize, 0usize);
        for seed in 0..10 {
            cfg.seed = seed;
            let (wi, ac) = block_densities(&generate_csbm(&cfg).unwrap());
            w += wi;
            a += ac;
        }
        let pw = w as f64 / (10.0 * pairs_within);
        let pa = a as f64 / (10.0 * pairs_across);
        let p = 20.0 / n as f64;
        let se = (p * (1.0 - p) / (10.0 * pairs_across)).sqrt();
        assert!(
            (pw - p).abs() < 4.0 * se && (pa - p).abs() < 4.0 * se,
            "{pw} {pa} {p}"
        );
        let se_diff =
            (p * (1.0 - p) * (1.0 / (10.0 * pairs_within) + 1.0 / (10.0 * pairs_across))).sqrt();
        assert!((pw - pa).abs() < 4.0 * se_diff);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn path_graph_one_hot_first_order() {
        let n = 6;
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let g = Graph::from_edges(&edges, DMatrix::identity(n, n), DVector::zeros(n)).unwrap();
        let bf = branch_features(&g, 2).unwrap();
        let deg: [f64; 6] = [2.0, 3.0, 3.0, 3.0, 3.0, 2.0];
        for j in 0..n {
            // column j of A: 1/sqrt(d_i d_j) on the path neighbours and itself
            let col: Vec<f64> = (0..n)
                .map(|i| {
                    if (i as i64 - j as i64).abs() <= 1 {
                        1.0 / (deg[i] * deg[j]).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                let expected = (col[i] - mean) / var.sqrt();
                assert_relative_eq!(bf.features[1][(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        let x = gaussian_inputs(30, 4, 9);
        let xs = standardize_columns(&x);
        let again = standardize_columns(&xs);
        assert!((&again - &xs).amax() < 1e-12);
    }

    #[test]
    fn constant_column_becomes_zero() {
        let mut x = gaussian_inputs(10, 2, 1);
        x.column_mut(1).fill(3.5);
        let xs = standardize_columns(&x);
        assert!(xs.column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn branch_features_are_standardized() {
        let g = generate_csbm(&small_cfg(80, 5)).unwrap();
        let bf = branch_features(&g, 3).unwrap();
        for x in &bf.features {
            for col in x.column_iter() {
                let mean = col.sum() / 80.0;
                let var = col.map(|v| (v - mean) * (v - mean)).sum() / 80.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-8);
            }
        }
        assert!(branch_features(&g, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let (train, test) = split_nodes(2600, 0.65, 1).unwrap();
        assert_eq!(train.len(), 1690);
        assert_eq!(test.len(), 910);
        let (train, test) = split_nodes(10, 0.9, 1).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert!(split_nodes(10, 0.01, 1).is_err());
        assert!(split_nodes(10, 1.0, 1).is_err());
        assert_eq!(
            split_nodes(50, 0.5, 4).unwrap(),
            split_nodes(50, 0.5, 4).unwrap()
        );
    }

    #[test]
    fn with_split_rejects_overlap() {
        let g = Graph::from_edges(&[(0, 1)], DMatrix::zeros(3, 1), DVector::zeros(3)).unwrap();
        assert!(g.clone().with_split(vec![0, 1], vec![1]).is_err());
        assert!(g.clone().with_split(vec![0], vec![3]).is_err());
        assert!(g.with_split(vec![0], vec![2]).is_ok());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_partition(n in 2usize..200, ratio in 0.05f64..0.95, seed in any::<u64>()) {
            if let Ok((train, test)) = split_nodes(n, ratio, seed) {
                prop_assert_eq!(train.len() + test.len(), n);
                let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(all.len(), n);
                prop_assert_eq!(train.len(), (ratio * n as f64).round() as usize);
            }
        }
    }
}
