//! Per-frame K-nearest-neighbour graphs over token features.
//!
//! Neighbour lists are ordered best-first by the chosen metric; equal scores
//! are ordered by ascending node index, so the graph is a pure function of the
//! feature matrix. Self-matches are never selected.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, euclidean_distance, Matrix};

pub const DEFAULT_K: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => cosine_similarity(a, b),
            Metric::Euclidean => euclidean_distance(a, b),
        }
    }

    /// Orders two scores best-first: larger similarity or smaller distance.
    fn rank(self, a: f64, b: f64) -> Ordering {
        match self {
            Metric::Cosine => b.total_cmp(&a),
            Metric::Euclidean => a.total_cmp(&b),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric {other:?} (expected cosine or euclidean)"))),
        }
    }
}

/// Token features of one frame laid out on a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub features: Matrix,
    pub coords: Vec<[f64; 2]>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    /// Tokens are in row-major grid order; token `row * grid_w + col` sits at
    /// the centre of its cell in normalised `[0,1]²` coordinates.
    pub fn new(features: Matrix, grid_h: usize, grid_w: usize) -> Result<Self> {
        if features.rows() != grid_h * grid_w {
            return Err(Error::shape(
                "TokenGrid::new",
                format!("{} tokens", features.rows()),
                format!("{grid_h}x{grid_w} grid"),
            ));
        }
        let coords = (0..grid_h * grid_w)
            .map(|i| {
                let (row, col) = (i / grid_w, i % grid_w);
                [(col as f64 + 0.5) / grid_w as f64, (row as f64 + 0.5) / grid_h as f64]
            })
            .collect();
        Ok(TokenGrid {
            features,
            coords,
            grid_h,
            grid_w,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Directed K-NN graph stored as flat `L × K` edge arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n_nodes: usize,
    k: usize,
    neighbors: Vec<usize>,
    scores: Vec<f64>,
    metric: Metric,
}

impl NeighborGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Similarities (cosine) or distances (euclidean) matching `neighbors(i)`.
    pub fn scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    pub fn edge_count(&self) -> usize {
        self.n_nodes * self.k
    }

    /// Applies a node relabelling `perm[old] = new`.
    pub fn relabel(&self, perm: &[usize]) -> NeighborGraph {
        let mut neighbors = vec![0; self.neighbors.len()];
        let mut scores = vec![0.0; self.scores.len()];
        for i in 0..self.n_nodes {
            let dst = perm[i] * self.k;
            for (s, (&j, &score)) in self.neighbors(i).iter().zip(self.scores(i)).enumerate() {
                neighbors[dst + s] = perm[j];
                scores[dst + s] = score;
            }
        }
        NeighborGraph {
            neighbors,
            scores,
            ..self.clone()
        }
    }
}

pub fn edge_count(g: &NeighborGraph) -> usize {
    g.edge_count()
}

/// Brute-force K-NN over the rows of `features`.
pub fn knn_graph(features: &Matrix, k: usize, metric: Metric) -> Result<NeighborGraph> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k >= n {
        return Err(Error::invalid(format!("k = {k} needs at least {} tokens, got {n}", k + 1)));
    }
    features.ensure_finite("graph features")?;

    let mut neighbors = Vec::with_capacity(n * k);
    let mut scores = Vec::with_capacity(n * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        let xi = features.row(i);
        candidates.extend((0..n).filter(|&j| j != i).map(|j| (metric.score(xi, features.row(j)), j)));
        candidates.sort_by(|a, b| metric.rank(a.0, b.0).then(a.1.cmp(&b.1)));
        for &(s, j) in &candidates[..k] {
            neighbors.push(j);
            scores.push(s);
        }
    }
    Ok(NeighborGraph {
        n_nodes: n,
        k,
        neighbors,
        scores,
        metric,
    })
}

/// Smallest gap between any two candidate scores of the same query row.
/// Neighbour selection is permutation-equivariant when this is positive;
/// with ties the ascending-index rule depends on the labelling.
pub fn min_score_gap(features: &Matrix, metric: Metric) -> f64 {
    let n = features.rows();
    let mut gap = f64::INFINITY;
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| metric.score(features.row(i), features.row(j))));
        row.sort_by(f64::total_cmp);
        for w in row.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

pub fn build_knn_graph(tokens: &TokenGrid, k: usize, metric: Metric) -> Result<NeighborGraph> {
    knn_graph(&tokens.features, k, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub index: usize,
    pub coord: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDump {
    pub query: usize,
    pub coord: [f64; 2],
    pub neighbors: Vec<NeighborEntry>,
}

pub fn dump_neighbors(g: &NeighborGraph, tokens: &TokenGrid, query: usize) -> Result<NeighborDump> {
    if query >= g.n_nodes() {
        return Err(Error::invalid(format!("query {query} out of range for {} tokens", g.n_nodes())));
    }
    if tokens.len() != g.n_nodes() {
        return Err(Error::shape(
            "dump_neighbors",
            format!("graph of {} nodes", g.n_nodes()),
            format!("{} tokens", tokens.len()),
        ));
    }
    let neighbors = g
        .neighbors(query)
        .iter()
        .zip(g.scores(query))
        .map(|(&index, &score)| NeighborEntry {
            index,
            coord: tokens.coords[index],
            score,
        })
        .collect();
    Ok(NeighborDump {
        query,
        coord: tokens.coords[query],
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_tokens() -> Matrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[s, s]])
    }

    #[test]
    fn hand_example_with_tie() {
        let g = knn_graph(&three_tokens(), 1, Metric::Cosine).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(1), &[2]);
        // 0 and 1 tie at 1/sqrt(2); the lower index wins.
        assert_eq!(g.neighbors(2), &[0]);
    }

    #[test]
    fn full_neighbourhood_when_k_is_l_minus_1() {
        let x = Matrix::from_fn(5, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0 + 0.1 * r as f64);
        let g = knn_graph(&x, 4, Metric::Euclidean).unwrap();
        for i in 0..5 {
            let mut got = g.neighbors(i).to_vec();
            got.sort();
            let expect: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn identical_rows_pick_each_other() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[5.0, -1.0], &[1.0, 2.0], &[0.0, 9.0]]);
        let g = knn_graph(&x, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(2), &[0]);
        assert_eq!(g.scores(0), &[0.0]);
    }

    #[test]
    fn invalid_k() {
        let x = three_tokens();
        assert!(knn_graph(&x, 0, Metric::Cosine).is_err());
        assert!(knn_graph(&x, 3, Metric::Cosine).is_err());
    }

    #[test]
    fn edge_counts() {
        for &(l, k, e) in &[(196usize, 9usize, 1764usize), (2, 1, 2), (64, 9, 576)] {
            let x = Matrix::from_fn(l, 2, |r, c| (r as f64 + 1.0) * (c as f64 + 0.5));
            assert_eq!(edge_count(&knn_graph(&x, k, Metric::Euclidean).unwrap()), e);
        }
    }

    #[test]
    fn token_coordinates_are_cell_centres() {
        let grid = TokenGrid::new(Matrix::zeros(6, 1), 2, 3).unwrap();
        assert_eq!(grid.coords[0], [0.5 / 3.0, 0.25]);
        assert_eq!(grid.coords[5], [2.5 / 3.0, 0.75]);
        assert!(TokenGrid::new(Matrix::zeros(5, 1), 2, 3).is_err());
    }

    #[test]
    fn dump_on_two_by_two_grid() {
        let x = Matrix::from_rows(&[&[1.0, 0.2], &[0.3, 1.0], &[-1.0, 0.5], &[0.4, -0.9]]);
        let grid = TokenGrid::new(x, 2, 2).unwrap();
        let g = build_knn_graph(&grid, 3, Metric::Cosine).unwrap();
        let dump = dump_neighbors(&g, &grid, 1).unwrap();
        assert_eq!(dump.neighbors.len(), 3);
        let mut idx: Vec<usize> = dump.neighbors.iter().map(|n| n.index).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 2, 3]);
        for (entry, &score) in dump.neighbors.iter().zip(g.scores(1)) {
            assert_eq!(entry.score.to_bits(), score.to_bits());
            assert_eq!(entry.coord, grid.coords[entry.index]);
        }
        assert!(dump_neighbors(&g, &grid, 4).is_err());
        let json = serde_json::to_value(&dump).unwrap();
        assert!(json["neighbors"][0]["coord"].is_array());
    }

    /// Full-sort oracle with the same tie rule.
    fn oracle_topk(x: &Matrix, i: usize, k: usize, metric: Metric) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = Vec::new();
        for j in 0..x.rows() {
            if j == i {
                continue;
            }
            let s = match metric {
                Metric::Cosine => {
                    let (a, b) = (x.row(i), x.row(j));
                    let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
                    -(d / (na * nb))
                }
                Metric::Euclidean => x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            all.push((s, j));
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_full_sort_oracle(seed in any::<u64>(), l in 2usize..=64, c in 1usize..=16, cosine in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::random_uniform(l, c, 1.0, &mut rng);
            let k = 1 + (seed as usize) % (l - 1);
            let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
            let g = knn_graph(&x, k, metric).unwrap();
            for i in 0..l {
                prop_assert!(!g.neighbors(i).contains(&i));
                prop_assert_eq!(g.neighbors(i).to_vec(), oracle_topk(&x, i, k, metric));
                for w in g.scores(i).windows(2) {
                    match metric {
                        Metric::Cosine => prop_assert!(w[0] >= w[1]),
                        Metric::Euclidean => prop_assert!(w[0] <= w[1]),
                    }
                }
            }
        }

        #[test]
        fn relabelling_commutes_with_construction(seed in any::<u64>(), l in 3usize..=24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::random_uniform(l, 6, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..l).collect();
            perm.shuffle(&mut rng);
            let mut px = Matrix::zeros(l, 6);
            for i in 0..l {
                px.row_mut(perm[i]).copy_from_slice(x.row(i));
            }
            let k = 1 + (seed as usize) % (l - 1);
            let g = knn_graph(&x, k, Metric::Cosine).unwrap();
            let pg = knn_graph(&px, k, Metric::Cosine).unwrap();
            prop_assert_eq!(pg, g.relabel(&perm));
        }
    }
}
