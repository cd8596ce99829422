//! Service invocation graph: adjacency, row normalization, first-order
//! neighborhood aggregation and per-service adjacency strength.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed weighted call graph. `adjacency[i * n + j]` is the weight of the
/// edge `i -> j` (service `i` calls service `j`).
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceGraph {
    services: Vec<String>,
    adjacency: Vec<f64>,
    row_normalized: bool,
}

/// Which edges a service aggregates over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborDirection {
    /// `A`: the services `i` calls.
    #[default]
    Out,
    /// `A^T`: the services calling `i`.
    In,
    /// `(A + A^T) / 2`.
    Both,
}

impl fmt::Display for NeighborDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeighborDirection::Out => "out",
            NeighborDirection::In => "in",
            NeighborDirection::Both => "both",
        })
    }
}

impl FromStr for NeighborDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "out" => Ok(Self::Out),
            "in" => Ok(Self::In),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "neighbor_direction must be out, in or both, got {other:?}"
            ))),
        }
    }
}

/// Per-service `(row_sum + col_sum) / max_k(row_sum + col_sum)` over raw
/// weights, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyStrength(pub Vec<f64>);

impl AdjacencyStrength {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl ServiceGraph {
    pub fn new(services: Vec<String>, adjacency: Vec<f64>) -> Result<Self> {
        let n = services.len();
        if adjacency.len() != n * n {
            return Err(Error::Graph(format!(
                "adjacency has {} entries, expected {n}x{n}",
                adjacency.len()
            )));
        }
        if let Some(pos) = adjacency.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Graph(format!(
                "edge {} -> {} has invalid weight {}",
                services[pos / n],
                services[pos % n],
                adjacency[pos]
            )));
        }
        Ok(Self {
            services,
            adjacency,
            row_normalized: false,
        })
    }

    pub fn edgeless(services: Vec<String>) -> Self {
        let n = services.len();
        Self {
            services,
            adjacency: vec![0.0; n * n],
            row_normalized: false,
        }
    }

    /// Builds a graph from `(src, dst, weight)` triples; repeated edges add.
    pub fn from_edges(services: Vec<String>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = services.len();
        let mut adjacency = vec![0.0; n * n];
        for &(src, dst, w) in edges {
            if src >= n || dst >= n {
                return Err(Error::Graph(format!("edge {src} -> {dst} outside {n} services")));
            }
            adjacency[src * n + dst] += w;
        }
        Self::new(services, adjacency)
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn services(&self) -> &[String] {
        &self.services
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, src: usize, dst: usize) -> f64 {
        self.adjacency[src * self.len() + dst]
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    pub fn index_of(&self, service: &str) -> Option<usize> {
        self.services.iter().position(|s| s == service)
    }

    /// Non-zero edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        self.adjacency
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(idx, w)| (idx / n, idx % n, *w))
            .collect()
    }

    pub fn row_normalize(&self) -> Result<Self> {
        let n = self.len();
        let mut adjacency = self.adjacency.clone();
        for row in adjacency.chunks_mut(n.max(1)) {
            if row.iter().any(|w| *w < 0.0) {
                return Err(Error::Graph("negative edge weight".into()));
            }
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|w| *w /= total);
            }
        }
        Ok(Self {
            services: self.services.clone(),
            adjacency,
            row_normalized: true,
        })
    }

    /// Aggregation operator for the chosen direction, row-normalized.
    pub fn aggregation_matrix(&self, direction: NeighborDirection) -> Result<Self> {
        let n = self.len();
        let oriented = match direction {
            NeighborDirection::Out => self.adjacency.clone(),
            NeighborDirection::In => transpose(&self.adjacency, n),
            NeighborDirection::Both => {
                let t = transpose(&self.adjacency, n);
                self.adjacency.iter().zip(&t).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        };
        Self::new(self.services.clone(), oriented)?.row_normalize()
    }

    /// `h_i = sum_j A_ij x_j` for a row-major `[|V| x d]` feature matrix.
    pub fn neighborhood_aggregate(&self, features: &[f64], d: usize) -> Result<Vec<f64>> {
        let n = self.len();
        if features.len() != n * d {
            return Err(Error::shape("neighborhood_aggregate", &[n, d], &[features.len() / d.max(1), d]));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..n {
                let w = self.adjacency[i * n + j];
                if w != 0.0 {
                    for (o, x) in dst.iter_mut().zip(&features[j * d..(j + 1) * d]) {
                        *o += w * x;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Combined in+out degree strength on the un-normalized weights.
    pub fn adjacency_strength(&self) -> AdjacencyStrength {
        let n = self.len();
        let mut degree = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let w = self.adjacency[i * n + j];
                degree[i] += w;
                degree[j] += w;
            }
        }
        let max = degree.iter().copied().fold(0.0, f64::max);
        let max = if max > 0.0 { max } else { 1.0 };
        AdjacencyStrength(degree.into_iter().map(|v| v / max).collect())
    }

    /// Reorders services; `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n {
            return Err(Error::Graph("permutation length mismatch".into()));
        }
        let services = perm.iter().map(|&p| self.services[p].clone()).collect();
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
            }
        }
        Ok(Self {
            services,
            adjacency,
            row_normalized: self.row_normalized,
        })
    }
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> ServiceGraph {
        let adj = (0..n * n)
            .map(|_| if rng.random_bool(0.4) { rng.random_range(0.0..3.0) } else { 0.0 })
            .collect();
        ServiceGraph::new(names(n), adj).unwrap()
    }

    #[test]
    fn row_normalize_examples() {
        let g = ServiceGraph::new(names(3), vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0]).unwrap();
        let g = g.row_normalize().unwrap();
        assert!(g.is_row_normalized());
        assert_eq!(&g.adjacency()[..3], &[0.5, 0.5, 0.0]);
        assert_eq!(&g.adjacency()[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&g.adjacency()[6..], &[0.25, 0.0, 0.75]);
    }

    #[test]
    fn row_normalize_random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_graph(6, &mut rng).row_normalize().unwrap();
        for row in g.adjacency().chunks(6) {
            let mut s = 0.0;
            for w in row {
                s += w;
            }
            assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn negative_weight_is_rejected() {
        assert!(matches!(
            ServiceGraph::new(names(2), vec![0.0, -1.0, 0.0, 0.0]),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let g = ServiceGraph::edgeless(names(3));
        let h = g.neighborhood_aggregate(&[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(h, vec![0.0; 3]);

        let g = ServiceGraph::from_edges(names(2), &[(0, 1, 1.0)]).unwrap();
        let h = g.neighborhood_aggregate(&[5.0, 7.0], 1).unwrap();
        assert_eq!(h, vec![7.0, 0.0]);

        assert!(matches!(
            g.neighborhood_aggregate(&[1.0, 2.0, 3.0], 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn aggregate_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_graph(5, &mut rng).row_normalize().unwrap();
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = g.neighborhood_aggregate(&x, 3).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += g.weight(i, j) * x[j * 3 + c];
                }
                assert!((h[i * 3 + c] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn direction_switch() {
        let g = ServiceGraph::from_edges(names(2), &[(0, 1, 2.0)]).unwrap();
        let x = [5.0, 7.0];
        let out = g.aggregation_matrix(NeighborDirection::Out).unwrap();
        assert_eq!(out.neighborhood_aggregate(&x, 1).unwrap(), vec![7.0, 0.0]);
        let inn = g.aggregation_matrix(NeighborDirection::In).unwrap();
        assert_eq!(inn.neighborhood_aggregate(&x, 1).unwrap(), vec![0.0, 5.0]);
        let both = g.aggregation_matrix(NeighborDirection::Both).unwrap();
        assert_eq!(both.neighborhood_aggregate(&x, 1).unwrap(), vec![7.0, 5.0]);
        assert_eq!("both".parse::<NeighborDirection>().unwrap(), NeighborDirection::Both);
        assert!("sideways".parse::<NeighborDirection>().is_err());
    }

    #[test]
    fn strength_examples() {
        let g = ServiceGraph::edgeless(names(4));
        assert!(g.adjacency_strength().values().iter().all(|s| *s == 0.0));

        let star = ServiceGraph::from_edges(
            names(5),
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)],
        )
        .unwrap();
        assert_eq!(star.adjacency_strength().values(), &[1.0, 0.25, 0.25, 0.25, 0.25]);

        let isolated = ServiceGraph::from_edges(names(3), &[(0, 1, 3.0)]).unwrap();
        assert_eq!(isolated.adjacency_strength().values()[2], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn aggregation_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(5, &mut rng).row_normalize().unwrap();
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let hx = g.neighborhood_aggregate(&x, 2).unwrap();
            let hy = g.neighborhood_aggregate(&y, 2).unwrap();
            let hc = g.neighborhood_aggregate(&combo, 2).unwrap();
            for i in 0..10 {
                prop_assert!((hc[i] - (alpha * hx[i] + beta * hy[i])).abs() <= 1e-10);
            }
        }

        #[test]
        fn aggregation_is_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(6, &mut rng);
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let gp = g.permuted(&perm).unwrap();
            let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 2..p * 2 + 2].to_vec()).collect();
            let h = g.neighborhood_aggregate(&x, 2).unwrap();
            let hp = gp.neighborhood_aggregate(&xp, 2).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..2 {
                    prop_assert!((hp[new * 2 + c] - h[old * 2 + c]).abs() <= 1e-12);
                }
            }
            let s = g.adjacency_strength();
            let sp = gp.adjacency_strength();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((sp.values()[new] - s.values()[old]).abs() <= 1e-15);
            }
        }

        #[test]
        fn strength_in_unit_interval(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(7, &mut rng);
            let s = g.adjacency_strength();
            prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
            if !g.edges().is_empty() {
                let max = s.values().iter().copied().fold(0.0, f64::max);
                prop_assert_eq!(max, 1.0);
            }
        }
    }
}
