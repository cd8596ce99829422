//! Synthetic microservice traces with known call-graph propagation.
//!
//! Entry services carry an exogenous request rate (diurnal sinusoid, AR(1)
//! noise, decaying bursts). Every other service receives the weighted,
//! lagged sum of its callers' rates. CPU, memory and latency are derived
//! per service from its rate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LoadSeries;
use crate::graph::ServiceGraph;
use crate::seed;

pub const METRICS: [&str; 4] = ["rate", "cpu", "memory", "latency"];
/// Saturation level of the CPU curve.
pub const CPU_CEILING: f64 = 0.8;
/// Latency at zero utilization, milliseconds.
pub const BASE_LATENCY_MS: f64 = 10.0;
pub const UTILIZATION_CLAMP: f64 = 0.95;
/// Per-step decay of a burst's multiplicative excess.
pub const BURST_DECAY: f64 = 0.8;
/// Capacity is this factor range times the service's mean rate.
pub const CAPACITY_FACTOR: (f64, f64) = (1.5, 3.0);
pub const MEMORY_BASE_MB: f64 = 512.0;
pub const MEMORY_AR: f64 = 0.995;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Chain,
    Tree,
    #[default]
    RandomDag,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Chain => "chain",
            Self::Tree => "tree",
            Self::RandomDag => "random_dag",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Self::Chain),
            "tree" => Ok(Self::Tree),
            "random_dag" => Ok(Self::RandomDag),
            other => Err(Error::Config(format!(
                "topology must be chain, tree or random_dag, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub topology: TopologyKind,
    pub services: usize,
    pub steps: usize,
    pub step_seconds: i64,
    pub start_time: i64,
    /// Edge probability for `random_dag`.
    pub edge_prob: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub lag_min: usize,
    pub lag_max: usize,
    pub base_rate: f64,
    pub amplitude: f64,
    /// Diurnal period in steps.
    pub period: f64,
    /// AR(1) coefficient of the entry noise. The innovation enters through
    /// the coefficient, so zero switches the component off.
    pub ar_coef: f64,
    /// Expected burst arrivals per step per entry service.
    pub burst_rate: f64,
    /// Multiplicative excess added per burst arrival.
    pub burst_magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            topology: TopologyKind::RandomDag,
            services: 12,
            steps: 3000,
            step_seconds: 60,
            start_time: 0,
            edge_prob: 0.3,
            weight_min: 0.4,
            weight_max: 0.9,
            lag_min: 1,
            lag_max: 4,
            base_rate: 100.0,
            amplitude: 30.0,
            period: 288.0,
            ar_coef: 0.8,
            burst_rate: 0.01,
            burst_magnitude: 1.0,
            noise_std: 3.0,
            seed: 42,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.services == 0 || self.steps == 0 || self.step_seconds <= 0 {
            return bad("services, steps and step_seconds must be positive");
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad("edge_prob must lie in [0, 1]");
        }
        if !(0.0 <= self.weight_min && self.weight_min <= self.weight_max && self.weight_max.is_finite()) {
            return bad("edge weights need 0 <= weight_min <= weight_max");
        }
        if self.lag_min < 1 || self.lag_min > self.lag_max {
            return bad("lags need 1 <= lag_min <= lag_max");
        }
        if !(0.0..1.0).contains(&self.ar_coef) {
            return bad("ar_coef must lie in [0, 1)");
        }
        if !(self.period > 0.0) {
            return bad("period must be positive");
        }
        let nonneg = [self.base_rate, self.amplitude, self.burst_rate, self.burst_magnitude, self.noise_std];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("rates, amplitude, burst settings and noise must be finite and non-negative");
        }
        Ok(())
    }
}

pub fn service_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("svc-{i:02}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTopology {
    pub graph: ServiceGraph,
    /// `[src * n + dst]`, zero where there is no edge.
    pub lags: Vec<usize>,
}

impl SimTopology {
    pub fn lag(&self, src: usize, dst: usize) -> usize {
        self.lags[src * self.graph.len() + dst]
    }

    /// Services without incoming edges.
    pub fn entries(&self) -> Vec<usize> {
        let n = self.graph.len();
        (0..n)
            .filter(|&j| (0..n).all(|i| self.graph.weight(i, j) == 0.0))
            .collect()
    }
}

pub fn generate_topology(spec: &SimSpec) -> Result<SimTopology> {
    spec.validate()?;
    let n = spec.services;
    let mut rng = seed::stream(spec.seed, "sim/topology");
    let mut pairs = Vec::new();
    match spec.topology {
        TopologyKind::Chain => pairs.extend((1..n).map(|j| (j - 1, j))),
        TopologyKind::Tree => {
            for child in 1..n {
                let parent = rng.random_range(0..child);
                pairs.push((child, parent));
            }
        }
        TopologyKind::RandomDag => {
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < spec.edge_prob {
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    let mut lags = vec![0; n * n];
    let mut edges = Vec::with_capacity(pairs.len());
    for (src, dst) in pairs {
        let w = rng.random_range(spec.weight_min..=spec.weight_max);
        lags[src * n + dst] = rng.random_range(spec.lag_min..=spec.lag_max);
        edges.push((src, dst, w));
    }
    Ok(SimTopology {
        graph: ServiceGraph::from_edges(service_names(n), &edges)?,
        lags,
    })
}

/// Request rates `[service][step]`. With `silence = Some((s, t0))` entry
/// service `s` emits zero traffic from output step `t0` on; every random
/// draw is unchanged, so the two runs differ only through propagation.
pub fn generate_rates(topology: &SimTopology, spec: &SimSpec, silence: Option<(usize, usize)>) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = topology.graph.len();
    let burn = spec.lag_max;
    let total = burn + spec.steps;
    let mut rng = seed::stream(spec.seed, "sim/rates");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let bursts = (spec.burst_rate > 0.0).then(|| Poisson::new(spec.burst_rate).expect("positive rate"));
    let entries = topology.entries();
    let is_entry: Vec<bool> = (0..n).map(|s| entries.contains(&s)).collect();
    let callers: Vec<Vec<(usize, f64, usize)>> = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| topology.graph.weight(i, j) > 0.0)
                .map(|i| (i, topology.graph.weight(i, j), topology.lag(i, j)))
                .collect()
        })
        .collect();

    let mut rate = vec![vec![0.0; total]; n];
    let mut ar = vec![0.0; n];
    let mut burst = vec![0.0; n];
    for u in 0..total {
        let t = u as f64 - burn as f64;
        for s in 0..n {
            let eps: f64 = unit.sample(&mut rng);
            let arrivals = bursts.as_ref().map_or(0.0, |p| p.sample(&mut rng));
            let value = if is_entry[s] {
                ar[s] = spec.ar_coef * (ar[s] + spec.noise_std * eps);
                burst[s] = BURST_DECAY * burst[s] + spec.burst_magnitude * arrivals;
                let level = spec.base_rate + spec.amplitude * (std::f64::consts::TAU * t / spec.period).sin() + ar[s];
                let silenced = matches!(silence, Some((q, t0)) if q == s && u >= burn + t0);
                if silenced {
                    0.0
                } else {
                    level * (1.0 + burst[s])
                }
            } else {
                let inflow: f64 = callers[s]
                    .iter()
                    .map(|&(i, w, lag)| w * rate[i][u.saturating_sub(lag)])
                    .sum();
                inflow + spec.noise_std * eps
            };
            rate[s][u] = value.max(0.0);
        }
    }
    Ok(rate.into_iter().map(|r| r[burn..].to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub topology: SimTopology,
    pub series: LoadSeries,
    /// Requests per step at which utilization reaches one.
    pub capacities: Vec<f64>,
}

/// Rates plus derived `cpu`, `memory` and `latency`, metric order
/// `[rate, cpu, memory, latency]`.
pub fn generate_traces(topology: &SimTopology, spec: &SimSpec) -> Result<SimOutput> {
    let rates = generate_rates(topology, spec, None)?;
    let mut rng = seed::stream(spec.seed, "sim/metrics");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let rel_noise = spec.noise_std / spec.base_rate.max(1.0);
    let mut capacities = Vec::with_capacity(rates.len());
    let mut values = Vec::with_capacity(rates.len());
    for r in &rates {
        let mean = (r.iter().sum::<f64>() / r.len() as f64).max(1.0);
        let capacity = mean * rng.random_range(CAPACITY_FACTOR.0..=CAPACITY_FACTOR.1);
        capacities.push(capacity);
        let half = capacity / 2.0;
        let mut drift = 0.0;
        let mut block = Vec::with_capacity(r.len() * METRICS.len());
        for &rate in r {
            let (e_cpu, e_mem, e_lat): (f64, f64, f64) =
                (unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
            let cpu = CPU_CEILING * rate / (rate + half) + CPU_CEILING * rel_noise * e_cpu;
            drift = MEMORY_AR * drift + spec.noise_std * e_mem;
            let util = (rate / capacity).min(UTILIZATION_CLAMP);
            let latency = BASE_LATENCY_MS / (1.0 - util) + BASE_LATENCY_MS * rel_noise * e_lat;
            block.extend([rate, cpu.max(0.0), (MEMORY_BASE_MB + drift).max(0.0), latency.max(0.0)]);
        }
        values.push(block);
    }
    let series = LoadSeries::new(
        topology.graph.services().to_vec(),
        METRICS.iter().map(|m| m.to_string()).collect(),
        spec.start_time,
        spec.step_seconds,
        values,
    )?;
    Ok(SimOutput {
        topology: topology.clone(),
        series,
        capacities,
    })
}

pub fn simulate(spec: &SimSpec) -> Result<SimOutput> {
    let topology = generate_topology(spec)?;
    generate_traces(&topology, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMeta {
    pub src: String,
    pub dst: String,
    pub weight: f64,
    pub lag: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimFixtures {
    pub cpu_ceiling: f64,
    pub cpu_half_saturation: String,
    pub base_latency_ms: f64,
    pub utilization_clamp: f64,
    pub burst_decay: f64,
    pub capacity_factor: (f64, f64),
    pub memory_base_mb: f64,
    pub memory_ar: f64,
    pub burn_in_steps: usize,
}

/// Self-description written next to simulated traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub spec: SimSpec,
    pub metrics: Vec<String>,
    pub services: Vec<String>,
    pub edges: Vec<EdgeMeta>,
    pub capacities: Vec<f64>,
    pub fixtures: SimFixtures,
}

impl SimOutput {
    pub fn metadata(&self, spec: &SimSpec) -> SimMetadata {
        let services = self.topology.graph.services().to_vec();
        SimMetadata {
            spec: spec.clone(),
            metrics: METRICS.iter().map(|m| m.to_string()).collect(),
            edges: self
                .topology
                .graph
                .edges()
                .into_iter()
                .map(|(s, d, w)| EdgeMeta {
                    src: services[s].clone(),
                    dst: services[d].clone(),
                    weight: w,
                    lag: self.topology.lag(s, d),
                })
                .collect(),
            services,
            capacities: self.capacities.clone(),
            fixtures: SimFixtures {
                cpu_ceiling: CPU_CEILING,
                cpu_half_saturation: "capacity / 2".into(),
                base_latency_ms: BASE_LATENCY_MS,
                utilization_clamp: UTILIZATION_CLAMP,
                burst_decay: BURST_DECAY,
                capacity_factor: CAPACITY_FACTOR,
                memory_base_mb: MEMORY_BASE_MB,
                memory_ar: MEMORY_AR,
                burn_in_steps: spec.lag_max,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(topology: TopologyKind, services: usize) -> SimSpec {
        SimSpec {
            topology,
            services,
            steps: 200,
            noise_std: 0.0,
            burst_rate: 0.0,
            ..SimSpec::default()
        }
    }

    #[test]
    fn chain_edges() {
        let t = generate_topology(&quiet(TopologyKind::Chain, 3)).unwrap();
        let edges: Vec<(usize, usize)> = t.graph.edges().into_iter().map(|(s, d, _)| (s, d)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert_eq!(t.entries(), vec![0]);
    }

    #[test]
    fn single_service_is_edgeless() {
        for kind in [TopologyKind::Chain, TopologyKind::Tree, TopologyKind::RandomDag] {
            let t = generate_topology(&quiet(kind, 1)).unwrap();
            assert!(t.graph.edges().is_empty());
        }
    }

    #[test]
    fn tree_points_child_to_earlier_parent() {
        let t = generate_topology(&quiet(TopologyKind::Tree, 10)).unwrap();
        let edges = t.graph.edges();
        assert_eq!(edges.len(), 9);
        for child in 1..10 {
            let out: Vec<_> = edges.iter().filter(|e| e.0 == child).collect();
            assert_eq!(out.len(), 1);
            assert!(out[0].1 < child);
        }
    }

    fn has_cycle(n: usize, edges: &[(usize, usize, f64)]) -> bool {
        // Kahn's algorithm: a cycle leaves nodes with positive in-degree.
        let mut indeg = vec![0; n];
        for e in edges {
            indeg[e.1] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for e in edges.iter().filter(|e| e.0 == v) {
                indeg[e.1] -= 1;
                if indeg[e.1] == 0 {
                    queue.push(e.1);
                }
            }
        }
        seen != n
    }

    #[test]
    fn random_dags_are_acyclic_and_upper_triangular() {
        for seed in 0..20 {
            let spec = SimSpec {
                seed,
                edge_prob: 0.5,
                ..quiet(TopologyKind::RandomDag, 12)
            };
            let t = generate_topology(&spec).unwrap();
            let edges = t.graph.edges();
            assert!(edges.iter().all(|e| e.0 < e.1));
            assert!(!has_cycle(12, &edges));
            assert!(edges.iter().all(|e| (0.4..=0.9).contains(&e.2)));
            assert!(edges.iter().all(|e| (1..=4).contains(&t.lag(e.0, e.1))));
        }
    }

    #[test]
    fn pure_propagation_is_exact() {
        let spec = SimSpec {
            weight_min: 1.0,
            weight_max: 1.0,
            lag_min: 2,
            lag_max: 2,
            ..quiet(TopologyKind::Chain, 2)
        };
        let t = generate_topology(&spec).unwrap();
        let r = generate_rates(&t, &spec, None).unwrap();
        for step in 2..spec.steps {
            assert_eq!(r[1][step], r[0][step - 2]);
        }
    }

    #[test]
    fn entry_rate_constant_without_variation() {
        let spec = SimSpec {
            amplitude: 0.0,
            ar_coef: 0.0,
            burst_rate: 0.0,
            noise_std: 5.0,
            ..quiet(TopologyKind::Chain, 3)
        };
        let t = generate_topology(&spec).unwrap();
        let r = generate_rates(&t, &spec, None).unwrap();
        assert!(r[0].iter().all(|&v| v == spec.base_rate));
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let (mut va, mut vb) = (0.0, 0.0);
        for i in 0..a.len() {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
        }
        cov / (va * vb).sqrt()
    }

    #[test]
    fn cross_correlation_peaks_at_lag() {
        let spec = SimSpec {
            lag_min: 3,
            lag_max: 3,
            amplitude: 0.0,
            ar_coef: 0.3,
            noise_std: 20.0,
            burst_rate: 0.05,
            steps: 2000,
            ..SimSpec::default()
        };
        let spec = SimSpec {
            topology: TopologyKind::Chain,
            services: 2,
            ..spec
        };
        let t = generate_topology(&spec).unwrap();
        let r = generate_rates(&t, &spec, None).unwrap();
        let max_k = 8;
        let corr: Vec<f64> = (0..=max_k)
            .map(|k| correlation(&r[0][..spec.steps - max_k], &r[1][k..spec.steps - max_k + k]))
            .collect();
        let best = (0..=max_k).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap();
        assert_eq!(best, 3, "{corr:?}");
    }

    #[test]
    fn deterministic_and_non_negative() {
        let spec = SimSpec {
            steps: 500,
            ..SimSpec::default()
        };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimSpec { seed: 7, ..spec.clone() }).unwrap();
        assert_ne!(a.series, c.series);
        for s in 0..a.series.n_services() {
            for step in 0..a.series.steps() {
                assert!(a.series.value(s, step, 0) >= 0.0);
                assert!(a.series.value(s, step, 3).is_finite());
            }
        }
        assert_eq!(a.series.metric_names(), &["rate", "cpu", "memory", "latency"]);
    }

    #[test]
    fn silencing_an_entry_is_causal() {
        let spec = SimSpec {
            steps: 400,
            lag_min: 2,
            lag_max: 5,
            ..SimSpec::default()
        };
        let t = generate_topology(&spec).unwrap();
        let entry = t.entries()[0];
        let t0 = 250;
        let base = generate_rates(&t, &spec, None).unwrap();
        let cut = generate_rates(&t, &spec, Some((entry, t0))).unwrap();
        for s in 0..spec.services {
            let horizon = if s == entry { t0 } else { t0 + spec.lag_min };
            assert_eq!(base[s][..horizon], cut[s][..horizon]);
        }
        assert!(cut[entry][t0..].iter().all(|&v| v == 0.0));
        let downstream = (0..spec.services).find(|&j| t.graph.weight(entry, j) > 0.0).unwrap();
        assert_ne!(base[downstream], cut[downstream]);
    }

    #[test]
    fn spec_validation() {
        let bad = SimSpec {
            lag_min: 0,
            ..SimSpec::default()
        };
        assert!(matches!(generate_topology(&bad), Err(Error::Parameter(_))));
        let bad = SimSpec {
            ar_coef: 1.0,
            ..SimSpec::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("tree".parse::<TopologyKind>().unwrap(), TopologyKind::Tree);
        assert!("ring".parse::<TopologyKind>().is_err());
    }

    #[test]
    fn metadata_lists_edges_with_lags() {
        let spec = SimSpec {
            steps: 50,
            ..quiet(TopologyKind::Chain, 3)
        };
        let out = simulate(&spec).unwrap();
        let meta = out.metadata(&spec);
        assert_eq!(meta.edges.len(), 2);
        assert_eq!(meta.edges[0].src, "svc-00");
        assert_eq!(meta.edges[0].lag, out.topology.lag(0, 1));
        assert_eq!(meta.capacities.len(), 3);
        let json = serde_json::to_string(&meta).unwrap();
        let back: SimMetadata = serde_json::from_str(&json).unwrap();
        assert_eq!(back, meta);
    }
}
