use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{FeatureConfig, LoadSeries, WindowedDataset};
use crate::graph::ServiceGraph;
use crate::model::{HeadPool, ModelConfig};

/// Three services on a chain with two metrics: a noisy sinusoid that the
/// downstream services echo with a delay.
pub fn toy_series(steps: usize, seed: u64) -> (LoadSeries, ServiceGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let services: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let mut rate = vec![vec![0.0; steps]; 3];
    for t in 0..steps {
        rate[0][t] = 10.0 + 3.0 * (t as f64 * 0.2).sin() + rng.random_range(-0.3..0.3);
        for s in 1..3 {
            let lagged = if t >= 2 { rate[s - 1][t - 2] } else { rate[s - 1][0] };
            rate[s][t] = 0.8 * lagged + rng.random_range(-0.2..0.2);
        }
    }
    let values = rate
        .iter()
        .map(|r| r.iter().flat_map(|&v| [v, v / (v + 5.0)]).collect())
        .collect();
    let series = LoadSeries::new(services.clone(), vec!["rate".into(), "cpu".into()], 0, 60, values).unwrap();
    let graph = ServiceGraph::from_edges(services, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
    (series, graph)
}

pub fn toy_model_config(window: usize, horizon: usize) -> ModelConfig {
    ModelConfig {
        window,
        horizon,
        d_in: 6,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.1,
        topology_bias: true,
        head_pool: HeadPool::Last,
    }
}

pub fn toy_dataset(steps: usize, window: usize, horizon: usize) -> WindowedDataset {
    let (series, graph) = toy_series(steps, 1);
    WindowedDataset::prepare(&series, &graph, &FeatureConfig::default(), window, horizon).unwrap()
}
