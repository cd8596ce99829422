use topocast::features::{FeatureConfig, LoadSeries, WindowedDataset};
use topocast::graph::ServiceGraph;
use topocast::io::{ingest_traces, write_edges, write_traces};
use topocast::metrics::baseline_mean_predictor;
use topocast::sim::{simulate, SimSpec, TopologyKind};

#[test]
fn simulated_files_ingest_back_to_the_same_series_and_graph() {
    for topology in [TopologyKind::Chain, TopologyKind::Tree, TopologyKind::RandomDag] {
        let spec = SimSpec {
            topology,
            services: 6,
            steps: 200,
            ..SimSpec::default()
        };
        let out = simulate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (tp, ep) = (dir.path().join("t.csv"), dir.path().join("e.csv"));
        write_traces(&tp, &out.series).unwrap();
        write_edges(&ep, &out.topology.graph).unwrap();
        let (series, graph) = ingest_traces(&tp, &ep).unwrap();
        assert_eq!(series, out.series, "{topology:?}");
        assert_eq!(graph.services(), out.topology.graph.services());
        assert_eq!(graph.edges(), out.topology.graph.edges());
    }
}

#[test]
fn constant_series_gives_zero_baseline_error() {
    let services: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let values = vec![[7.0, 0.5].repeat(120); 3];
    let series = LoadSeries::new(services.clone(), vec!["rate".into(), "cpu".into()], 0, 60, values).unwrap();
    let graph = ServiceGraph::from_edges(services, &[(0, 1, 1.0), (1, 2, 0.5)]).unwrap();
    let data = WindowedDataset::prepare(&series, &graph, &FeatureConfig::default(), 4, 2).unwrap();
    let report = baseline_mean_predictor(&data, &data.test).unwrap();
    assert_eq!(report.service.mse, 0.0);
    assert_eq!(report.cluster.mse, 0.0);
    assert_eq!(report.service.r_score, None);
}
