//! Trace and edge-list CSV ingestion and emission, plus small file helpers.
//!
//! Trace CSV: `timestamp,service,<metric>...`, one row per service and
//! step. Edge CSV: `src,dst,weight`.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::LoadSeries;
use crate::graph::ServiceGraph;

/// Missing steps that are forward-filled; longer gaps are rejected.
pub const MAX_FILLED_GAP: i64 = 2;

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn ingest_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    ingest_err(path, line, e.to_string())
}

struct Row {
    ts: i64,
    line: u64,
    values: Vec<f64>,
}

/// Reads a trace CSV into a uniform-grid series over the time range every
/// service covers. Gaps of up to [`MAX_FILLED_GAP`] missing steps repeat
/// the previous observation.
pub fn read_traces(path: &Path) -> Result<LoadSeries> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 3 || &header[0] != "timestamp" || &header[1] != "service" {
        return Err(ingest_err(path, 1, "header must be timestamp,service,<metric>..."));
    }
    let metrics: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    if metrics.iter().any(String::is_empty) {
        return Err(ingest_err(path, 1, "empty metric name in header"));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let ts: i64 = record[0]
            .parse()
            .map_err(|_| ingest_err(path, line, format!("timestamp {:?} is not an integer", &record[0])))?;
        let service = record[1].to_string();
        if service.is_empty() {
            return Err(ingest_err(path, line, "empty service id"));
        }
        let values = record
            .iter()
            .skip(2)
            .zip(&metrics)
            .map(|(field, name)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(ingest_err(path, line, format!("{name} value {field:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if !rows.contains_key(&service) {
            order.push(service.clone());
        }
        rows.entry(service).or_default().push(Row { ts, line, values });
    }
    if order.is_empty() {
        return Err(format_err(path, "no trace rows"));
    }

    for service in &order {
        let r = rows.get_mut(service).expect("service recorded");
        r.sort_by_key(|row| row.ts);
        if let Some(w) = r.windows(2).find(|w| w[0].ts == w[1].ts) {
            return Err(ingest_err(path, w[1].line, format!("duplicate timestamp {} for {service}", w[1].ts)));
        }
    }
    let step = order
        .iter()
        .flat_map(|s| rows[s].windows(2).map(|w| w[1].ts - w[0].ts))
        .min()
        .ok_or_else(|| format_err(path, "need at least two timestamps per service"))?;

    let first = rows[&order[0]][0].ts;
    let mut start = i64::MIN;
    let mut end = i64::MAX;
    let mut filled: Vec<(i64, Vec<Vec<f64>>)> = Vec::with_capacity(order.len());
    for service in &order {
        let r = &rows[service];
        if (r[0].ts - first).rem_euclid(step) != 0 {
            return Err(format_err(
                path,
                format!("non-uniform grid: {service} starts at {} which is off the {step} s grid from {first}", r[0].ts),
            ));
        }
        let mut grid = vec![r[0].values.clone()];
        for w in r.windows(2) {
            let diff = w[1].ts - w[0].ts;
            if diff % step != 0 {
                return Err(format_err(
                    path,
                    format!(
                        "non-uniform grid for {service}: {} -> {} is not a multiple of {step} s",
                        w[0].ts, w[1].ts
                    ),
                ));
            }
            let missing = diff / step - 1;
            if missing > MAX_FILLED_GAP {
                return Err(ingest_err(
                    path,
                    w[1].line,
                    format!("{service} has a gap of {missing} steps between {} and {}", w[0].ts, w[1].ts),
                ));
            }
            for _ in 0..missing {
                grid.push(w[0].values.clone());
            }
            grid.push(w[1].values.clone());
        }
        start = start.max(r[0].ts);
        end = end.min(r[r.len() - 1].ts);
        filled.push((r[0].ts, grid));
    }
    if start > end {
        return Err(format_err(path, "services share no common time range"));
    }
    let steps = ((end - start) / step + 1) as usize;
    let values = filled
        .into_iter()
        .map(|(s0, grid)| {
            let offset = ((start - s0) / step) as usize;
            grid[offset..offset + steps].iter().flatten().copied().collect()
        })
        .collect();
    LoadSeries::new(order, metrics, start, step, values)
}

/// Reads an edge list against a known service set.
pub fn read_edges(path: &Path, services: &[String]) -> Result<ServiceGraph> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() != 3 || &header[0] != "src" || &header[1] != "dst" || &header[2] != "weight" {
        return Err(ingest_err(path, 1, "header must be src,dst,weight"));
    }
    let index: HashMap<&str, usize> = services.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut seen = HashMap::new();
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| ingest_err(path, line, format!("unknown service {name:?}")))
        };
        let (src, dst) = (lookup(&record[0])?, lookup(&record[1])?);
        let weight: f64 = record[2]
            .parse()
            .ok()
            .filter(|w: &f64| w.is_finite() && *w >= 0.0)
            .ok_or_else(|| ingest_err(path, line, format!("weight {:?} is not a non-negative number", &record[2])))?;
        if seen.insert((src, dst), line).is_some() {
            return Err(ingest_err(path, line, format!("duplicate edge {} -> {}", &record[0], &record[1])));
        }
        edges.push((src, dst, weight));
    }
    ServiceGraph::from_edges(services.to_vec(), &edges)
}

pub fn ingest_traces(trace_csv: &Path, edge_csv: &Path) -> Result<(LoadSeries, ServiceGraph)> {
    let series = read_traces(trace_csv)?;
    let graph = read_edges(edge_csv, series.services())?;
    Ok((series, graph))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create(path)?.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Rows ordered by step, then by service.
pub fn write_traces(path: &Path, series: &LoadSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["timestamp".to_string(), "service".to_string()];
    header.extend(series.metric_names().iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.steps() {
        let ts = series.timestamp(t).to_string();
        for (s, name) in series.services().iter().enumerate() {
            let mut rec = vec![ts.clone(), name.clone()];
            rec.extend(series.row(s, t).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_edges(path: &Path, graph: &ServiceGraph) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["src", "dst", "weight"])?;
    let names = graph.services();
    for (s, d, weight) in graph.edges() {
        w.write_record([names[s].as_str(), names[d].as_str(), &weight.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn forward_fills_short_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            "timestamp,service,rate\n0,a,1\n60,a,2\n240,a,5\n300,a,6\n0,b,1\n60,b,1\n120,b,1\n180,b,1\n240,b,1\n300,b,1\n",
        );
        let s = read_traces(&p).unwrap();
        assert_eq!(s.steps(), 6);
        assert_eq!(s.service_values(0), &[1.0, 2.0, 2.0, 2.0, 5.0, 6.0]);
        assert_eq!(s.step_seconds(), 60);
    }

    #[test]
    fn rejects_three_step_gap_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "timestamp,service,rate\n0,a,1\n60,a,2\n300,a,5\n360,a,6\n");
        match read_traces(&p) {
            Err(Error::Ingest { line, reason, .. }) => {
                assert_eq!(line, 4);
                assert!(reason.contains("gap of 3 steps"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_uniform_grid_names_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "timestamp,service,rate\n0,a,1\n60,a,2\n150,a,5\n");
        let err = read_traces(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("60 -> 150"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "timestamp,service,rate\n0,a,1\n60,a,oops\n");
        assert!(matches!(read_traces(&p), Err(Error::Ingest { line: 3, .. })));
        let p = write(dir.path(), "u.csv", "timestamp,service,rate\n0,a,1\n60,a\n");
        assert!(matches!(read_traces(&p), Err(Error::Ingest { line: 3, .. })));
        let p = write(dir.path(), "v.csv", "time,service,rate\n0,a,1\n");
        assert!(matches!(read_traces(&p), Err(Error::Ingest { line: 1, .. })));
        let p = write(dir.path(), "w.csv", "timestamp,service,rate\n0,a,1\n0,a,2\n");
        assert!(matches!(read_traces(&p), Err(Error::Ingest { line: 3, .. })));
    }

    #[test]
    fn intersects_service_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            "timestamp,service,rate\n0,a,1\n60,a,2\n120,a,3\n60,b,7\n120,b,8\n180,b,9\n",
        );
        let s = read_traces(&p).unwrap();
        assert_eq!(s.start_time(), 60);
        assert_eq!(s.service_values(0), &[2.0, 3.0]);
        assert_eq!(s.service_values(1), &[7.0, 8.0]);
    }

    #[test]
    fn edges_against_known_services() {
        let dir = tempfile::tempdir().unwrap();
        let services = vec!["a".to_string(), "b".to_string()];
        let p = write(dir.path(), "e.csv", "src,dst,weight\na,b,0.5\n");
        let g = read_edges(&p, &services).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 0.5)]);
        let p = write(dir.path(), "f.csv", "src,dst,weight\na,b,0.5\nb,zed,1\n");
        let err = read_edges(&p, &services).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 3, .. }));
        assert!(err.to_string().contains("zed"));
        let p = write(dir.path(), "g.csv", "src,dst,weight\na,b,-1\n");
        assert!(matches!(read_edges(&p, &services), Err(Error::Ingest { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_traces(Path::new("/nonexistent/traces.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn emitted_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let series = LoadSeries::new(
            vec!["x".into(), "y".into()],
            vec!["rate".into(), "cpu".into()],
            1000,
            30,
            vec![vec![0.1, 1.0 / 3.0, 2.5e-9, 7.0], vec![-0.0, 1e300, 3.0, 4.0]],
        )
        .unwrap();
        let graph = ServiceGraph::from_edges(series.services().to_vec(), &[(1, 0, 0.123456789)]).unwrap();
        let (tp, ep) = (dir.path().join("t.csv"), dir.path().join("e.csv"));
        write_traces(&tp, &series).unwrap();
        write_edges(&ep, &graph).unwrap();
        let (s2, g2) = ingest_traces(&tp, &ep).unwrap();
        assert_eq!(s2, series);
        assert_eq!(g2, graph);
    }
}
