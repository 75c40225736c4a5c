//! Seed-aggregated statistics for `summary.json`.

use std::collections::BTreeMap;

use gpmap_core::{Experiment, MetricRecord};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct SeriesPoint {
    pub mode: String,
    pub metric: String,
    pub step: u64,
    pub n_seeds: usize,
    pub mean: f64,
    /// Standard error of the mean over seeds; absent for a single seed.
    pub se: Option<f64>,
}

/// One row of the edge-count table.
#[derive(Debug, Clone, Serialize)]
pub struct EdgeRow {
    pub model: String,
    pub extra_edges: Option<usize>,
    pub n_seeds: usize,
    pub mean_mse: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    /// `complete`, or `partial` when the run stopped on an error.
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub series: Vec<SeriesPoint>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub edges_table: Vec<EdgeRow>,
}

pub fn mean_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

impl Summary {
    pub fn build(experiment: Experiment, records: &[MetricRecord], error: Option<&str>) -> Summary {
        let mut groups: BTreeMap<(&str, &str, u64), Vec<f64>> = BTreeMap::new();
        for r in records {
            groups.entry((&r.mode, &r.metric, r.step)).or_default().push(r.value);
        }
        let series: Vec<SeriesPoint> = groups
            .iter()
            .map(|((mode, metric, step), v)| {
                let (mean, se) = mean_se(v);
                SeriesPoint { mode: mode.to_string(), metric: metric.to_string(), step: *step, n_seeds: v.len(), mean, se }
            })
            .collect();
        let edges_table = if experiment == Experiment::Edges { edge_table(&series) } else { Vec::new() };
        Summary {
            experiment,
            status: if error.is_some() { "partial" } else { "complete" },
            error: error.map(str::to_string),
            series,
            edges_table,
        }
    }
}

fn edge_table(series: &[SeriesPoint]) -> Vec<EdgeRow> {
    let mut rows: Vec<EdgeRow> = series
        .iter()
        .filter(|p| p.metric == "mse")
        .map(|p| EdgeRow {
            model: p.mode.clone(),
            extra_edges: p.mode.strip_prefix("tsgp+").and_then(|n| n.parse().ok()),
            n_seeds: p.n_seeds,
            mean_mse: p.mean,
            se: p.se,
        })
        .collect();
    let rank = |r: &EdgeRow| match (r.model.as_str(), r.extra_edges) {
        ("independent", _) => (0, 0),
        (_, Some(n)) => (1, n),
        _ => (2, 0),
    };
    rows.sort_by_key(rank);
    rows
}
