//! Metric rows, CSV persistence and cross-seed aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RAW_HEADER: &str = "seed,round,device,phase,metric,value";
pub const SMOOTHING_WINDOW: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: u64,
    pub device: u32,
    pub phase: Phase,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, round: u64, device: u32, phase: Phase, metric: &str, value: f64) -> Self {
        MetricsRow {
            seed,
            round,
            device,
            phase,
            metric: metric.to_string(),
            value,
        }
    }
}

pub fn write_csv_to<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RAW_HEADER.split(','))
        .and_then(|_| rows.iter().try_for_each(|r| w.serialize(r)))
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(std::io::BufWriter::new(file), rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != RAW_HEADER {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Median (mean of the middle pair for even counts), minimum and maximum.
pub fn order_stats(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Some((median, v[0], v[n - 1]))
}

/// Trailing moving average; the first `window - 1` points average what is available.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub round: u64,
    pub device: u32,
    pub phase: Phase,
    pub metric: String,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

type SeriesKey = (u32, Phase, String);

/// Per-round median/min/max across seeds. Test rewards also get a `reward_smoothed` series,
/// smoothed per seed before aggregation.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut per_seed: BTreeMap<(SeriesKey, u64), Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        per_seed
            .entry(((r.device, r.phase, r.metric.clone()), r.seed))
            .or_default()
            .push((r.round, r.value));
    }
    let smoothed: Vec<_> = per_seed
        .iter()
        .filter(|(((_, phase, metric), _), _)| *phase == Phase::Test && metric == "reward")
        .map(|(((device, phase, _), seed), series)| {
            let values: Vec<f64> = series.iter().map(|p| p.1).collect();
            let s = smooth(&values, SMOOTHING_WINDOW);
            let pts = series.iter().zip(s).map(|(p, v)| (p.0, v)).collect::<Vec<_>>();
            (((*device, *phase, "reward_smoothed".to_string()), *seed), pts)
        })
        .collect();
    per_seed.extend(smoothed);

    let mut cells: BTreeMap<(u32, Phase, String, u64), Vec<f64>> = BTreeMap::new();
    for (((device, phase, metric), _), series) in per_seed {
        for (round, v) in series {
            cells.entry((device, phase, metric.clone(), round)).or_default().push(v);
        }
    }
    let mut out: Vec<AggregateRow> = cells
        .into_iter()
        .map(|((device, phase, metric, round), values)| {
            let (median, min, max) = order_stats(&values).expect("non-empty cell");
            AggregateRow {
                round,
                device,
                phase,
                metric,
                median,
                min,
                max,
                seeds: values.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.round, a.device, a.phase, &a.metric).cmp(&(b.round, b.device, b.phase, &b.metric))
    });
    out
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
