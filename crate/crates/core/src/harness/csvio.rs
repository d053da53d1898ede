use std::io::Write;
use std::path::Path;

use crate::algorithms::RunTrace;
use crate::error::{Error, Result};

use super::{GridPoint, PointResult};

pub const RAW_HEADER: [&str; 10] = [
    "run_id",
    "algo",
    "grid_id",
    "t",
    "sfo_calls",
    "grad_norm_true",
    "inner_residual_y",
    "inner_residual_z",
    "diverged",
    "wall_time_s",
];

pub const AGGREGATE_HEADER: [&str; 9] = [
    "algo",
    "grid_id",
    "t",
    "sfo_calls",
    "grad_norm_mean",
    "grad_norm_median",
    "grad_norm_std",
    "n_valid",
    "divergence_count",
];

/// Round-trip float text; exponent form for extreme magnitudes.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut csv::Writer<&mut std::fs::File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = csv::Writer::from_writer(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file_mut().flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub(crate) fn write_raw(path: &Path, point: &GridPoint, run: usize, trace: &RunTrace) -> Result<()> {
    write_atomic(path, |w| {
        w.write_record(RAW_HEADER)?;
        for r in &trace.rows {
            w.write_record([
                run.to_string(),
                point.label.clone(),
                point.grid_id.to_string(),
                r.t.to_string(),
                r.sfo.to_string(),
                opt(r.grad_norm_true),
                opt(r.inner_residual_y),
                opt(r.inner_residual_z),
                u8::from(r.diverged).to_string(),
                num(r.wall_time_s),
            ])?;
        }
        Ok(())
    })
}

/// Statistics of the true gradient norm at one recorded step.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub algo: String,
    pub grid_id: usize,
    pub t: usize,
    pub sfo_calls: u64,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub std: Option<f64>,
    pub n_valid: usize,
    pub divergence_count: usize,
}

/// Per-step statistics over the runs that did not diverge.
///
/// Diverged runs are excluded from every step and counted in
/// `divergence_count`. Missing metric cells are skipped.
pub fn aggregate(point: &GridPoint, runs: &[RunTrace]) -> Vec<AggregateRow> {
    let cost = point.cfg.cost_per_outer();
    let divergence_count = runs.iter().filter(|r| r.diverged()).count();
    let mut ts: Vec<usize> = runs.iter().flat_map(|r| r.rows.iter().map(|row| row.t)).collect();
    ts.sort_unstable();
    ts.dedup();
    let valid: Vec<&RunTrace> = runs.iter().filter(|r| !r.diverged()).collect();
    let mut cursors = vec![0usize; valid.len()];
    ts.into_iter()
        .map(|t| {
            let mut vals = Vec::with_capacity(valid.len());
            for (run, cur) in valid.iter().zip(cursors.iter_mut()) {
                while *cur < run.rows.len() && run.rows[*cur].t < t {
                    *cur += 1;
                }
                if let Some(row) = run.rows.get(*cur).filter(|row| row.t == t) {
                    if let Some(g) = row.grad_norm_true {
                        vals.push(g);
                    }
                }
            }
            let (mean, median, std) = summarize(&vals);
            AggregateRow {
                algo: point.label.clone(),
                grid_id: point.grid_id,
                t,
                sfo_calls: cost * t as u64,
                mean,
                median,
                std,
                n_valid: vals.len(),
                divergence_count,
            }
        })
        .collect()
}

fn summarize(vals: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let std = if vals.len() < 2 {
        0.0
    } else {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(median), Some(std))
}

pub(crate) fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_atomic(path, |w| {
        w.write_record(AGGREGATE_HEADER)?;
        for r in rows {
            w.write_record([
                r.algo.clone(),
                r.grid_id.to_string(),
                r.t.to_string(),
                r.sfo_calls.to_string(),
                opt(r.mean),
                opt(r.median),
                opt(r.std),
                r.n_valid.to_string(),
                r.divergence_count.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub(crate) fn write_grid_index(path: &Path, points: &[PointResult]) -> Result<()> {
    write_atomic(path, |w| {
        w.write_record(["grid_id", "algo", "label", "outer_steps", "inner_steps", "batch", "params", "score"])?;
        for p in points {
            let params: Vec<String> = p.point.params.iter().map(|(n, v)| format!("{n}={}", num(*v))).collect();
            w.write_record([
                p.point.grid_id.to_string(),
                p.point.cfg.algo.name().to_string(),
                p.point.label.clone(),
                p.point.cfg.outer_steps.to_string(),
                p.point.cfg.inner_steps.to_string(),
                p.point.cfg.batch.to_string(),
                params.join(";"),
                num(p.score()),
            ])?;
        }
        Ok(())
    })
}

/// One line of a raw CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub run_id: usize,
    pub algo: String,
    pub grid_id: usize,
    pub t: usize,
    pub sfo_calls: u64,
    pub grad_norm_true: Option<f64>,
    pub inner_residual_y: Option<f64>,
    pub inner_residual_z: Option<f64>,
    pub diverged: bool,
    pub wall_time_s: f64,
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RAW_HEADER {
        return Err(Error::config(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str, v: &str| Error::config(format!("{}: bad {what} '{v}'", path.display()));
    let float = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|_| bad(what, s))
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(RawRow {
            run_id: rec[0].parse().map_err(|_| bad("run_id", &rec[0]))?,
            algo: rec[1].to_string(),
            grid_id: rec[2].parse().map_err(|_| bad("grid_id", &rec[2]))?,
            t: rec[3].parse().map_err(|_| bad("t", &rec[3]))?,
            sfo_calls: rec[4].parse().map_err(|_| bad("sfo_calls", &rec[4]))?,
            grad_norm_true: float(&rec[5], "grad_norm_true")?,
            inner_residual_y: float(&rec[6], "inner_residual_y")?,
            inner_residual_z: float(&rec[7], "inner_residual_z")?,
            diverged: &rec[8] == "1",
            wall_time_s: float(&rec[9], "wall_time_s")?.unwrap_or(0.0),
        });
    }
    Ok(out)
}
