//! Text formats read and written by the command-line tool.

use std::io::{Read, Write};

use serde::Deserialize;
use thiserror::Error;

use crate::allocator::{AllocError, TaskProbabilityDistribution};
use crate::cost_model::{BenchmarkSample, CostModel, CostModelError};
use crate::markov::{MarkovChain, MarkovError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Model(#[from] CostModelError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| IoError::Parse { line, msg: format!("`{}`: {e}", s.trim()) })
}

/// Task probabilities, either a JSON array or one value per line. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_probabilities(text: &str) -> Result<TaskProbabilityDistribution> {
    let trimmed = text.trim_start();
    let values: Vec<f64> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| parse_f64(l, i + 1))
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(AllocError::EmptyDistribution.into());
    }
    Ok(TaskProbabilityDistribution::new(values)?)
}

pub fn write_probabilities<W: Write>(dist: &TaskProbabilityDistribution, mut out: W) -> Result<()> {
    for p in dist.probabilities() {
        writeln!(out, "{p}")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct BenchmarkRow {
    w: f64,
    t_seconds: f64,
}

/// Benchmark timings as CSV with header `w,t_seconds`.
pub fn parse_benchmark_csv<R: Read>(input: R) -> Result<Vec<BenchmarkSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["w", "t_seconds"] {
        return Err(IoError::Invalid(format!(
            "expected header `w,t_seconds`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<BenchmarkRow>().enumerate() {
        let row = row?;
        out.push(BenchmarkSample::new(row.w, row.t_seconds).map_err(|e| IoError::Parse { line: i + 2, msg: e.to_string() })?);
    }
    Ok(out)
}

/// Cost model as JSON `{a,b,d,g,h,w_lo,w_max}`.
pub fn parse_model_json(text: &str) -> Result<CostModel> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_model_json<W: Write>(model: &CostModel, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, model)?;
    writeln!(out)?;
    Ok(())
}

/// Dense transition matrix, one row per line, no header.
pub fn parse_chain_csv<R: Read>(input: R) -> Result<MarkovChain> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        rows.push(rec.iter().map(|s| parse_f64(s, i + 1)).collect::<Result<Vec<_>>>()?);
    }
    Ok(MarkovChain::from_rows(rows)?)
}

pub fn write_chain_csv<W: Write>(chain: &MarkovChain, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in chain.to_dense() {
        wtr.write_record(row.iter().map(f64::to_string))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Budget list: comma-separated values, or `log:LO:HI:COUNT` for a log-spaced grid
/// including both ends.
pub fn parse_budgets(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let values = if let Some(rest) = spec.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [lo, hi, count] = parts[..] else {
            return Err(IoError::Invalid(format!("expected log:LO:HI:COUNT, got `{spec}`")));
        };
        let (lo, hi) = (parse_f64(lo, 1)?, parse_f64(hi, 1)?);
        let count: usize = count
            .trim()
            .parse()
            .map_err(|e| IoError::Invalid(format!("grid size `{count}`: {e}")))?;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || !(1..=100_000).contains(&count) {
            return Err(IoError::Invalid(format!("bad log grid `{spec}`")));
        }
        log_grid(lo, hi, count)
    } else {
        spec.split(',').map(|s| parse_f64(s, 1)).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(IoError::Invalid("empty budget list".into()));
    }
    if let Some(b) = values.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(IoError::Invalid(format!("budget {b} must be finite and positive")));
    }
    Ok(values)
}

/// `count` log-spaced points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect();
    grid[0] = lo;
    grid[count - 1] = hi;
    grid
}

/// `clock_s,spliced` series.
pub fn write_series_csv<W: Write, T: ToString + Copy>(series: &[(f64, T)], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["clock_s", "spliced"])?;
    for &(t, s) in series {
        wtr.write_record([t.to_string(), s.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
