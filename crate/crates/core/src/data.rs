//! Batches of multivariate series windows and their CSV form.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("context length {context_len} must be below total length {total_len}")]
    BadWindow { context_len: usize, total_len: usize },
    #[error("value buffer has {got} entries, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("series of length {len} is too short for windows of length {window}")]
    TooShort { len: usize, window: usize },
    #[error("missing value at batch {batch}, node {node}, t {t}")]
    MissingValue { batch: usize, node: usize, t: usize },
    #[error("non-finite value at batch {batch}, node {node}, t {t}")]
    NonFinite { batch: usize, node: usize, t: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Context-window statistics of one `(batch, node)` series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextStats {
    pub mean: f64,
    pub std: f64,
}

/// Lower bound on the scale used by the model, so a flat context window
/// maps to zeros instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-6;

impl ContextStats {
    pub fn scale(&self) -> f64 {
        self.std.max(STD_FLOOR)
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.scale()
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        self.mean + self.scale() * z
    }
}

/// Windows shaped `batch x node x time`, split into a context prefix of
/// `context_len` steps and a forecast suffix.
///
/// `time_origin[b]` is the absolute time index of step 0 of window `b`,
/// which the ground-truth simulators need for time-dependent mechanisms.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    batch: usize,
    nodes: usize,
    total_len: usize,
    context_len: usize,
    values: Vec<f64>,
    time_origin: Vec<usize>,
    stats: Vec<ContextStats>,
}

fn stats_of(series: &[f64]) -> ContextStats {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ContextStats {
        mean,
        std: var.sqrt(),
    }
}

impl SeriesBatch {
    pub fn new(
        batch: usize,
        nodes: usize,
        context_len: usize,
        total_len: usize,
        values: Vec<f64>,
        time_origin: Vec<usize>,
    ) -> Result<Self, DataError> {
        if context_len == 0 || context_len >= total_len {
            return Err(DataError::BadWindow {
                context_len,
                total_len,
            });
        }
        let expected = batch * nodes * total_len;
        if values.len() != expected {
            return Err(DataError::BadLength {
                got: values.len(),
                expected,
            });
        }
        if time_origin.len() != batch {
            return Err(DataError::BadLength {
                got: time_origin.len(),
                expected: batch,
            });
        }
        let mut out = Self {
            batch,
            nodes,
            total_len,
            context_len,
            values,
            time_origin,
            stats: Vec::new(),
        };
        out.refresh_stats();
        Ok(out)
    }

    fn refresh_stats(&mut self) {
        let mut stats = Vec::with_capacity(self.batch * self.nodes);
        for b in 0..self.batch {
            for k in 0..self.nodes {
                stats.push(stats_of(&self.series(b, k)[..self.context_len]));
            }
        }
        self.stats = stats;
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn horizon(&self) -> usize {
        self.total_len - self.context_len
    }

    pub fn time_origin(&self, b: usize) -> usize {
        self.time_origin[b]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn offset(&self, b: usize, k: usize) -> usize {
        (b * self.nodes + k) * self.total_len
    }

    #[inline]
    pub fn get(&self, b: usize, k: usize, t: usize) -> f64 {
        self.values[self.offset(b, k) + t]
    }

    pub fn series(&self, b: usize, k: usize) -> &[f64] {
        let o = self.offset(b, k);
        &self.values[o..o + self.total_len]
    }

    pub fn context_stats(&self, b: usize, k: usize) -> ContextStats {
        self.stats[b * self.nodes + k]
    }

    /// Overwrites one entry. Context statistics are refreshed when `t` lies in
    /// the context window.
    pub fn set(&mut self, b: usize, k: usize, t: usize, value: f64) {
        let o = self.offset(b, k);
        self.values[o + t] = value;
        if t < self.context_len {
            self.stats[b * self.nodes + k] = stats_of(&self.series(b, k)[..self.context_len]);
        }
    }

    /// Same values, different context/forecast split.
    pub fn with_context_len(&self, context_len: usize) -> Result<Self, DataError> {
        Self::new(
            self.batch,
            self.nodes,
            context_len,
            self.total_len,
            self.values.clone(),
            self.time_origin.clone(),
        )
    }

    /// Sub-batch of the listed windows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.nodes * self.total_len);
        let mut origin = Vec::with_capacity(indices.len());
        let mut stats = Vec::with_capacity(indices.len() * self.nodes);
        for &b in indices {
            let o = self.offset(b, 0);
            values.extend_from_slice(&self.values[o..o + self.nodes * self.total_len]);
            origin.push(self.time_origin[b]);
            stats.extend_from_slice(&self.stats[b * self.nodes..(b + 1) * self.nodes]);
        }
        Self {
            batch: indices.len(),
            nodes: self.nodes,
            total_len: self.total_len,
            context_len: self.context_len,
            values,
            time_origin: origin,
            stats,
        }
    }

    /// Sliding windows of length `total_len` with the given stride over one
    /// long series stored as `node x time`.
    pub fn windows(
        series: &[Vec<f64>],
        series_origin: usize,
        context_len: usize,
        total_len: usize,
        stride: usize,
    ) -> Result<Self, DataError> {
        let nodes = series.len();
        let len = series.first().map(Vec::len).unwrap_or(0);
        if len < total_len {
            return Err(DataError::TooShort {
                len,
                window: total_len,
            });
        }
        let starts: Vec<usize> = (0..=len - total_len).step_by(stride.max(1)).collect();
        let mut values = Vec::with_capacity(starts.len() * nodes * total_len);
        for &s in &starts {
            for node in series {
                values.extend_from_slice(&node[s..s + total_len]);
            }
        }
        let origin = starts.iter().map(|s| series_origin + s).collect();
        Self::new(starts.len(), nodes, context_len, total_len, values, origin)
    }

    /// Writes `batch,node,t,value` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["batch", "node", "t", "value"])?;
        for b in 0..self.batch {
            for k in 0..self.nodes {
                for (t, v) in self.series(b, k).iter().enumerate() {
                    wr.write_record([
                        b.to_string(),
                        k.to_string(),
                        t.to_string(),
                        format!("{v:.16e}"),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    batch: usize,
    node: usize,
    t: usize,
    value: f64,
}

/// Reads `batch,node,t,value` rows into `batch x node x time` arrays.
pub fn read_long_csv<R: Read>(r: R) -> Result<Vec<Vec<Vec<f64>>>, DataError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    let (mut nb, mut nk, mut nt) = (0, 0, 0);
    for rec in rd.deserialize() {
        let row: Row = rec?;
        if !row.value.is_finite() {
            return Err(DataError::NonFinite {
                batch: row.batch,
                node: row.node,
                t: row.t,
            });
        }
        nb = nb.max(row.batch + 1);
        nk = nk.max(row.node + 1);
        nt = nt.max(row.t + 1);
        cells.push((row.batch, row.node, row.t, row.value));
    }
    let mut out = vec![vec![vec![f64::NAN; nt]; nk]; nb];
    for (b, k, t, v) in cells {
        out[b][k][t] = v;
    }
    for (b, nodes) in out.iter().enumerate() {
        for (k, s) in nodes.iter().enumerate() {
            if let Some(t) = s.iter().position(|v| v.is_nan()) {
                return Err(DataError::MissingValue { batch: b, node: k, t });
            }
        }
    }
    Ok(out)
}

/// Parses a CSV written by [`SeriesBatch::write_csv`] back into a batch.
pub fn read_batch_csv<R: Read>(
    r: R,
    context_len: usize,
    time_origin: Vec<usize>,
) -> Result<SeriesBatch, DataError> {
    let cube = read_long_csv(r)?;
    let batch = cube.len();
    let nodes = cube.first().map(Vec::len).unwrap_or(0);
    let total_len = cube
        .first()
        .and_then(|n| n.first())
        .map(Vec::len)
        .unwrap_or(0);
    let values = cube.into_iter().flatten().flatten().collect();
    SeriesBatch::new(batch, nodes, context_len, total_len, values, time_origin)
}
