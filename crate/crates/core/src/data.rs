//! Synthetic data generation, CSV ingestion with sliding windows,
//! normalization, and deterministic splitting.

use crate::error::{Result, SdError};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// Fixed-length multivariate windows with per-feature normalization
/// statistics and deterministic split tags.
///
/// Values are normalized to [0, 1] with min/max computed on the train split
/// only; held-out windows are clamped into [0, 1] at the boundary.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    windows: Vec<Tensor<f32>>,
    pub feature_min: Vec<f32>,
    pub feature_max: Vec<f32>,
    split: Vec<Split>,
    pub source: String,
    pub seq_len: usize,
    pub features: usize,
}

impl WindowedDataset {
    /// Sinusoidal windows: feature j of window i is `sin(2π f t + φ)`
    /// rescaled to [0, 1], with `f ~ U(0.01, 0.15)` and `φ ~ U(-π, π)`.
    pub fn gen_sines(n: usize, seq_len: usize, features: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0x51e5);
        let mut windows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = vec![0.0f32; seq_len * features];
            for j in 0..features {
                let f = rng.gen_range(0.01..0.15);
                let phase = rng.gen_range(-PI..PI);
                for t in 0..seq_len {
                    let v = (2.0 * PI * f * t as f64 + phase).sin();
                    data[t * features + j] = (0.5 * (v + 1.0)) as f32;
                }
            }
            windows.push(Tensor::new(vec![seq_len, features], data).expect("window shape"));
        }
        WindowedDataset {
            windows,
            feature_min: vec![0.0; features],
            feature_max: vec![1.0; features],
            split: vec![Split::Train; n],
            source: format!("sines(n={n},l={seq_len},d={features},seed={seed})"),
            seq_len,
            features,
        }
    }

    /// Debug variant with fixed frequency and phase for every feature.
    pub fn gen_sines_fixed(n: usize, seq_len: usize, features: usize, freq: f64, phase: f64) -> Self {
        let mut windows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = vec![0.0f32; seq_len * features];
            for j in 0..features {
                for t in 0..seq_len {
                    let v = (2.0 * PI * freq * t as f64 + phase).sin();
                    data[t * features + j] = (0.5 * (v + 1.0)) as f32;
                }
            }
            windows.push(Tensor::new(vec![seq_len, features], data).expect("window shape"));
        }
        WindowedDataset {
            windows,
            feature_min: vec![0.0; features],
            feature_max: vec![1.0; features],
            split: vec![Split::Train; n],
            source: format!("sines_fixed(f={freq},phase={phase})"),
            seq_len,
            features,
        }
    }

    /// Sliding windows over a CSV of consecutive timesteps (one header row,
    /// numeric columns). Splits at window level, then min-max normalizes
    /// from the train split only.
    pub fn load_csv_windows(
        path: &Path,
        seq_len: usize,
        stride: usize,
        heldout_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(SdError::Config("stride must be >= 1".into()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdError::Io(format!("{}: {e}", path.display())))?;
        let mut lines = text.lines().enumerate();
        let (_, _header) = lines
            .next()
            .ok_or_else(|| SdError::Data("empty csv".into()))?;
        let mut rows: Vec<Vec<f32>> = Vec::new();
        let mut features = 0usize;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for (col, cell) in line.split(',').enumerate() {
                let v: f32 = cell.trim().parse().map_err(|_| {
                    SdError::Parse(format!(
                        "non-numeric cell at row {}, column {}: {:?}",
                        lineno + 1,
                        col + 1,
                        cell.trim()
                    ))
                })?;
                row.push(v);
            }
            if features == 0 {
                features = row.len();
            } else if row.len() != features {
                return Err(SdError::Parse(format!(
                    "row {} has {} columns, expected {features}",
                    lineno + 1,
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() < seq_len {
            return Err(SdError::Data(format!(
                "{} rows is fewer than the window length {seq_len}",
                rows.len()
            )));
        }

        let count = (rows.len() - seq_len) / stride + 1;
        let mut windows = Vec::with_capacity(count);
        for w in 0..count {
            let start = w * stride;
            let mut data = vec![0.0f32; seq_len * features];
            for t in 0..seq_len {
                data[t * features..(t + 1) * features].copy_from_slice(&rows[start + t]);
            }
            windows.push(Tensor::new(vec![seq_len, features], data).expect("window shape"));
        }

        let mut ds = WindowedDataset {
            windows,
            feature_min: vec![0.0; features],
            feature_max: vec![0.0; features],
            split: vec![Split::Train; count],
            source: format!("csv({},l={seq_len},stride={stride},seed={seed})", path.display()),
            seq_len,
            features,
        };
        if heldout_fraction > 0.0 {
            ds.resplit(heldout_fraction, seed)?;
        }
        ds.normalize_from_train();
        Ok(ds)
    }

    /// Uniformly random window-level split; counts land within ±1 of the
    /// exact fraction and are deterministic given the seed.
    pub fn resplit(&mut self, heldout_fraction: f64, seed: u64) -> Result<()> {
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(SdError::Config(format!(
                "heldout fraction must be in (0,1), got {heldout_fraction}"
            )));
        }
        let n = self.windows.len();
        let k = (n as f64 * heldout_fraction).round() as usize;
        if k == 0 || k == n {
            return Err(SdError::Config(format!(
                "split of {n} windows at fraction {heldout_fraction} leaves an empty side"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, 0x5b71));
        self.split = vec![Split::Train; n];
        for &i in order.iter().take(k) {
            self.split[i] = Split::Heldout;
        }
        Ok(())
    }

    /// Min-max statistics from train windows only, applied to every window;
    /// held-out values are clamped into [0, 1]. A zero-range feature
    /// normalizes to constant 0.
    fn normalize_from_train(&mut self) {
        let d = self.features;
        let mut fmin = vec![f32::INFINITY; d];
        let mut fmax = vec![f32::NEG_INFINITY; d];
        for (w, tag) in self.windows.iter().zip(&self.split) {
            if *tag != Split::Train {
                continue;
            }
            for t in 0..self.seq_len {
                for j in 0..d {
                    let v = w.data()[t * d + j];
                    fmin[j] = fmin[j].min(v);
                    fmax[j] = fmax[j].max(v);
                }
            }
        }
        for j in 0..d {
            if fmax[j] - fmin[j] <= 0.0 {
                eprintln!("warning: feature {j} has zero range on the train split; normalizing to 0");
            }
        }
        for w in &mut self.windows {
            for t in 0..self.seq_len {
                for j in 0..d {
                    let v = &mut w.data_mut()[t * d + j];
                    let range = fmax[j] - fmin[j];
                    *v = if range > 0.0 { ((*v - fmin[j]) / range).clamp(0.0, 1.0) } else { 0.0 };
                }
            }
        }
        self.feature_min = fmin;
        self.feature_max = fmax;
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> &Tensor<f32> {
        &self.windows[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.windows.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        self.indices(Split::Heldout)
    }

    /// Construct directly from windows already in [0, 1] (e.g. generated
    /// samples to be evaluated).
    pub fn from_windows(windows: Vec<Tensor<f32>>, source: &str) -> Result<Self> {
        let first = windows.first().ok_or_else(|| SdError::Data("no windows".into()))?;
        let (seq_len, features) = (first.shape()[0], first.shape()[1]);
        for w in &windows {
            if w.shape() != [seq_len, features] {
                return Err(SdError::Dim("inconsistent window shapes".into()));
            }
        }
        let n = windows.len();
        Ok(WindowedDataset {
            windows,
            feature_min: vec![0.0; features],
            feature_max: vec![1.0; features],
            split: vec![Split::Train; n],
            source: source.to_string(),
            seq_len,
            features,
        })
    }
}

/// Parse a plain numeric CSV (one header row) into rows of f32.
pub fn read_csv_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| SdError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| SdError::Data("empty csv".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(names.len());
        for (col, cell) in line.split(',').enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| {
                SdError::Parse(format!(
                    "non-numeric cell at row {}, column {}: {:?}",
                    lineno + 1,
                    col + 1,
                    cell.trim()
                ))
            })?;
            row.push(v);
        }
        if row.len() != names.len() {
            return Err(SdError::Parse(format!("row {} has wrong column count", lineno + 1)));
        }
        rows.push(row);
    }
    Ok((names, rows))
}

/// Windows to CSV with a prepended window-id column.
pub fn windows_to_csv(windows: &[Tensor<f32>]) -> String {
    let mut s = String::from("window_id");
    if let Some(first) = windows.first() {
        for j in 0..first.cols() {
            s.push_str(&format!(",f{j}"));
        }
    }
    s.push('\n');
    for (id, w) in windows.iter().enumerate() {
        for t in 0..w.rows() {
            s.push_str(&id.to_string());
            for &v in w.row(t) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}

/// Inverse of [`windows_to_csv`]: group consecutive rows by the window-id
/// column.
pub fn windows_from_csv(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let (names, rows) = read_csv_matrix(path)?;
    if names.first().map(|s| s.as_str()) != Some("window_id") {
        return Err(SdError::Parse("expected a window_id first column".into()));
    }
    let d = names.len() - 1;
    let mut windows = Vec::new();
    let mut current_id = None;
    let mut buf: Vec<f32> = Vec::new();
    let flush = |buf: &mut Vec<f32>, windows: &mut Vec<Tensor<f32>>| -> Result<()> {
        if !buf.is_empty() {
            let rows = buf.len() / d;
            windows.push(Tensor::new(vec![rows, d], std::mem::take(buf))?);
        }
        Ok(())
    };
    for row in rows {
        let id = row[0] as i64;
        if current_id != Some(id) {
            flush(&mut buf, &mut windows)?;
            current_id = Some(id);
        }
        buf.extend_from_slice(&row[1..]);
    }
    flush(&mut buf, &mut windows)?;
    Ok(windows)
}
