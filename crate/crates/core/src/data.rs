//! Datasets: LibSVM text I/O, label normalization, feature-scale
//! corruption and synthetic generators.
//!
//! Feature indices are 1-based in LibSVM files and 0-based everywhere else;
//! the conversion happens only in [`parse_libsvm`] and [`write_libsvm`].
//!
//! Scaling multiplies stored nonzeros only. For a multiplicative transform
//! this is the same as scaling the dense design matrix.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SparseRow;
use crate::losses::{sigmoid, LossKind};
use crate::rng::{RandomSource, Stream};

/// `n` samples with sparse features in `d` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Vec<SparseRow>,
    labels: Vec<f64>,
    d: usize,
}

impl Dataset {
    pub fn new(rows: Vec<SparseRow>, labels: Vec<f64>, d: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::InvalidBatch { batch: 0, n: 0 });
        }
        for row in &rows {
            if let Some(max) = row.max_index() {
                if max >= d {
                    return Err(Error::FeatureOutOfRange { index: max, d });
                }
            }
        }
        Ok(Dataset { rows, labels, d })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).sum()
    }

    /// Widens the feature space, e.g. when a sample file omits the highest
    /// feature of the full dataset.
    pub fn with_dim(mut self, d: usize) -> Result<Self> {
        let needed = self.rows.iter().filter_map(SparseRow::max_index).max();
        if let Some(max) = needed {
            if max >= d {
                return Err(Error::FeatureOutOfRange { index: max, d });
            }
        }
        self.d = d;
        Ok(self)
    }
}

/// Parses LibSVM text: one sample per line, `label idx:val idx:val ...`,
/// 1-based strictly increasing indices. Blank lines and `#` comments are
/// skipped. The dimension is `1 + max index` unless `dim` overrides it.
pub fn parse_libsvm<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut max_index: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = tokens_with_columns(content);
        let Some((label_col, label_tok)) = tokens.next() else {
            continue;
        };
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            column: label_col,
            token: label_tok.to_string(),
        })?;
        if !label.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                column: label_col,
                token: label_tok.to_string(),
            });
        }

        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (col, tok) in tokens {
            let Some((idx_tok, val_tok)) = tok.split_once(':') else {
                return Err(Error::MalformedLine {
                    line: lineno,
                    message: format!("column {col}: expected index:value, found {tok:?}"),
                });
            };
            let index: usize = idx_tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                column: col,
                token: idx_tok.to_string(),
            })?;
            if index == 0 {
                return Err(Error::MalformedLine {
                    line: lineno,
                    message: format!("column {col}: feature indices are 1-based"),
                });
            }
            let value: f64 = val_tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                column: col + idx_tok.len() + 1,
                token: val_tok.to_string(),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    column: col + idx_tok.len() + 1,
                    token: val_tok.to_string(),
                });
            }
            let index = index - 1;
            if let Some(&prev) = indices.last() {
                if index <= prev {
                    return Err(Error::MalformedLine {
                        line: lineno,
                        message: format!(
                            "column {col}: feature index {} does not increase (previous {})",
                            index + 1,
                            prev + 1
                        ),
                    });
                }
            }
            indices.push(index);
            values.push(value);
        }
        if let Some(&last) = indices.last() {
            max_index = Some(max_index.map_or(last, |m| m.max(last)));
        }
        rows.push(SparseRow::new(indices, values)?);
        labels.push(label);
    }

    let inferred = max_index.map_or(0, |m| m + 1);
    let d = match dim {
        Some(d) if d < inferred => {
            return Err(Error::FeatureOutOfRange {
                index: inferred - 1,
                d,
            })
        }
        Some(d) => d,
        None => inferred,
    };
    if rows.is_empty() {
        return Err(Error::InvalidConfig("dataset has no samples".into()));
    }
    Dataset::new(rows, labels, d)
}

fn tokens_with_columns(line: &str) -> impl Iterator<Item = (usize, &str)> {
    line.split_ascii_whitespace().map(move |tok| {
        // byte offset, 1-based; input is ASCII
        (tok.as_ptr() as usize - line.as_ptr() as usize + 1, tok)
    })
}

pub fn read_libsvm(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).with_path(path))?;
    parse_libsvm(BufReader::new(file), dim).map_err(|e| e.with_path(path))
}

/// Writes LibSVM text, values with 17 significant digits.
pub fn write_libsvm<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut out = BufWriter::new(writer);
    for (row, label) in data.rows().iter().zip(data.labels()) {
        write!(out, "{label}")?;
        for (j, v) in row.iter() {
            write!(out, " {}:{:.16e}", j + 1, v)?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Maps the two raw label values order-preservingly onto the loss's domain.
pub fn normalize_labels(data: &Dataset, kind: LossKind) -> Result<Dataset> {
    let distinct: BTreeSet<u64> = data.labels().iter().map(|y| ordered_bits(*y)).collect();
    if distinct.len() != 2 {
        return Err(Error::LabelCardinality(distinct.len()));
    }
    let low = data.labels().iter().copied().fold(f64::INFINITY, f64::min);
    let [neg, pos] = kind.label_domain();
    let labels = data
        .labels()
        .iter()
        .map(|&y| if y == low { neg } else { pos })
        .collect();
    Ok(Dataset {
        rows: data.rows.clone(),
        labels,
        d: data.d,
    })
}

fn ordered_bits(y: f64) -> u64 {
    // -0.0 and 0.0 are the same label
    if y == 0.0 {
        0.0f64.to_bits()
    } else {
        y.to_bits()
    }
}

/// Exponent range for feature-scale corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub k_min: i32,
    pub k_max: i32,
    pub seed: u64,
}

impl ScalingSpec {
    pub fn new(k_min: i32, k_max: i32, seed: u64) -> Result<Self> {
        if k_min > k_max {
            return Err(Error::InvalidConfig(format!(
                "k_min {k_min} exceeds k_max {k_max}"
            )));
        }
        Ok(ScalingSpec { k_min, k_max, seed })
    }

    pub fn identity() -> Self {
        ScalingSpec {
            k_min: 0,
            k_max: 0,
            seed: 0,
        }
    }

    /// `d` equally spaced exponents from `k_min` to `k_max` inclusive.
    pub fn exponents(&self, d: usize) -> Vec<f64> {
        let (lo, hi) = (f64::from(self.k_min), f64::from(self.k_max));
        if d <= 1 {
            return vec![lo; d];
        }
        (0..d)
            .map(|q| lo + (hi - lo) * q as f64 / (d - 1) as f64)
            .collect()
    }

    /// Per-feature multipliers: feature `j` gets `10^{e_{π(j)}}` for a
    /// random permutation `π` drawn from the permutation stream.
    pub fn multipliers(&self, d: usize) -> Vec<f64> {
        let exps = self.exponents(d);
        let perm = RandomSource::new(self.seed, Stream::Permutation).permutation(d);
        perm.iter().map(|&q| 10f64.powf(exps[q])).collect()
    }
}

pub fn corrupt_features(data: &Dataset, spec: &ScalingSpec) -> Result<Dataset> {
    if data.d() == 0 {
        return Err(Error::EmptyDimension);
    }
    let scale = spec.multipliers(data.d());
    let rows = data
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            let idx = row.indices().to_vec();
            for (v, j) in row.values_mut().iter_mut().zip(idx) {
                *v *= scale[j];
            }
            row
        })
        .collect();
    Dataset::new(rows, data.labels().to_vec(), data.d())
}

/// Dense classification data: standard Gaussian features and labels in
/// `{-1, +1}` drawn from a logistic model with a random planted vector of
/// norm `signal`.
pub fn gaussian_classification(n: usize, d: usize, signal: f64, seed: u64) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut rng = RandomSource::new(seed, Stream::Synthetic);
    let mut planted: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let norm = planted.iter().map(|v| v * v).sum::<f64>().sqrt();
    planted.iter_mut().for_each(|v| *v *= signal / norm);

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let margin: f64 = x.iter().zip(&planted).map(|(a, b)| a * b).sum();
        let y = if rng.uniform() < sigmoid(margin) {
            1.0
        } else {
            -1.0
        };
        rows.push(SparseRow::new((0..d).collect(), x)?);
        labels.push(y);
    }
    Dataset::new(rows, labels, d)
}

/// Sparse classification data in the style of text corpora: each entry is
/// present with probability `density` and standard Gaussian when present.
/// The planted vector is rescaled so the margin has standard deviation close
/// to `signal` regardless of density.
pub fn sparse_classification(
    n: usize,
    d: usize,
    density: f64,
    signal: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "density {density} outside (0, 1]"
        )));
    }
    let mut rng = RandomSource::new(seed, Stream::Synthetic);
    let mut planted: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let norm = planted.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = signal / density.sqrt();
    planted.iter_mut().for_each(|v| *v *= target / norm);

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for j in 0..d {
            if rng.uniform() < density {
                indices.push(j);
                values.push(rng.standard_normal());
            }
        }
        let margin: f64 = indices
            .iter()
            .zip(&values)
            .map(|(&j, v)| planted[j] * v)
            .sum();
        labels.push(if rng.uniform() < sigmoid(margin) {
            1.0
        } else {
            -1.0
        });
        rows.push(SparseRow::new(indices, values)?);
    }
    Dataset::new(rows, labels, d)
}
