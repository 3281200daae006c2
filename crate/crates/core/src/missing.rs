//! Incomplete data, missingness patterns and per-sample permutation plans.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// Token written for missing cells in CSV files.
pub const NA: &str = "NA";

/// `p × n` data (one sample per column) with an observation mask.
///
/// Missing cells hold NaN internally so that any accidental read shows up.
#[derive(Debug, Clone)]
pub struct IncompleteMatrix {
    values: Mat,
    /// Column-major, `true` = observed.
    mask: Vec<bool>,
}

/// Equal when the masks agree and every observed cell matches bitwise.
impl PartialEq for IncompleteMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.values.shape() == other.values.shape()
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(&self.mask)
                .all(|((a, b), &m)| !m || a.to_bits() == b.to_bits())
    }
}

impl IncompleteMatrix {
    pub fn new(mut values: Mat, mask: Vec<bool>) -> Result<Self> {
        let (p, n) = values.shape();
        if mask.len() != p * n {
            return Err(Error::DimensionMismatch {
                expected: p * n,
                got: mask.len(),
            });
        }
        if p == 0 || n == 0 {
            return Err(Error::InvalidInput("empty data matrix".into()));
        }
        for (k, v) in values.iter_mut().enumerate() {
            if mask[k] {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite observed value at ({}, {})",
                        k % p,
                        k / p
                    )));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(Self { values, mask })
    }

    /// Fully observed data.
    pub fn complete(values: Mat) -> Result<Self> {
        let len = values.len();
        Self::new(values, vec![true; len])
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[col * self.p() + row]
    }

    /// Value of an observed cell, `None` when missing.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.is_observed(row, col).then(|| self.values[(row, col)])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_ratio(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.mask.len() as f64
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Row indices observed in column `col`, ascending.
    pub fn observed_rows(&self, col: usize) -> Vec<usize> {
        (0..self.p()).filter(|&r| self.is_observed(r, col)).collect()
    }

    pub fn column_is_complete(&self, col: usize) -> bool {
        let p = self.p();
        self.mask[col * p..(col + 1) * p].iter().all(|&m| m)
    }

    /// Column `col` with missing cells replaced by `fill`.
    pub fn column_filled(&self, col: usize, fill: f64) -> Vector {
        Vector::from_fn(self.p(), |r, _| self.get(r, col).unwrap_or(fill))
    }

    /// The matrix with every missing cell replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Mat {
        Mat::from_fn(self.p(), self.n(), |r, c| self.get(r, c).unwrap_or(fill))
    }

    /// The values when fully observed.
    pub fn complete_values(&self) -> Option<&Mat> {
        self.is_complete().then_some(&self.values)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Rejects data that estimators cannot use: columns with no observed entry.
    pub fn validate_for_estimation(&self) -> Result<()> {
        let p = self.p();
        for c in 0..self.n() {
            if !self.mask[c * p..(c + 1) * p].iter().any(|&m| m) {
                return Err(Error::EmptySample(c));
            }
        }
        Ok(())
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let p = self.p();
        let values = Mat::from_fn(p, cols.len(), |r, c| self.values[(r, cols[c])]);
        let mut mask = Vec::with_capacity(p * cols.len());
        for &c in cols {
            mask.extend_from_slice(&self.mask[c * p..(c + 1) * p]);
        }
        Self::new(values, mask)
    }

    /// Marks the given cells as missing.
    pub fn with_missing_cells(&self, cells: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        let p = self.p();
        for &(r, c) in cells {
            out.mask[c * p + r] = false;
            out.values[(r, c)] = f64::NAN;
        }
        out
    }

    /// Relabels variables: row `i` of the output is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let (p, n) = (self.p(), self.n());
        if perm.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: perm.len(),
            });
        }
        let values = Mat::from_fn(p, n, |r, c| self.values[(perm[r], c)]);
        let mask = (0..p * n).map(|k| self.mask[(k / p) * p + perm[k % p]]).collect();
        Self::new(values, mask)
    }

    /// Multiplies every observed value by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values *= c;
        out
    }

    /// Writes one sample per line, `p` comma-separated fields, `NA` for
    /// missing cells. Values use the shortest round-trip representation.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for c in 0..self.n() {
            let rec: Vec<String> = (0..self.p())
                .map(|r| match self.get(r, c) {
                    Some(v) => format!("{v:?}"),
                    None => NA.to_string(),
                })
                .collect();
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`IncompleteMatrix::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut cols: Vec<Vec<Option<f64>>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let mut col = Vec::with_capacity(rec.len());
            for field in rec.iter() {
                if field == NA {
                    col.push(None);
                } else {
                    let v: f64 = field.parse().map_err(|_| Error::Parse {
                        line: line + 1,
                        what: format!("bad value {field:?}"),
                    })?;
                    col.push(Some(v));
                }
            }
            if let Some(first) = cols.first() {
                if first.len() != col.len() {
                    return Err(Error::Parse {
                        line: line + 1,
                        what: format!("expected {} fields, found {}", first.len(), col.len()),
                    });
                }
            }
            cols.push(col);
        }
        if cols.is_empty() {
            return Err(Error::InvalidInput("empty CSV".into()));
        }
        let (p, n) = (cols[0].len(), cols.len());
        let values = Mat::from_fn(p, n, |r, c| cols[c][r].unwrap_or(f64::NAN));
        let mask = cols.iter().flat_map(|c| c.iter().map(Option::is_some)).collect();
        Self::new(values, mask)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        what: e.to_string(),
    }
}

/// Observed-first ordering of one sample's coordinates.
///
/// The concatenation `obs_idx ++ mis_idx` is the permutation `P_i`: row `k`
/// of `P_i y` is `y[order[k]]`. Both groups keep their original relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    pub obs_idx: Vec<usize>,
    pub mis_idx: Vec<usize>,
}

impl PermutationPlan {
    pub fn identity(p: usize) -> Self {
        Self {
            obs_idx: (0..p).collect(),
            mis_idx: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.obs_idx.len() + self.mis_idx.len()
    }

    pub fn is_complete(&self) -> bool {
        self.mis_idx.is_empty()
    }

    pub fn order(&self) -> Vec<usize> {
        self.obs_idx.iter().chain(&self.mis_idx).copied().collect()
    }

    /// `P y`.
    pub fn permute_vec(&self, y: &Vector) -> Vector {
        let order = self.order();
        Vector::from_fn(order.len(), |k, _| y[order[k]])
    }

    /// `Pᵀ x`, the inverse of [`PermutationPlan::permute_vec`].
    pub fn unpermute_vec(&self, x: &Vector) -> Vector {
        let mut out = Vector::zeros(x.len());
        for (k, &src) in self.order().iter().enumerate() {
            out[src] = x[k];
        }
        out
    }

    /// `P Σ Pᵀ`.
    pub fn permute_mat(&self, m: &Mat) -> Mat {
        let order = self.order();
        Mat::from_fn(order.len(), order.len(), |i, j| m[(order[i], order[j])])
    }

    /// `Pᵀ B P`.
    pub fn unpermute_mat(&self, b: &Mat) -> Mat {
        let order = self.order();
        let p = order.len();
        let mut out = Mat::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                out[(order[i], order[j])] = b[(i, j)];
            }
        }
        out
    }
}

/// One plan per column; fully observed columns get the identity plan.
pub fn build_plans(data: &IncompleteMatrix) -> Result<Vec<PermutationPlan>> {
    let p = data.p();
    (0..data.n())
        .map(|c| {
            let (obs, mis): (Vec<usize>, Vec<usize>) =
                (0..p).partition(|&r| data.is_observed(r, c));
            if obs.is_empty() {
                return Err(Error::EmptySample(c));
            }
            Ok(PermutationPlan {
                obs_idx: obs,
                mis_idx: mis,
            })
        })
        .collect()
}

/// Splits sample indices into fully observed and partially observed sets.
pub fn split_sample_sets(data: &IncompleteMatrix) -> (Vec<usize>, Vec<usize>) {
    (0..data.n()).partition(|&c| data.column_is_complete(c))
}

/// Missingness pattern generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSpec {
    /// No missing data.
    None,
    /// A single `rows × cols` block in the last variables of the last samples.
    Monotone { rows: usize, cols: usize },
    /// Randomly placed rectangles with side lengths drawn uniformly from the
    /// inclusive ranges, until the missing ratio reaches `ratio`.
    General {
        ratio: f64,
        #[serde(default = "default_block_rows")]
        block_rows: (usize, usize),
        #[serde(default = "default_block_cols")]
        block_cols: (usize, usize),
    },
    /// Independent entrywise deletion with probability `ratio`.
    Random { ratio: f64 },
}

fn default_block_rows() -> (usize, usize) {
    (2, 7)
}

fn default_block_cols() -> (usize, usize) {
    (3, 20)
}

/// Largest allowed gap between realized and target ratio for the general pattern.
pub const RATIO_TOLERANCE: f64 = 0.02;

impl PatternSpec {
    pub fn general(ratio: f64) -> Self {
        PatternSpec::General {
            ratio,
            block_rows: default_block_rows(),
            block_cols: default_block_cols(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PatternSpec::None => "none",
            PatternSpec::Monotone { .. } => "monotone",
            PatternSpec::General { .. } => "general",
            PatternSpec::Random { .. } => "random",
        }
    }

    /// Nominal missing ratio on a `p × n` matrix.
    pub fn target_ratio(&self, p: usize, n: usize) -> f64 {
        match *self {
            PatternSpec::None => 0.0,
            PatternSpec::Monotone { rows, cols } => (rows * cols) as f64 / (p * n) as f64,
            PatternSpec::General { ratio, .. } | PatternSpec::Random { ratio } => ratio,
        }
    }
}

/// Applies `spec` to fully observed data. Never produces an empty column.
pub fn apply_pattern<R: Rng + ?Sized>(
    full: &Mat,
    spec: &PatternSpec,
    rng: &mut R,
) -> Result<IncompleteMatrix> {
    let (p, n) = full.shape();
    let mask = pattern_mask(p, n, spec, rng)?;
    IncompleteMatrix::new(full.clone(), mask)
}

/// The observation mask (column-major, `true` = observed) for `spec`.
pub fn pattern_mask<R: Rng + ?Sized>(
    p: usize,
    n: usize,
    spec: &PatternSpec,
    rng: &mut R,
) -> Result<Vec<bool>> {
    match *spec {
        PatternSpec::None => Ok(vec![true; p * n]),
        PatternSpec::Monotone { rows, cols } => {
            if rows >= p || cols > n {
                return Err(Error::Config(format!(
                    "monotone block {rows}x{cols} does not fit {p}x{n} data"
                )));
            }
            let mut mask = vec![true; p * n];
            for c in (n - cols)..n {
                for r in (p - rows)..p {
                    mask[c * p + r] = false;
                }
            }
            Ok(mask)
        }
        PatternSpec::Random { ratio } => {
            check_ratio(ratio)?;
            let mut mask: Vec<bool> = (0..p * n).map(|_| !rng.random_bool(ratio)).collect();
            for c in 0..n {
                let col = &mut mask[c * p..(c + 1) * p];
                if !col.iter().any(|&m| m) {
                    col[rng.random_range(0..p)] = true;
                }
            }
            Ok(mask)
        }
        PatternSpec::General {
            ratio,
            block_rows,
            block_cols,
        } => general_mask(p, n, ratio, block_rows, block_cols, rng),
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("missing ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

fn general_mask<R: Rng + ?Sized>(
    p: usize,
    n: usize,
    ratio: f64,
    block_rows: (usize, usize),
    block_cols: (usize, usize),
    rng: &mut R,
) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    if p < 2 {
        return Err(Error::Config("general pattern needs p >= 2".into()));
    }
    let rmin = block_rows.0.max(1).min(p - 1);
    let rmax = block_rows.1.max(rmin).min(p - 1);
    let cmin = block_cols.0.max(1).min(n);
    let cmax = block_cols.1.max(cmin).min(n);
    let total = (p * n) as f64;
    let target = (ratio * total).round() as usize;
    // columns may keep at most p-1 missing cells
    if target > (p - 1) * n {
        return Err(Error::Config(format!("ratio {ratio} infeasible for p = {p}")));
    }

    for _attempt in 0..200 {
        let mut mask = vec![true; p * n];
        let mut missing_per_col = vec![0usize; n];
        let mut missing = 0usize;
        let mut stalls = 0;
        while missing < target && stalls < 10_000 {
            let h = rng.random_range(rmin..=rmax);
            let mut w = rng.random_range(cmin..=cmax);
            let need = target - missing;
            w = w.min(need.div_ceil(h)).max(1);
            let r0 = rng.random_range(0..=p - h);
            let c0 = rng.random_range(0..=n - w);
            let mut added = 0;
            let mut ok = true;
            for c in c0..c0 + w {
                let fresh = (r0..r0 + h).filter(|&r| mask[c * p + r]).count();
                if missing_per_col[c] + fresh >= p {
                    ok = false;
                    break;
                }
                added += fresh;
            }
            if !ok || added == 0 || missing + added > target + (RATIO_TOLERANCE * total / 2.0) as usize {
                stalls += 1;
                continue;
            }
            for c in c0..c0 + w {
                for r in r0..r0 + h {
                    if mask[c * p + r] {
                        mask[c * p + r] = false;
                        missing_per_col[c] += 1;
                    }
                }
            }
            missing += added;
        }
        let realized = missing as f64 / total;
        if (realized - ratio).abs() <= RATIO_TOLERANCE {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "could not realize general pattern at ratio {ratio} on {p}x{n}"
    )))
}
