//! Dense linear algebra for small measurement systems.
//!
//! Everything here works on `nalgebra` dynamic matrices. The Gram matrix
//! `A A'` is always inverted through a Cholesky factorization guarded by an
//! eigenvalue check; a rank-deficient system is an error, never silently
//! regularized.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Default threshold on the smallest singular value of `A`.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-10;

/// Largest accepted condition number of `A A'`.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

const ZERO_ROW_NORM: f64 = 1e-14;
const UNIT_NORM_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// The known `m x N` measurement matrix, possibly row-normalized.
///
/// `row_scales[i]` is the original Euclidean norm of row `i` when the system
/// came out of [`normalize_rows`], and `1.0` otherwise. A raw observation on
/// row `i` maps to the normalized system as `y / row_scales[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSystem {
    entries: DMatrix<f64>,
    row_scales: Vec<f64>,
    rank_threshold: f64,
    unit_rows: bool,
}

impl MeasurementSystem {
    /// Wraps a matrix as-is, without rescaling its rows.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        validate_shape(&entries)?;
        let m = entries.nrows();
        let unit_rows = rows_have_unit_norm(&entries);
        Ok(MeasurementSystem {
            entries,
            row_scales: vec![1.0; m],
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            unit_rows,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn with_rank_threshold(mut self, threshold: f64) -> Self {
        self.rank_threshold = threshold;
        self
    }

    pub fn rank_threshold(&self) -> f64 {
        self.rank_threshold
    }

    /// Number of rows `m`.
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of columns `N`.
    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_scales(&self) -> &[f64] {
        &self.row_scales
    }

    /// Row `i` (0-based) as an owned vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.entries.row(i).transpose()
    }

    /// Inner product of row `i` (0-based) with `x`.
    pub fn row_dot(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.entries
            .row(i)
            .iter()
            .zip(x.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// True when every row has unit Euclidean norm.
    pub fn is_normalized(&self) -> bool {
        self.unit_rows
    }

    /// The matrix before normalization, i.e. row `i` multiplied by `row_scales[i]`.
    pub fn raw_matrix(&self) -> DMatrix<f64> {
        let mut raw = self.entries.clone();
        for (i, s) in self.row_scales.iter().enumerate() {
            raw.row_mut(i).scale_mut(*s);
        }
        raw
    }

    /// Maps a raw measurement on 1-based row `z` into this system's scaling.
    pub fn scale_observation(&self, z: usize, y: f64) -> Result<f64> {
        if z == 0 || z > self.rows() {
            return Err(Error::RowIndexOutOfRange { z, m: self.rows() });
        }
        Ok(y / self.row_scales[z - 1])
    }

    /// Maps a raw right-hand side into this system's scaling.
    pub fn scale_rhs(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(b, self.rows())?;
        Ok(DVector::from_iterator(
            b.len(),
            b.iter().zip(&self.row_scales).map(|(y, s)| y / s),
        ))
    }

    pub fn gram(&self) -> DMatrix<f64> {
        &self.entries * self.entries.transpose()
    }

    /// Smallest singular value of `A`, via the eigenvalues of `A A'`.
    pub fn smallest_singular_value(&self) -> f64 {
        let eig = SymmetricEigen::new(self.gram());
        eig.eigenvalues.min().max(0.0).sqrt()
    }

    pub fn has_full_row_rank(&self) -> bool {
        self.smallest_singular_value() > self.rank_threshold
    }

    /// Factorizes `A A'`, failing if `A` is not numerically full row rank.
    pub fn factor(&self) -> Result<GramFactor> {
        GramFactor::new(self)
    }
}

fn rows_have_unit_norm(entries: &DMatrix<f64>) -> bool {
    entries
        .row_iter()
        .all(|r| (r.norm() - 1.0).abs() <= UNIT_NORM_TOL)
}

fn validate_shape(entries: &DMatrix<f64>) -> Result<()> {
    if entries.nrows() == 0 || entries.ncols() == 0 {
        return Err(Error::Shape("matrix has no entries".into()));
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement matrix"));
    }
    if entries.nrows() > entries.ncols() {
        return Err(Error::TooManyRows {
            rows: entries.nrows(),
            cols: entries.ncols(),
        });
    }
    Ok(())
}

/// Cholesky factor of `A A'` with the eigenvalue extremes used to vet it.
#[derive(Clone, Debug)]
pub struct GramFactor {
    chol: Cholesky<f64, Dyn>,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
}

impl GramFactor {
    fn new(system: &MeasurementSystem) -> Result<Self> {
        let gram = system.gram();
        let eig = SymmetricEigen::new(gram.clone());
        let min_eigenvalue = eig.eigenvalues.min();
        let max_eigenvalue = eig.eigenvalues.max();
        let sigma_min = min_eigenvalue.max(0.0).sqrt();
        if sigma_min <= system.rank_threshold {
            return Err(Error::RankDeficient(format!(
                "smallest singular value {sigma_min:e} <= threshold {:e}",
                system.rank_threshold
            )));
        }
        let condition = max_eigenvalue / min_eigenvalue;
        if condition > MAX_GRAM_CONDITION {
            return Err(Error::RankDeficient(format!(
                "condition number of A A' is {condition:e}"
            )));
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::RankDeficient("A A' is not positive definite".into()))?;
        Ok(GramFactor {
            chol,
            min_eigenvalue,
            max_eigenvalue,
        })
    }

    /// Solves `(A A') u = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn condition(&self) -> f64 {
        self.max_eigenvalue / self.min_eigenvalue
    }
}

/// Builds a unit-row system from a raw matrix, recording the original row norms.
pub fn normalize_rows(raw: DMatrix<f64>) -> Result<MeasurementSystem> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement matrix"));
    }
    let mut entries = raw;
    let mut row_scales = Vec::with_capacity(entries.nrows());
    for i in 0..entries.nrows() {
        let norm = entries.row(i).norm();
        if norm < ZERO_ROW_NORM {
            return Err(Error::ZeroRow(i + 1));
        }
        entries.row_mut(i).unscale_mut(norm);
        row_scales.push(norm);
    }
    validate_shape(&entries)?;
    Ok(MeasurementSystem {
        entries,
        row_scales,
        rank_threshold: DEFAULT_RANK_THRESHOLD,
        unit_rows: true,
    })
}

/// Closest point to `x0` satisfying `A x = b`: `x0 + A'(AA')^{-1}(b - A x0)`.
pub fn projection_solution(
    system: &MeasurementSystem,
    x0: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len(x0, system.cols())?;
    check_len(b, system.rows())?;
    let factor = system.factor()?;
    Ok(project_with(system, &factor, x0, b))
}

pub(crate) fn project_with(
    system: &MeasurementSystem,
    factor: &GramFactor,
    x0: &DVector<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let a = system.matrix();
    let mut x = x0 + a.transpose() * factor.solve(&(b - a * x0));
    // one refinement pass; the correction stays in the row space
    let residual = b - a * &x;
    x += a.transpose() * factor.solve(&residual);
    x
}

/// `dist(x0, v* + rowspace(A))`, the norm of the row-space-orthogonal part of `x0 - v*`.
pub fn dist_to_solution_affine(
    system: &MeasurementSystem,
    x0: &DVector<f64>,
    v_star: &DVector<f64>,
) -> Result<f64> {
    check_len(x0, system.cols())?;
    check_len(v_star, system.cols())?;
    let factor = system.factor()?;
    let a = system.matrix();
    let mut e = x0 - v_star;
    for _ in 0..2 {
        let correction = a.transpose() * factor.solve(&(a * &e));
        e -= correction;
    }
    Ok(e.norm())
}

/// Row-selection probabilities `λ`, strictly positive and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("empty".into()));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w <= 0.0)
        {
            return Err(Error::InvalidWeights(format!(
                "entry {} is {w}, must be positive",
                i + 1
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("entries sum to {sum}")));
        }
        Ok(WeightVector(weights))
    }

    /// Rescales positive weights so they sum to one.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidWeights(format!("entries sum to {sum}")));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(m: usize) -> Self {
        WeightVector(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sqrt_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.0.len(),
            self.0.iter().map(|l| l.sqrt()),
        ))
    }
}

/// `(Σ r_i² / λ_i)^{1/2}`.
pub fn weighted_norm(r: &DVector<f64>, lambda: &WeightVector) -> Result<f64> {
    check_len(r, lambda.len())?;
    Ok(r.iter()
        .zip(lambda.as_slice())
        .map(|(ri, li)| ri * ri / li)
        .sum::<f64>()
        .sqrt())
}

/// Smallest eigenvalue `ζ` of `√Λ A A' √Λ`.
pub fn min_eig_weighted_gram(system: &MeasurementSystem, lambda: &WeightVector) -> Result<f64> {
    if lambda.len() != system.rows() {
        return Err(Error::DimensionMismatch {
            expected: system.rows(),
            got: lambda.len(),
        });
    }
    let s = lambda.sqrt_diag();
    let weighted = &s * system.gram() * &s;
    let zeta = SymmetricEigen::new(weighted).eigenvalues.min();
    let floor = system.rank_threshold * system.rank_threshold;
    if zeta <= floor {
        return Err(Error::RankDeficient(format!(
            "smallest eigenvalue of the weighted Gram matrix is {zeta:e}"
        )));
    }
    Ok(zeta)
}

pub(crate) fn check_len(v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Shape("matrix has no entries".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Shape(format!(
            "row {} has {} entries, expected {ncols}",
            i + 1,
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Parses a headerless CSV matrix, one row per line.
pub fn parse_matrix_csv(text: &str, source: &str) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: format!("bad number {field:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    matrix_from_rows(&rows)
}

pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_matrix_csv(&text, &path.display().to_string())
}
