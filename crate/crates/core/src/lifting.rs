//! Higher-moment lifting.
//!
//! Raising a row measurement to the power `q` gives a linear form in the
//! degree-`q` monomials of the hidden vector, so the same row-action machinery
//! estimates `E[∏ X_ℓ^{r_ℓ}]` once the matrix is lifted. Columns of the lifted
//! matrix follow the canonical ordering of [`enumerate_multi_indices`]:
//! descending lexicographic on the exponent vector.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_len, normalize_rows, MeasurementSystem};

/// Default cap on the number of lifted columns.
pub const DEFAULT_MAX_COLUMNS: u128 = 1_000_000;

/// Exponent vector `r` with `Σ r_ℓ = q`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex(exponents)
    }

    /// Multi-index for a product of 1-based link indices, e.g. `[3, 10]` for
    /// `X3 X10` or `[1, 1]` for `X1²`.
    pub fn from_factors(n: usize, factors: &[usize]) -> Result<Self> {
        let mut r = vec![0u32; n];
        for &f in factors {
            if f == 0 || f > n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: f,
                });
            }
            r[f - 1] += 1;
        }
        Ok(MultiIndex(r))
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// 0-based positions with a positive exponent.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > 0)
            .map(|(j, _)| j)
    }

    /// `q! / (r_1! ... r_N!)` in exact integer arithmetic.
    pub fn multinomial(&self) -> Result<u128> {
        let mut total: u128 = 0;
        let mut coeff: u128 = 1;
        for &r in &self.0 {
            total += r as u128;
            coeff = coeff
                .checked_mul(binomial(total, r as u128).ok_or_else(|| overflow(self))?)
                .ok_or_else(|| overflow(self))?;
        }
        Ok(coeff)
    }

    /// `∏ x_ℓ^{r_ℓ}`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.support()
            .map(|j| x[j].powi(self.0[j] as i32))
            .product()
    }
}

fn overflow(r: &MultiIndex) -> Error {
    Error::Overflow(format!("multinomial coefficient of {r} exceeds u128"))
}

/// `X1^2`, `X3*X10`, `X2^2*X5`.
impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for j in self.support() {
            if !first {
                f.write_str("*")?;
            }
            first = false;
            match self.0[j] {
                1 => write!(f, "X{}", j + 1)?,
                r => write!(f, "X{}^{r}", j + 1)?,
            }
        }
        if first {
            f.write_str("1")?;
        }
        Ok(())
    }
}

/// `C(n, k)` with overflow detection.
pub fn binomial(n: u128, k: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 1..=k {
        // c * (n - k + i) / i stays integral at every step
        c = c.checked_mul(n - k + i)? / i;
    }
    Some(c)
}

/// `|Δ_{N,q}| = C(N+q-1, N-1)`, or `None` on overflow.
pub fn count_multi_indices(n: usize, q: u32) -> Option<u128> {
    binomial((n as u128 + q as u128).checked_sub(1)?, n as u128 - 1)
}

/// All exponent vectors of length `n` summing to `q`, in descending
/// lexicographic order.
pub fn enumerate_multi_indices(n: usize, q: u32) -> Result<Vec<MultiIndex>> {
    enumerate_multi_indices_capped(n, q, DEFAULT_MAX_COLUMNS)
}

pub fn enumerate_multi_indices_capped(n: usize, q: u32, cap: u128) -> Result<Vec<MultiIndex>> {
    if n == 0 || q == 0 {
        return Err(Error::Shape(format!(
            "need N >= 1 and q >= 1, got N = {n}, q = {q}"
        )));
    }
    let count = count_multi_indices(n, q).ok_or_else(|| {
        Error::Overflow(format!(
            "C({}, {}) overflows",
            n as u64 + q as u64 - 1,
            n - 1
        ))
    })?;
    if count > cap {
        return Err(Error::Overflow(format!(
            "{count} multi-indices for N = {n}, q = {q} exceeds the cap of {cap}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0u32; n];
    fill_descending(&mut current, 0, q, &mut out);
    debug_assert_eq!(out.len() as u128, count);
    Ok(out)
}

fn fill_descending(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(MultiIndex(current.to_vec()));
        return;
    }
    for r in (0..=remaining).rev() {
        current[pos] = r;
        fill_descending(current, pos + 1, remaining - r, out);
    }
    current[pos] = 0;
}

/// The lifted matrix `A^q` with its column semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedSystem {
    matrix: DMatrix<f64>,
    index_map: Vec<MultiIndex>,
    q: u32,
}

impl LiftedSystem {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn index_map(&self) -> &[MultiIndex] {
        &self.index_map
    }

    pub fn order(&self) -> u32 {
        self.q
    }

    pub fn column_of(&self, r: &MultiIndex) -> Option<usize> {
        // index_map is sorted in descending order
        self.index_map.binary_search_by(|probe| r.cmp(probe)).ok()
    }

    /// Unit-row version of the lifted matrix for the estimator.
    pub fn normalized(&self) -> Result<MeasurementSystem> {
        normalize_rows(self.matrix.clone())
    }

    /// Monomials of `x` in column order; lifts a point into moment coordinates.
    pub fn lift_point(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(x, self.index_map.first().map_or(0, MultiIndex::len))?;
        let xs = x.as_slice();
        Ok(DVector::from_iterator(
            self.index_map.len(),
            self.index_map.iter().map(|r| r.monomial(xs)),
        ))
    }

    /// Writes `col,r1,...,rN`, one line per lifted column.
    pub fn write_index_map_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.index_map.first().map_or(0, MultiIndex::len);
        write!(w, "col")?;
        for l in 1..=n {
            write!(w, ",r{l}")?;
        }
        writeln!(w)?;
        for (j, r) in self.index_map.iter().enumerate() {
            write!(w, "{}", j + 1)?;
            for e in r.exponents() {
                write!(w, ",{e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Builds `A^q` from the rows of `system` exactly as given (no normalization).
///
/// Entry `(i, j)` is `multinomial(q; r) · ∏_ℓ a_{iℓ}^{r_ℓ}` with `r` the
/// `j`-th multi-index.
pub fn lift_matrix(system: &MeasurementSystem, q: u32) -> Result<LiftedSystem> {
    let a = system.matrix();
    let index_map = enumerate_multi_indices(a.ncols(), q)?;
    let coefficients = index_map
        .iter()
        .map(|r| r.multinomial().map(|c| c as f64))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = DMatrix::zeros(a.nrows(), index_map.len());
    for i in 0..a.nrows() {
        let row: Vec<f64> = a.row(i).iter().copied().collect();
        for (j, (r, c)) in index_map.iter().zip(&coefficients).enumerate() {
            matrix[(i, j)] = c * r.monomial(&row);
        }
    }
    Ok(LiftedSystem {
        matrix,
        index_map,
        q,
    })
}

/// `y^q`.
pub fn lift_observation(y: f64, q: u32) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::NonFinite("observation"));
    }
    let lifted = y.powi(q as i32);
    if !lifted.is_finite() {
        return Err(Error::NonFinite("lifted observation"));
    }
    Ok(lifted)
}

/// True iff some row of `system` is nonzero on every link in the support of `r`.
pub fn estimable(r: &MultiIndex, system: &MeasurementSystem) -> Result<bool> {
    if r.len() != system.cols() {
        return Err(Error::DimensionMismatch {
            expected: system.cols(),
            got: r.len(),
        });
    }
    let a = system.matrix();
    Ok((0..a.nrows()).any(|i| r.support().all(|j| a[(i, j)] != 0.0)))
}

/// True iff the smallest singular value of `A^q` exceeds the rank threshold.
pub fn generic_rank_check(lifted: &LiftedSystem) -> bool {
    generic_rank_check_with(lifted, crate::linalg::DEFAULT_RANK_THRESHOLD)
}

pub fn generic_rank_check_with(lifted: &LiftedSystem, threshold: f64) -> bool {
    let a = &lifted.matrix;
    if a.nrows() > a.ncols() {
        return false;
    }
    let sv = a.clone().singular_values();
    sv.len() == a.nrows() && sv.min() > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::path_link_matrix;

    fn mi(r: &[u32]) -> MultiIndex {
        MultiIndex::new(r.to_vec())
    }

    #[test]
    fn enumerates_binomial_case_in_descending_order() {
        let idx = enumerate_multi_indices(2, 2).unwrap();
        assert_eq!(idx, vec![mi(&[2, 0]), mi(&[1, 1]), mi(&[0, 2])]);
    }

    #[test]
    fn enumerates_thirteen_links_at_order_two() {
        let idx = enumerate_multi_indices(13, 2).unwrap();
        assert_eq!(idx.len(), 91);
        assert!(idx.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn single_link_has_one_index() {
        for q in 1..6 {
            assert_eq!(enumerate_multi_indices(1, q).unwrap(), vec![mi(&[q])]);
        }
    }

    #[test]
    fn enumeration_cap() {
        assert!(matches!(
            enumerate_multi_indices(200, 5),
            Err(Error::Overflow(_))
        ));
        assert!(enumerate_multi_indices_capped(4, 3, 19).is_err());
        assert_eq!(enumerate_multi_indices_capped(4, 3, 20).unwrap().len(), 20);
        assert!(enumerate_multi_indices(0, 2).is_err());
        assert!(enumerate_multi_indices(3, 0).is_err());
    }

    #[test]
    fn multinomial_coefficients() {
        assert_eq!(mi(&[1, 1]).multinomial().unwrap(), 2);
        assert_eq!(mi(&[2, 0]).multinomial().unwrap(), 1);
        assert_eq!(mi(&[1, 2, 3]).multinomial().unwrap(), 60);
        assert!(matches!(
            mi(&[60, 60, 60]).multinomial(),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn lifts_small_rows() {
        let sys = MeasurementSystem::from_rows(&[vec![1., 1.], vec![2., 3.]]).unwrap();
        let lifted = lift_matrix(&sys, 2).unwrap();
        assert_eq!(
            lifted.matrix().row(0).iter().copied().collect::<Vec<_>>(),
            [1., 2., 1.]
        );
        assert_eq!(
            lifted.matrix().row(1).iter().copied().collect::<Vec<_>>(),
            [4., 12., 9.]
        );
    }

    #[test]
    fn lifting_at_order_one_is_identity() {
        let sys = MeasurementSystem::new(path_link_matrix()).unwrap();
        let lifted = lift_matrix(&sys, 1).unwrap();
        // descending order at q = 1 is e_1, e_2, ..., e_N
        assert_eq!(lifted.matrix(), sys.matrix());
    }

    #[test]
    fn observation_lifting() {
        assert_eq!(lift_observation(2.0, 3).unwrap(), 8.0);
        assert_eq!(lift_observation(1.0, 7).unwrap(), 1.0);
        assert!((lift_observation(118.41, 2).unwrap() - 14020.9281).abs() < 0.005);
        assert!(lift_observation(f64::INFINITY, 2).is_err());
    }

    #[test]
    fn estimability_on_reference_network() {
        let sys = MeasurementSystem::new(path_link_matrix()).unwrap();
        let r = MultiIndex::from_factors(13, &[3, 10]).unwrap();
        assert!(estimable(&r, &sys).unwrap());
        let r = MultiIndex::from_factors(13, &[1, 7]).unwrap();
        assert!(!estimable(&r, &sys).unwrap());
        for j in 1..=13 {
            let r = MultiIndex::from_factors(13, &[j, j]).unwrap();
            assert!(estimable(&r, &sys).unwrap(), "link {j}");
        }
        assert!(estimable(&mi(&[1, 1]), &sys).is_err());
    }

    #[test]
    fn rank_checks() {
        let sys = MeasurementSystem::new(path_link_matrix()).unwrap();
        assert!(generic_rank_check(&lift_matrix(&sys, 2).unwrap()));

        let dup = MeasurementSystem::from_rows(&[vec![1., 2., 0.], vec![1., 2., 0.]]).unwrap();
        for q in 1..4 {
            assert!(!generic_rank_check(&lift_matrix(&dup, q).unwrap()));
        }

        let single = MeasurementSystem::from_rows(&[vec![0.5, -1., 0.]]).unwrap();
        assert!(generic_rank_check(&lift_matrix(&single, 2).unwrap()));
    }

    #[test]
    fn labels_and_column_lookup() {
        assert_eq!(mi(&[2, 0, 0]).to_string(), "X1^2");
        assert_eq!(mi(&[0, 1, 1]).to_string(), "X2*X3");
        let sys = MeasurementSystem::new(path_link_matrix()).unwrap();
        let lifted = lift_matrix(&sys, 2).unwrap();
        for (j, r) in lifted.index_map().iter().enumerate() {
            assert_eq!(lifted.column_of(r), Some(j));
        }
    }

    #[test]
    fn index_map_csv() {
        let sys = MeasurementSystem::from_rows(&[vec![1., 1.]]).unwrap();
        let mut buf = Vec::new();
        lift_matrix(&sys, 2)
            .unwrap()
            .write_index_map_csv(&mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "col,r1,r2\n1,2,0\n2,1,1\n3,0,2\n"
        );
    }
}
