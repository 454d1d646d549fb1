//! Row-major data containers and unit-ball preprocessing.

use crate::error::{Error, Result};

/// Slack allowed on the unit-ball constraint to absorb rounding in the
/// rescaling step.
pub const NORM_SLACK: f64 = 1e-12;

/// Dense row-major matrix of observations (one row per record).
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact would panic on cols == 0
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copies the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (i, row) in self.iter_rows().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
        Ok(())
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// An N×d dataset whose rows all lie in the closed unit L2 ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedDataset {
    x: RowMatrix,
    scale: f64,
}

impl BoundedDataset {
    /// Wraps rows that are already inside the unit ball; rejects anything
    /// else rather than rescaling.
    pub fn new(x: RowMatrix) -> Result<Self> {
        validate_shape(&x)?;
        x.check_finite()?;
        for (i, row) in x.iter_rows().enumerate() {
            let n = norm(row);
            if n > 1.0 + NORM_SLACK {
                return Err(Error::InvalidParams(format!(
                    "row {i} has norm {n} > 1; use preprocess() to rescale"
                )));
            }
        }
        Ok(Self { x, scale: 1.0 })
    }

    pub fn n(&self) -> usize {
        self.x.rows
    }

    pub fn d(&self) -> usize {
        self.x.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.x.iter_rows()
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.x
    }

    /// Factor the raw rows were divided by (1 when no rescaling happened).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Maps a point from the unit-ball space back to raw coordinates.
    pub fn to_raw(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.scale).collect()
    }

    /// Row subset sharing this dataset's scale factor.
    pub fn subset(&self, idx: &[usize]) -> BoundedDataset {
        BoundedDataset {
            x: self.x.select_rows(idx),
            scale: self.scale,
        }
    }
}

fn validate_shape(x: &RowMatrix) -> Result<()> {
    if x.rows == 0 {
        return Err(Error::Empty("dataset has no rows"));
    }
    if x.cols == 0 {
        return Err(Error::Empty("dataset has no columns"));
    }
    Ok(())
}

/// Divides every row by the largest row norm when that norm exceeds 1.
pub fn preprocess(raw: &RowMatrix) -> Result<BoundedDataset> {
    validate_shape(raw)?;
    raw.check_finite()?;
    let max_norm = raw.iter_rows().map(norm).fold(0.0, f64::max);
    if max_norm <= 1.0 + NORM_SLACK {
        return Ok(BoundedDataset {
            x: raw.clone(),
            scale: 1.0,
        });
    }
    let data = raw.data.iter().map(|v| v / max_norm).collect();
    Ok(BoundedDataset {
        x: RowMatrix {
            rows: raw.rows,
            cols: raw.cols,
            data,
        },
        scale: max_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> RowMatrix {
        RowMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn divides_by_max_norm() {
        let d = preprocess(&m(&[&[3.0, 4.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(d.row(0), &[0.6, 0.8]);
        assert_eq!(d.row(1), &[0.0, 0.2]);
        assert_eq!(d.scale(), 5.0);
        assert_eq!(d.to_raw(d.row(0)), vec![3.0, 4.0]);
    }

    #[test]
    fn inside_ball_is_unchanged() {
        let raw = m(&[&[0.5, 0.5], &[-0.1, 0.0]]);
        let d = preprocess(&raw).unwrap();
        assert_eq!(d.matrix(), &raw);
        assert_eq!(d.scale(), 1.0);
    }

    #[test]
    fn single_row() {
        let d = preprocess(&m(&[&[2.0, 0.0]])).unwrap();
        assert_eq!(d.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_names_row() {
        let err = preprocess(&m(&[&[1.0, 2.0], &[f64::NAN, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 0 }));
        let err = preprocess(&m(&[&[f64::INFINITY]])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 0 }));
    }

    #[test]
    fn empty_rejected() {
        let e = RowMatrix::new(0, 2, vec![]).unwrap();
        assert!(preprocess(&e).is_err());
    }

    #[test]
    fn new_rejects_outside_ball() {
        assert!(BoundedDataset::new(m(&[&[1.0, 1.0]])).is_err());
        assert!(BoundedDataset::new(m(&[&[0.6, 0.8]])).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn preprocess_idempotent(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..20)) {
                let raw = RowMatrix::from_rows(&rows).unwrap();
                let once = preprocess(&raw).unwrap();
                let twice = preprocess(once.matrix()).unwrap();
                prop_assert_eq!(once.matrix(), twice.matrix());
                for r in once.rows() {
                    prop_assert!(norm(r) <= 1.0 + NORM_SLACK);
                }
            }
        }
    }
}
