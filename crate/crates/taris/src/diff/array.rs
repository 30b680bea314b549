//! Dense row-major f64 array with shape metadata and finiteness checks.

use crate::{Error, Result};

/// A dense row-major array of `f64` values.
///
/// The last axis is contiguous. Rank is arbitrary, though most operations in
/// this crate work over rank-1 and rank-2 arrays (vectors and matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DiffArray {
    /// Builds an array, validating that the value count matches the shape
    /// product and that every entry is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Shape(format!(
                "array with shape {:?} needs {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        let arr = DiffArray { shape, values };
        arr.check_finite("new")?;
        Ok(arr)
    }

    /// An array of zeros with the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        DiffArray {
            shape,
            values: vec![0.0; n],
        }
    }

    /// A rank-0-like scalar, stored as shape `[1]`.
    pub fn scalar(v: f64) -> Result<Self> {
        DiffArray::new(vec![1], vec![v])
    }

    /// The scalar value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on array with {} elements",
                self.values.len()
            )));
        }
        Ok(self.values[0])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of scalar elements.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Interprets the array as rows over its last axis: returns
    /// `(row_count, row_width)`. A rank-1 array is a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.values.len() / cols.max(1), cols)
            }
        }
    }

    /// Errors with `Error::Numerical` if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite value {v} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }
}
