use crate::error::{ensure, Result};

/// Dense row-major tensor of `f64`. Most of the crate works with rank-2
/// `[rows, cols]` tensors; the general shape is kept for completeness.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            Dimension,
            "shape {:?} needs {} values, got {}",
            shape,
            expected,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    /// Stacks equal-length rows. An empty slice gives a `[0, 0]` tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            ensure!(
                row.len() == cols,
                Dimension,
                "row {} has {} columns, expected {}",
                i,
                row.len(),
                cols
            );
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = self.cols().max(1);
        self.data.chunks(c).take(self.rows())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise concatenation of rank-2 tensors with equal column counts.
    /// Empty (`0`-row) parts are skipped.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let non_empty: Vec<&&Tensor> = parts.iter().filter(|t| t.rows() > 0).collect();
        let cols = non_empty.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for t in non_empty {
            ensure!(
                t.cols() == cols,
                Dimension,
                "cannot concatenate {} columns onto {}",
                t.cols(),
                cols
            );
            data.extend_from_slice(&t.data);
            rows += t.rows();
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Copies of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }
}
