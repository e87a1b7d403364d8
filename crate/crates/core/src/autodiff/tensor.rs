use crate::error::{shape_err, FlowError, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Hard one-hot encoding of `symbols` (row-major `[rows, width]`) as `[rows, width, k]`.
    pub fn one_hot(symbols: &[usize], rows: usize, width: usize, k: usize) -> Result<Self> {
        if symbols.len() != rows * width {
            return Err(FlowError::LengthMismatch {
                expected: rows * width,
                got: symbols.len(),
            });
        }
        let mut data = vec![0.0; rows * width * k];
        for (i, &s) in symbols.iter().enumerate() {
            if s >= k {
                return Err(FlowError::SymbolOutOfRange { symbol: s, k });
            }
            data[i * k + s] = 1.0;
        }
        Ok(Self {
            shape: vec![rows, width, k],
            data,
        })
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

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Argmax along the last axis, lowest index on ties.
    pub fn argmax_last(&self) -> Vec<usize> {
        self.data
            .chunks(self.last_dim().max(1))
            .map(argmax)
            .collect()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
