use crate::error::{Error, Result};

/// Dense row-major `f32` array. A tensor with empty `dims` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized axis in {dims:?}")));
        }
        if numel(&dims) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("dims {dims:?} need {} values, got {}", numel(&dims), data.len()),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; numel(dims)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = numel(dims);
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Row `i` of a tensor viewed as `[rows, last]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = *self.dims.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bit-level equality of values (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }
}
