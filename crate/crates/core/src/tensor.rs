//! Dense f64 tensors of rank 1-4 with an optional gradient buffer.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense N-dimensional float array in row-major order.
///
/// The gradient slot is populated by [`crate::graph::Graph::backward`];
/// it always has the same shape as the data when present.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Tensor> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
            grad: None,
        })
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Tensor> {
        let mut t = Tensor::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            dims: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Uniform draws in [lo, hi).
    pub fn rand_uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
        let mut t = Tensor::zeros(dims)?;
        for v in &mut t.data {
            *v = rng.uniform(lo, hi);
        }
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with new dims of the same element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.dims,
                self.numel(),
                dims
            )));
        }
        Tensor::new(dims, self.data.clone())
    }

    /// Flat index for a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 4);
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx4(n, c, y, x)]
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::invalid(format!(
            "tensor rank must be 1-4, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("zero-sized dim in {:?}", dims)));
    }
    Ok(())
}

/// Xavier (uniform fan-balanced) initialization: i.i.d. uniform on
/// [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init(fan_in: usize, fan_out: usize, dims: &[usize], seed: u64) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "xavier_init requires positive fans, got fan_in={fan_in} fan_out={fan_out}"
        )));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = Rng::new(seed);
    Tensor::rand_uniform(dims, -a, a, &mut rng)
}
