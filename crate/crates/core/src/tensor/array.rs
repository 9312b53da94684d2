use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(shape_err("Tensor::new", format!("dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("dims {dims:?} hold {n} values but data has {}", data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.sample(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.gen_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    /// Dims as `[N, C, H, W]`, failing for anything that is not rank 4.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err(op, format!("expected a rank-4 [N,C,H,W] tensor, got {:?}", self.dims))),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of sample `n` along the leading axis, keeping a leading dim of 1.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.data.len() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Tensor::from_parts(dims, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors whose leading dim is 1 along that axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut lead = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(shape_err("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            lead += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = lead;
        Ok(Tensor::from_parts(dims, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_dims() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_sample_round_trip() {
        let a = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2], |i| 10.0 + i as f64);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
        assert_eq!(s.sample(1), b);
        assert_eq!(s.sample(0), a);
    }
}
