use super::Real;
use crate::error::{Error, Result};

/// Dense `(batch, channels, height, width)` tensor in row-major NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn filled(dims: [usize; 4], v: T) -> Self {
        Self { dims, data: vec![v; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {dims:?} ({want} expected)",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `(channels, height, width)` block of one sample.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|v| *v = *v * k);
    }

    /// Errors on the first NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}: value {i} is {:?}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }
}
