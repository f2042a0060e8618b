//! Dense row-major arrays.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data }
    }

    /// Build a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::shape("from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    let st = strides(shape);
    idx.iter().zip(&st).map(|(i, s)| i * s).sum()
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the flat offset of the broadcast source element in `src`.
pub(crate) fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let pad = out.len() - src.len();
    let src_strides = strides(src);
    // effective stride per output axis, zero where broadcast
    let eff: Vec<usize> = (0..out.len())
        .map(|i| if i < pad || src[i - pad] == 1 { 0 } else { src_strides[i - pad] })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
    }

    #[test]
    fn broadcast_map_repeats_rows() {
        let m = broadcast_map(&[2, 3], &[3]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 3], &[2, 1]);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    }
}
