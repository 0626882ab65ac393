//! Dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a plain value: it never refers to a tape and can be shared
//! freely across threads. Tape participation is handled by
//! [`crate::autodiff::Var`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim("dims2", format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        Self::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim("select_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(vec![idx.len(), c], data)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|x| x as f64 * 0.3 - 1.0).collect()).unwrap();
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        let mut out = vec![0.0; 8];
        matmul_bt_into(a.data(), b.data(), &mut out, 2, 3, 4);
        assert_eq!(out, expect.data());

        let expect = a.transpose().unwrap().matmul(&a).unwrap();
        let mut out = vec![0.0; 9];
        matmul_at_into(a.data(), a.data(), &mut out, 2, 3, 3);
        assert_eq!(out, expect.data());
    }
}
