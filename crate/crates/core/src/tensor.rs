//! Dense row-major `f64` tensors and the handful of kernels built on them.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
///
/// Every constructor that accepts external data rejects non-finite values,
/// so a `Tensor` obtained through the public API is always finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Skips the finiteness scan; shape is still checked in debug builds.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a scalar (or any one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::shape("item", format!("shape {:?} is not a scalar", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix; the length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", self.shape.len())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_raw(vec![c, r], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.shape.clone(), data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Copies the given rows into a new `[indices.len(), cols]` matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let r = self.rows();
        let c = self.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::OutOfRange(format!("row {i} of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Self::from_raw(vec![indices.len(), c], out))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `[m, k] x [k, n] -> [m, n]`, summing left to right over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// Softmax of a slice, computed with max subtraction.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax over the last axis. A vector is treated as a single row.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() || x.cols() == 0 {
        return Err(Error::Empty("softmax"));
    }
    x.check_finite("softmax input")?;
    let mut out = Tensor::zeros(&x.shape);
    let c = x.cols();
    for (xs, os) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        softmax_slice(xs, os);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::vector(vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        assert_eq!(matmul(&p, &c).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = matmul(
            &Tensor::matrix(3, 4, a.clone()).unwrap(),
            &Tensor::matrix(4, 2, b.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert_eq!(got.data()[i * 2 + j], s);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![1000.0; 3]).unwrap()).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax(&Tensor::vector(vec![]).unwrap()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn gather_out_of_range() {
        let t = Tensor::zeros(&[3, 2]);
        assert_eq!(t.gather_rows(&[2, 0]).unwrap().shape(), &[2, 2]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                xs in proptest::collection::vec(-50.0f64..50.0, 1..40),
                c in -100.0f64..100.0,
            ) {
                let x = Tensor::vector(xs.clone()).unwrap();
                let s = softmax(&x).unwrap();
                prop_assert!((s.sum() - 1.0).abs() < 1e-12);
                prop_assert!(s.data().iter().all(|&v| v >= 0.0));
                let shifted = softmax(&x.map(|v| v + c)).unwrap();
                for (a, b) in s.data().iter().zip(shifted.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn matmul_exact_on_integers(
                a in proptest::collection::vec(-20i32..20, 6),
                b in proptest::collection::vec(-20i32..20, 6),
            ) {
                let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                let got = matmul(
                    &Tensor::matrix(2, 3, af).unwrap(),
                    &Tensor::matrix(3, 2, bf).unwrap(),
                ).unwrap();
                for i in 0..2 {
                    for j in 0..2 {
                        let want: i32 = (0..3).map(|k| a[i * 3 + k] * b[k * 2 + j]).sum();
                        prop_assert_eq!(got.data()[i * 2 + j], want as f64);
                    }
                }
            }
        }
    }
}
