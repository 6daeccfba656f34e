//! Dense row-major tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward: {0}")]
    Backward(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Initial contents for [`Tensor::create`].
#[derive(Debug, Clone, PartialEq)]
pub enum Init<S> {
    Zeros,
    Full(S),
    Values(Vec<S>),
    SeededUniform { seed: u64, lo: S, hi: S },
}

/// A dense N-dimensional array. Storage is flat and row-major, no strides.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn create(shape: &[usize], init: Init<S>) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Full(v) => vec![v; n],
            Init::Values(values) => {
                if values.len() != n {
                    return Err(TensorError::LengthMismatch {
                        shape: shape.to_vec(),
                        expected: n,
                        actual: values.len(),
                    });
                }
                values
            }
            Init::SeededUniform { seed, lo, hi } => {
                if !(lo < hi) {
                    return Err(TensorError::InvalidArgument {
                        op: "create",
                        msg: format!("seeded_uniform needs lo < hi, got [{lo}, {hi})"),
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                uniform_vec(&mut rng, n, lo, hi)
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::create(shape, Init::Values(data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        Self::create(shape, Init::Full(v))
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform in `[lo, hi)` drawn from a caller-owned generator.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R, lo: S, hi: S) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: uniform_vec(rng, n, lo, hi),
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![S::zero(); other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
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

    /// Size of the last axis (channels for `H×W×C` maps).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Converts the element type, e.g. for `f32` storage.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::from_f64(x.to_f64_lossy()).unwrap_or_else(T::nan))
                .collect(),
        }
    }
}

fn uniform_vec<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, lo: S, hi: S) -> Vec<S> {
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    (0..n).map(|_| S::lit(rng.gen_range(lo..hi))).collect()
}

/// Row-major `[M×K]·[K×N]` product on raw slices.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_full() {
        let z = Tensor::<f64>::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::<f64>::create(&[1], Init::Full(3.5)).unwrap();
        assert_eq!(f.data(), &[3.5]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let init = Init::SeededUniform {
            seed: 7,
            lo: -1.0,
            hi: 1.0,
        };
        let a = Tensor::<f64>::create(&[4], init.clone()).unwrap();
        let b = Tensor::<f64>::create(&[4], init).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|&x| (-1.0..1.0).contains(&x)));
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
        let bad = Init::SeededUniform {
            seed: 1,
            lo: 1.0,
            hi: 1.0,
        };
        assert!(Tensor::<f64>::create(&[2], bad).is_err());
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.at(&[2, 1]), 5.0);
        assert!(t.reshape(&[4]).is_err());
    }
}
