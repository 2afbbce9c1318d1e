//! Dense row-major tensors over a configurable scalar type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating point scalar usable by the engine. `f32` is the training
/// precision, `f64` is used for gradient checks and bit-reproducible runs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: extents checked above; strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, 4, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, 8, "f64", matrixmultiply::dgemm);

/// Contiguous row-major tensor. `shape.iter().product() == data.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> T {
        // fixed left-to-right order
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// Plain row-major matmul `a[m,k] @ b[k,n]` used outside the graph.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        k as isize,
        1,
        &b.data,
        n as isize,
        1,
        T::zero(),
        &mut out.data,
        n as isize,
        1,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&x, &eye).unwrap(), x);
    }

    #[test]
    fn sum_of_zeros() {
        assert_eq!(Tensor::<f32>::zeros(&[3, 4]).sum(), 0.0);
    }
}
