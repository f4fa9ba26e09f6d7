//! Dense row-major tensors.
//!
//! Shapes are arbitrary-rank but the linear algebra the models need is 1-D
//! and 2-D only. All kernels iterate in a fixed order, so identical inputs
//! give bit-identical outputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from rows; rows must be nonempty and of equal length.
    pub fn matrix(rows: &[Vec<S>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::contract("matrix rows must be nonempty and rectangular"));
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: rows.concat(),
        })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n, m] => Ok((*n, *m)),
            _ => Err(Error::contract(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> S {
        let (_, m) = (self.shape[0], self.shape[1]);
        self.data[row * m + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn inf_norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Standard product: `self` is n×k, `rhs` is k×m.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = self.dims2()?;
        let (k2, m) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: mm(&self.data, &rhs.data, n, k, m),
        })
    }

    /// `self · rhsᵀ`: `self` is n×k, `rhs` is m×k.
    pub fn matmul_bt(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = self.dims2()?;
        let (m, k2) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: mm_bt(&self.data, &rhs.data, n, k, m),
        })
    }

    /// `selfᵀ · rhs`: `self` is n×k, `rhs` is n×m.
    pub fn matmul_ta(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = self.dims2()?;
        let (n2, m) = rhs.dims2()?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_ta",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: vec![k, m],
            data: mm_ta(&self.data, &rhs.data, n, k, m),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (n, m) = self.dims2()?;
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

// Loop orders keep the inner accesses contiguous.

fn mm<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mm_bt<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    // a: n×k, b: m×k → a·bᵀ: n×m
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

fn mm_ta<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    // a: n×k, b: n×m → aᵀ·b: k×m
    let mut out = vec![S::zero(); k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = arow[p];
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    type T = Tensor<f64>;

    fn random_matrix(rng: &mut Rng, n: usize, m: usize) -> T {
        let data: Vec<f64> = (0..n * m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(vec![n, m], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = T::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = T::matrix(&[vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_zero_operand() {
        let a = T::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = T::matrix(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = T::matrix(&[vec![1.0, 2.0]]).unwrap();
        let b = T::matrix(&[vec![3.0], vec![5.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[13.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let a = T::matrix(&[vec![1.0, 2.0]]).unwrap();
        let b = T::matrix(&[vec![1.0, 2.0]]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::stream(5, "tensor/tvariants");
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let c = random_matrix(&mut rng, 3, 6);
        let via_bt = a.matmul_bt(&b).unwrap();
        let explicit = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(via_bt.sub(&explicit).unwrap().inf_norm() < 1e-12);
        let via_ta = a.matmul_ta(&c).unwrap();
        let explicit = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(via_ta.sub(&explicit).unwrap().inf_norm() < 1e-12);
    }

    #[test]
    fn matmul_associative_at_tolerance() {
        let mut rng = Rng::stream(9, "tensor/assoc");
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 5);
            let b = random_matrix(&mut rng, 5, 6);
            let c = random_matrix(&mut rng, 6, 3);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.sub(&right).unwrap().inf_norm() <= 1e-9);
        }
    }

    #[test]
    fn new_rejects_mismatched_data_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn works_in_f32_too() {
        let a = Tensor::<f32>::matrix(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::<f32>::matrix(&[vec![3.0], vec![5.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[13.0f32]);
    }
}
