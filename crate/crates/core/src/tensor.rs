//! Dense row-major f64 tensors and the small linear-algebra kernels needed
//! by the DCCA alignment (symmetric eigendecomposition, inverse square root).

use crate::error::{Error, Result};

/// Dense tensor: a shape plus a flat row-major f64 buffer.
///
/// Tensors are immutable values once returned by a public operation; every
/// entry of such a tensor is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite entry in tensor of shape {shape:?}"
            )));
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

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// d x d identity matrix.
    pub fn eye(d: usize) -> Self {
        let mut t = Self::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Matrix product. Inner dimensions must agree.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order so the inner loop runs over contiguous rows of `other`.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} entries) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Mean of each column of a matrix.
    pub fn col_means(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        Tensor::new(vec![n], out)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Input is symmetrized as (A + A')/2 before sweeping. Returns eigenvalues
/// sorted descending and the matching orthonormal eigenvectors as columns,
/// so A = Q diag(l) Q'.
pub fn sym_eig(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2()?;
    if m != n {
        return Err(Error::Shape(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    const TOL: f64 = 1e-11;
    const MAX_SWEEPS: usize = 100;

    // Work on the symmetrized copy.
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (a.data[i * n + j] + a.data[j * n + i]);
        }
    }
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }

    if n > 1 {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0f64;
            for p in 0..n - 1 {
                for r in p + 1..n {
                    off = off.max(w[p * n + r].abs());
                }
            }
            if off < TOL {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for r in p + 1..n {
                    let apq = w[p * n + r];
                    if apq.abs() < f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = w[p * n + p];
                    let aqq = w[r * n + r];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        let s = theta.signum();
                        s / (theta.abs() + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // Rotate rows/columns p and r of W.
                    for k in 0..n {
                        let wkp = w[k * n + p];
                        let wkq = w[k * n + r];
                        w[k * n + p] = c * wkp - s * wkq;
                        w[k * n + r] = s * wkp + c * wkq;
                    }
                    for k in 0..n {
                        let wpk = w[p * n + k];
                        let wqk = w[r * n + k];
                        w[p * n + k] = c * wpk - s * wqk;
                        w[r * n + k] = s * wpk + c * wqk;
                    }
                    // Accumulate the rotation into Q.
                    for k in 0..n {
                        let qkp = q[k * n + p];
                        let qkq = q[k * n + r];
                        q[k * n + p] = c * qkp - s * qkq;
                        q[k * n + r] = s * qkp + c * qkq;
                    }
                }
            }
        }
        if !converged {
            let mut off = 0.0f64;
            for p in 0..n - 1 {
                for r in p + 1..n {
                    off = off.max(w[p * n + r].abs());
                }
            }
            if off >= TOL {
                return Err(Error::Convergence(format!(
                    "Jacobi sweep limit hit; max off-diagonal residual {off:.3e}"
                )));
            }
        }
    }

    // Sort eigenvalues descending, permuting eigenvector columns with them.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].partial_cmp(&w[i * n + i]).unwrap());
    let mut vals = vec![0.0; n];
    let mut vecs = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = w[src * n + src];
        for k in 0..n {
            vecs[k * n + dst] = q[k * n + src];
        }
    }
    Ok((Tensor::new(vec![n], vals)?, Tensor::new(vec![n, n], vecs)?))
}

/// Inverse square root of a PSD matrix: Q diag(max(l, floor))^(-1/2) Q'.
///
/// Eigenvalues below -1e-9 mean the input is not PSD and are an error;
/// small negatives within that tolerance are lifted by the floor.
pub fn inv_sqrt_psd(a: &Tensor, floor: f64) -> Result<Tensor> {
    assert!(floor > 0.0, "floor must be positive");
    let (vals, vecs) = sym_eig(a)?;
    if let Some(bad) = vals.data().iter().find(|&&l| l < -1e-9) {
        return Err(Error::NotPsd(format!(
            "eigenvalue {bad:.3e} below -1e-9 in inv_sqrt_psd"
        )));
    }
    let d = vals.len();
    let inv_sqrt: Vec<f64> = vals
        .data()
        .iter()
        .map(|&l| 1.0 / l.max(floor).sqrt())
        .collect();
    // Q diag(s) Q'
    let mut scaled = vecs.clone(); // columns scaled by inv_sqrt
    for i in 0..d {
        for j in 0..d {
            scaled.data_mut()[i * d + j] = vecs.get2(i, j) * inv_sqrt[j];
        }
    }
    scaled.matmul(&vecs.transpose()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut Rng, m: usize, n: usize) -> Tensor {
        let data: Vec<f64> = (0..m * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let prod = a.matmul(&Tensor::eye(2)).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let prod = a.matmul(&b).unwrap();
        assert_eq!(prod.shape(), &[1, 1]);
        assert_eq!(prod.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let fast = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get2(i, k) * b.get2(k, j);
                }
                assert!((fast.get2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn sym_eig_diagonal() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        assert!((vals.data()[0] - 3.0).abs() < 1e-12);
        assert!((vals.data()[1] - 1.0).abs() < 1e-12);
        // Columns are +-unit vectors.
        for j in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| vecs.get2(i, j)).collect();
            let nrm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nrm - 1.0).abs() < 1e-12);
        }
        assert!(vecs.get2(0, 0).abs() > 0.99); // first eigenvector along e1
    }

    #[test]
    fn sym_eig_analytic_2x2() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        assert!((vals.data()[0] - 3.0).abs() < 1e-11);
        assert!((vals.data()[1] - 1.0).abs() < 1e-11);
        let s = 1.0 / 2.0f64.sqrt();
        // Eigenvectors up to sign: (1,1)/sqrt(2) then (1,-1)/sqrt(2).
        let c0 = (vecs.get2(0, 0).abs() - s).abs();
        let c1 = (vecs.get2(1, 0).abs() - s).abs();
        assert!(c0 < 1e-11 && c1 < 1e-11);
        assert!((vecs.get2(0, 1) + vecs.get2(1, 1)).abs() < 1e-11);
    }

    #[test]
    fn sym_eig_reconstructs_random_5x5() {
        let mut rng = Rng::new(5);
        let m = random_matrix(&mut rng, 5, 5);
        let a = m.add(&m.transpose().unwrap()).unwrap().scale(0.5);
        let (vals, q) = sym_eig(&a).unwrap();
        let lam = {
            let mut t = Tensor::zeros(&[5, 5]);
            for i in 0..5 {
                t.set2(i, i, vals.data()[i]);
            }
            t
        };
        let rec = q
            .matmul(&lam)
            .unwrap()
            .matmul(&q.transpose().unwrap())
            .unwrap();
        assert!(rec.sub(&a).unwrap().max_abs() < 1e-10);
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(qtq.sub(&Tensor::eye(5)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn sym_eig_rejects_non_square() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(sym_eig(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn inv_sqrt_identity() {
        let r = inv_sqrt_psd(&Tensor::eye(3), 1e-12).unwrap();
        assert!(r.sub(&Tensor::eye(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_diagonal() {
        let a = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let r = inv_sqrt_psd(&a, 1e-12).unwrap();
        assert!((r.get2(0, 0) - 0.5).abs() < 1e-12);
        assert!((r.get2(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.get2(0, 1).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_defining_property() {
        let mut rng = Rng::new(77);
        let m = random_matrix(&mut rng, 4, 4);
        let a = m
            .matmul(&m.transpose().unwrap())
            .unwrap()
            .add(&Tensor::eye(4).scale(0.1))
            .unwrap();
        let s = inv_sqrt_psd(&a, 1e-12).unwrap();
        let check = s.matmul(&a).unwrap().matmul(&s).unwrap();
        assert!(check.sub(&Tensor::eye(4)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn inv_sqrt_rejects_negative_definite() {
        let a = Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(inv_sqrt_psd(&a, 1e-12), Err(Error::NotPsd(_))));
    }

    #[test]
    fn non_finite_entries_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..500, m in 1usize..8, k in 1usize..8, l in 1usize..8, n in 1usize..8) {
            let mut rng = Rng::new(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-10);
        }

        #[test]
        fn eig_sum_equals_trace(seed in 0u64..500, n in 1usize..7) {
            let mut rng = Rng::new(seed);
            let m = random_matrix(&mut rng, n, n);
            let a = m.add(&m.transpose().unwrap()).unwrap().scale(0.5);
            let (vals, _) = sym_eig(&a).unwrap();
            let trace: f64 = (0..n).map(|i| a.get2(i, i)).sum();
            prop_assert!((vals.sum() - trace).abs() < 1e-10);
        }

        #[test]
        fn inv_sqrt_squares_to_inverse(seed in 0u64..200, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let m = random_matrix(&mut rng, n, n);
            // Eigenvalues well above the floor by construction.
            let a = m
                .matmul(&m.transpose().unwrap())
                .unwrap()
                .add(&Tensor::eye(n).scale(0.5))
                .unwrap();
            let s = inv_sqrt_psd(&a, 1e-12).unwrap();
            let prod = s.matmul(&s).unwrap().matmul(&a).unwrap();
            prop_assert!(prod.sub(&Tensor::eye(n)).unwrap().max_abs() < 1e-8);
        }
    }
}
