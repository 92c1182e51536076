//! Dense row-major real matrices.
//!
//! Every Jacobian in the engine lives in a [`Matrix`]: the carried
//! sensitivity blocks (`|R^k| x |P|`), the cell Jacobians with respect to
//! parameters and previous recurred state, and the output Jacobians.
//! Vectors are plain `Vec<f64>`.

use std::fmt;

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(rhs)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Row vector times matrix: `v^T * self`.
    pub fn vec_mul(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "vec_mul",
                left: (1, v.len()),
                right: self.shape(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += vr * a;
            }
        }
        Ok(out)
    }

    /// Matrix times column vector.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "mul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks blocks with equal column counts on top of each other.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: b.shape(),
                });
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Places blocks with equal row counts side by side.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, Matrix::rows);
        let cols: usize = blocks.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            if b.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "hstack",
                    left: (rows, offset),
                    right: b.shape(),
                });
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + b.cols].copy_from_slice(b.row(r));
            }
            offset += b.cols;
        }
        Ok(out)
    }

    /// Copies the sub-block starting at `(row, col)` with the given shape.
    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(row + r)[col..col + cols]);
        }
        out
    }
}

/// `out = a * b`, overwriting `out`. Shapes must already agree.
fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.add(b)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

/// Largest symmetric relative error `|a-b| / max(|a|, |b|, floor)` over all
/// entries. The floor keeps exact zeros on both sides from producing 0/0.
pub fn max_rel_err(a: &Matrix, b: &Matrix, floor: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_rel_err",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_rel_err floor must be positive, got {floor}"
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let denom = x.abs().max(y.abs()).max(floor);
            (x - y).abs() / denom
        })
        .fold(0.0_f64, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::SplitMix64;

    fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = SplitMix64::new(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(max_rel_err(&got, &triple_loop(&a, &b), 1e-15).unwrap() <= 1e-14);
    }

    #[test]
    fn product_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::ShapeMismatch { left: (2, 3), right: (2, 3), .. }
        ));
    }

    #[test]
    fn addition() {
        let m = Matrix::from_rows(&[&[1.5, -2.0]]);
        assert_eq!(add(&m, &Matrix::zeros(1, 2)).unwrap(), m);
        assert_eq!(
            add(&Matrix::from_rows(&[&[1.0]]), &Matrix::from_rows(&[&[2.0]])).unwrap(),
            Matrix::from_rows(&[&[3.0]])
        );
        let mut rng = SplitMix64::new(3);
        let a = random(&mut rng, 4, 4);
        let b = random(&mut rng, 4, 4);
        assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
        assert!(add(&a, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn relative_error() {
        let m = Matrix::from_rows(&[&[1.0, -3.0]]);
        assert_eq!(max_rel_err(&m, &m, 1e-12).unwrap(), 0.0);
        let e = max_rel_err(
            &Matrix::from_rows(&[&[1.0]]),
            &Matrix::from_rows(&[&[1.1]]),
            1e-12,
        )
        .unwrap();
        assert!((e - 0.1 / 1.1).abs() < 1e-15);
        let z = Matrix::zeros(1, 1);
        assert_eq!(max_rel_err(&z, &z, 1e-300).unwrap(), 0.0);
        assert!(max_rel_err(&z, &Matrix::zeros(2, 1), 1.0).is_err());
        assert!(max_rel_err(&z, &z, 0.0).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]])), 5.0);
        assert!((frobenius_norm(&Matrix::identity(7)) - 7f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stacking_and_blocks() {
        let a = Matrix::from_rows(&[&[1.0, 2.0]]);
        let b = Matrix::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let v = Matrix::vstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(v.shape(), (3, 2));
        assert_eq!(v.block(1, 0, 2, 2), b);
        let h = Matrix::hstack(&[b.transpose(), Matrix::column_vector(&[9.0, 8.0])]).unwrap();
        assert_eq!(h.row(1), &[4.0, 6.0, 8.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-2.0f64..2.0, rows * cols)
                .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
        }

        fn triple() -> impl Strategy<Value = (Matrix, Matrix, Matrix, Matrix)> {
            (1usize..6, 1usize..6, 1usize..6, 1usize..6)
                .prop_flat_map(|(m, n, p, q)| (mat(m, n), mat(n, p), mat(p, q), mat(m, n)))
        }

        proptest! {
            #[test]
            fn associativity((a, b, c, _) in triple()) {
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                prop_assert!(max_rel_err(&left, &right, 1e-10).unwrap() <= 1e-10);
            }

            #[test]
            fn distributivity((a, c, _, b) in triple()) {
                let left = a.add(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&c).unwrap().add(&b.matmul(&c).unwrap()).unwrap();
                prop_assert!(max_rel_err(&left, &right, 1e-10).unwrap() <= 1e-10);
            }

            #[test]
            fn submultiplicative((a, b, _, _) in triple()) {
                let ab = a.matmul(&b).unwrap();
                prop_assert!(ab.frobenius_norm() <= a.frobenius_norm() * b.frobenius_norm() * (1.0 + 1e-12));
            }
        }
    }
}
