//! Dense row-major f64 matrices and vectors, sized for desk-scale models.
//! Entry points check shapes and input finiteness and return errors rather
//! than panicking; results are not re-checked (overflow surfaces at the
//! next consumer).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: "Matrix::new" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        if !all_finite(&self.data) || !all_finite(&rhs.data) {
            return Err(Error::NonFinite { op: "matmul" });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times vector of {}", self.rows, self.cols, x.len()),
            ));
        }
        if !all_finite(&self.data) || !all_finite(&x.data) {
            return Err(Error::NonFinite { op: "matvec" });
        }
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (&w, &v) in row.iter().zip(&x.data) {
                acc += w * v;
            }
            *o = acc;
        }
        Ok(Vector { data: out })
    }

    /// `W^T u` without materializing the transpose.
    pub fn t_matvec(&self, u: &Vector) -> Result<Vector> {
        if self.rows != u.len() {
            return Err(Error::shape(
                "t_matvec",
                format!("{}x{} transposed times vector of {}", self.rows, self.cols, u.len()),
            ));
        }
        if !all_finite(&self.data) || !all_finite(&u.data) {
            return Err(Error::NonFinite { op: "t_matvec" });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let ui = u.data[i];
            if ui == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * ui;
            }
        }
        Ok(Vector { data: out })
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

    /// `self += s * u v^T`; used to accumulate weight gradients.
    pub fn add_scaled_outer(&mut self, u: &Vector, v: &Vector, s: f64) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape(
                "add_scaled_outer",
                format!("{}x{} vs outer {}x{}", self.rows, self.cols, u.len(), v.len()),
            ));
        }
        for i in 0..self.rows {
            let su = s * u.data[i];
            if su == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, &x) in row.iter_mut().zip(&v.data) {
                *w += su * x;
            }
        }
        Ok(())
    }
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Vector {
        Vector { data }
    }

    pub fn zeros(n: usize) -> Vector {
        Vector { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", format!("{} vs {}", self.len(), other.len())));
        }
        if !all_finite(&self.data) || !all_finite(&other.data) {
            return Err(Error::NonFinite { op: "dot" });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape("add", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape("sub", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self += s * other`.
    pub fn add_assign_scaled(&mut self, other: &Vector, s: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "add_assign_scaled",
                format!("{} vs {}", self.len(), other.len()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}
