//! Minimal dense complex matrices for the classical baselines.
//!
//! The systems solved here are tiny (antenna-count sized), so a plain
//! partial-pivot LU over `Complex64` is both sufficient and easy to audit.

use num_complex::Complex64;

/// Row-major dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

/// The coefficient matrix had no usable pivot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SingularMatrix;

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Complex64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        CMat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn transpose(&self) -> CMat {
        let mut out = CMat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Conjugate-transpose product `self^H * other`.
    pub fn herm_mul(&self, other: &CMat) -> CMat {
        assert_eq!(self.rows, other.rows, "herm_mul: row mismatch");
        let mut out = CMat::zeros(self.cols, other.cols);
        for i in 0..self.cols {
            for j in 0..other.cols {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..self.rows {
                    acc += self.get(k, i).conj() * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_diag(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            let cur = self.get(i, i);
            self.set(i, i, cur + v);
        }
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, x.len(), "mul_vec: dimension mismatch");
        (0..self.rows)
            .map(|r| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (c, &xc) in x.iter().enumerate() {
                    acc += self.get(r, c) * xc;
                }
                acc
            })
            .collect()
    }

    /// Solves `self * Z = b` by partial-pivot LU. `self` must be square.
    pub fn solve(&self, b: &CMat) -> Result<CMat, SingularMatrix> {
        assert_eq!(self.rows, self.cols, "solve: matrix must be square");
        assert_eq!(self.rows, b.rows, "solve: rhs row mismatch");
        let n = self.rows;
        let mut a = self.clone();
        let mut z = b.clone();
        let scale = a.data.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        if scale == 0.0 {
            return Err(SingularMatrix);
        }
        let tol = scale * (n as f64) * 1e-14;
        for j in 0..n {
            let mut p = j;
            let mut best = a.get(j, j).norm();
            for i in (j + 1)..n {
                let m = a.get(i, j).norm();
                if m > best {
                    best = m;
                    p = i;
                }
            }
            if best <= tol {
                return Err(SingularMatrix);
            }
            if p != j {
                for c in 0..n {
                    let (x, y) = (a.get(j, c), a.get(p, c));
                    a.set(j, c, y);
                    a.set(p, c, x);
                }
                for c in 0..z.cols {
                    let (x, y) = (z.get(j, c), z.get(p, c));
                    z.set(j, c, y);
                    z.set(p, c, x);
                }
            }
            let pivot = a.get(j, j);
            for i in (j + 1)..n {
                let f = a.get(i, j) / pivot;
                if f == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in j..n {
                    let v = a.get(i, c) - f * a.get(j, c);
                    a.set(i, c, v);
                }
                for c in 0..z.cols {
                    let v = z.get(i, c) - f * z.get(j, c);
                    z.set(i, c, v);
                }
            }
        }
        for j in (0..n).rev() {
            let pivot = a.get(j, j);
            for c in 0..z.cols {
                let mut acc = z.get(j, c);
                for k in (j + 1)..n {
                    acc -= a.get(j, k) * z.get(k, c);
                }
                z.set(j, c, acc / pivot);
            }
        }
        Ok(z)
    }
}
