//! Banded LU with partial pivoting and a few small dense helpers.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Square band matrix with `kl` sub- and `ku` super-diagonals.
///
/// Storage is row-major with room for the `kl` extra super-diagonals created
/// by row interchanges: row `i` holds columns `i - kl ..= i + kl + ku`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let off = j as isize - i as isize + self.kl as isize;
        (off >= 0 && (off as usize) < self.width).then(|| i * self.width + off as usize)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` at `(i, j)`; panics if `(i, j)` lies outside the declared band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(j + self.kl >= i && j <= i + self.ku, "({i}, {j}) outside band");
        let s = self.slot(i, j).expect("inside band");
        self.data[s] += v;
    }

    pub fn set_row_zero(&mut self, i: usize) {
        let w = self.width;
        self.data[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = 0.0);
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n, self.ku, self.kl);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for j in lo..=hi {
                let v = self.get(i, j);
                if v != 0.0 {
                    t.add(j, i, v);
                }
            }
        }
        t
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.n).fold(0.0, |m, i| m.max(self.get(i, i).abs()))
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let reach = kl + self.ku;
        let mut piv = vec![0usize; n];
        let mut lower = vec![0.0; n * kl.max(1)];
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let (mut p, mut best) = (k, self.get(k, k).abs());
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    p = i;
                    best = v;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            piv[k] = p;
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.put(k, j, b);
                    self.put(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let f = self.get(i, k) / pivot;
                lower[k * kl.max(1) + (i - k - 1)] = f;
                if f == 0.0 {
                    continue;
                }
                self.put(i, k, 0.0);
                for j in k + 1..=last_col {
                    let ukj = self.get(k, j);
                    if ukj != 0.0 {
                        let s = self.slot(i, j).expect("fill stays inside storage");
                        self.data[s] -= f * ukj;
                    }
                }
            }
        }
        Ok(BandLu { u: self, lower, piv })
    }

    #[inline]
    fn put(&mut self, i: usize, j: usize, v: f64) {
        if let Some(s) = self.slot(i, j) {
            self.data[s] = v;
        } else {
            debug_assert!(v == 0.0, "dropping nonzero outside storage");
        }
    }
}

/// Factorization produced by [`BandMatrix::factor`].
#[derive(Debug, Clone)]
pub struct BandLu {
    u: BandMatrix,
    lower: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn size(&self) -> usize {
        self.u.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.u.n;
        let kl = self.u.kl;
        let kw = kl.max(1);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.lower[k * kw + (i - k - 1)] * bk;
                }
            }
        }
        let reach = kl + self.u.ku;
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= self.u.get(k, j) * b[j];
            }
            b[k] = s / self.u.get(k, k);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solves `(B + e_row (w - e_row)ᵀ) x = rhs` where `B` is given by its
/// factorization and has the identity row at `row`, i.e. the system in which
/// row `row` has been replaced by the dense row `w`.
pub fn solve_with_dense_row(lu: &BandLu, row: usize, w: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let x0 = lu.solve(rhs);
    let mut e = vec![0.0; lu.size()];
    e[row] = 1.0;
    let z = lu.solve(&e);
    // v = w - e_row
    let vx: f64 = w.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>() - x0[row];
    let vz: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() - z[row];
    let denom = 1.0 + vz;
    if denom.abs() < 1e-14 {
        return Err(Error::Singular("constraint row is dependent on the operator".into()));
    }
    Ok(x0.iter().zip(&z).map(|(a, b)| a - b * vx / denom).collect())
}

/// Symmetric square root with eigenvalues floored at zero (row-major n×n).
pub fn sym_sqrt(m: &[f64], n: usize) -> Vec<f64> {
    let eig = SymmetricEigen::new(sym_matrix(m, n));
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += s * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &[f64], n: usize) -> (f64, f64) {
    let eig = SymmetricEigen::new(sym_matrix(m, n));
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Inverse of a small dense matrix.
pub fn inverse(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mat = DMatrix::from_row_slice(n, n, m);
    let inv = mat.try_inverse().ok_or_else(|| Error::Singular("matrix not invertible".into()))?;
    Ok(inv.transpose().as_slice().to_vec())
}

fn sym_matrix(m: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[i * n + j] + m[j * n + i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
        m.lu().solve(&nalgebra::DVector::from_column_slice(b)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn band_lu_matches_dense() {
        let n = 12;
        let (kl, ku) = (2, 3);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // small diagonal forces pivoting
                let v = ((i * 7 + j * 13) % 11) as f64 - 5.0 + if i == j { 0.01 } else { 0.0 };
                band.add(i, j, v);
                dense[i][j] = v;
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = band.clone().factor().unwrap().solve(&b);
        let xd = dense_solve(&dense, &b);
        for (a, c) in x.iter().zip(&xd) {
            assert!((a - c).abs() < 1e-9 * (1.0 + c.abs()), "{a} vs {c}");
        }
        let r = band.mul_vec(&x);
        for (a, c) in r.iter().zip(&b) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_row_replacement() {
        let n = 6;
        let mut band = BandMatrix::zeros(n, 1, 1);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(1)..=(i + 1).min(n - 1) {
                let v = if i == j { 2.0 } else { -1.0 };
                band.add(i, j, v);
                dense[i][j] = v;
            }
        }
        let row = 2;
        let w = vec![1.0, 0.5, 0.25, 0.125, 2.0, 1.0];
        band.set_row_zero(row);
        band.add(row, row, 1.0);
        dense[row] = w.clone();
        let b = vec![1.0, 0.0, 3.0, -1.0, 0.0, 2.0];
        let x = solve_with_dense_row(&band.factor().unwrap(), row, &w, &b).unwrap();
        let xd = dense_solve(&dense, &b);
        for (a, c) in x.iter().zip(&xd) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_band_is_reported() {
        let mut band = BandMatrix::zeros(3, 1, 1);
        band.add(0, 0, 1.0);
        band.add(1, 1, 1.0);
        assert!(matches!(band.factor(), Err(Error::Singular(_))));
    }

    #[test]
    fn sqrt_and_inverse() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let s = sym_sqrt(&m, 2);
        let back = [s[0] * s[0] + s[1] * s[2], s[0] * s[1] + s[1] * s[3], 0.0, s[2] * s[1] + s[3] * s[3]];
        assert!((back[0] - 4.0).abs() < 1e-12 && (back[1] - 1.0).abs() < 1e-12 && (back[3] - 3.0).abs() < 1e-12);
        let inv = inverse(&m, 2).unwrap();
        assert!((inv[0] - 3.0 / 11.0).abs() < 1e-14 && (inv[1] + 1.0 / 11.0).abs() < 1e-14);
        let (lo, hi) = sym_eig_range(&[2.0, 0.0, 0.0, 5.0], 2);
        assert_eq!((lo, hi), (2.0, 5.0));
    }
}
