//! Symmetric positive-definite banded systems.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: `band[i * (bw + 1) + d]` holds `A[i][i - d]`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Adds `v` to `A[i][j]` (and implicitly `A[j][i]`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.band[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            return 0.0;
        }
        self.band[self.idx(i, j)]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            y[i] += self.band[i * (self.bw + 1)] * x[i];
            for j in lo..i {
                let a = self.band[i * (self.bw + 1) + (i - j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
        y
    }

    /// In-place Cholesky factorization `A = L L^T`.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let w = self.bw + 1;
        for j in 0..self.n {
            let lo = j.saturating_sub(self.bw);
            let mut d = self.band[j * w];
            for k in lo..j {
                let l = self.band[j * w + (j - k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NonFinite(format!(
                    "banded matrix is not positive definite at row {j} (pivot {d})"
                )));
            }
            let d = d.sqrt();
            self.band[j * w] = d;
            let hi = (j + self.bw).min(self.n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(self.bw);
                let mut s = self.band[i * w + (i - j)];
                for k in lo_i.max(lo)..j {
                    s -= self.band[i * w + (i - k)] * self.band[j * w + (j - k)];
                }
                self.band[i * w + (i - j)] = s / d;
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSym,
}

impl BandedCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let f = &self.factor;
        let w = f.bw + 1;
        let n = f.n;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(f.bw);
            let mut s = y[i];
            for k in lo..i {
                s -= f.band[i * w + (i - k)] * y[k];
            }
            y[i] = s / f.band[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + f.bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= f.band[k * w + (k - i)] * y[k];
            }
            y[i] = s / f.band[i * w];
        }
        y
    }
}
