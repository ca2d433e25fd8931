//! Small dense linear algebra on row-major symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

use libm::{log, sqrt};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor `a` (row-major `n × n`). Returns `None` when a pivot is not
    /// strictly positive.
    pub fn new(a: &[f64], n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let rj = &l[j * n..j * n + j];
            let d = a[j * n + j] - dot(rj, rj);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = sqrt(d);
            l[j * n + j] = djj;
            for i in j + 1..n {
                let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / djj;
            }
        }
        Some(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * log(self.l[i * self.n + i])).sum()
    }

    /// `L z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| self.l[i * n..i * n + i + 1].iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Solve `L y = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            b[i] = (b[i] - dot(&self.l[i * n..i * n + i], &b[..i])) / self.l[i * n + i];
        }
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.forward(&mut y);
        y.iter().map(|v| v * v).sum()
    }
}

/// Try to factor `a`, adding growing multiples of its mean diagonal when the
/// plain factorization fails.
pub fn cholesky_with_jitter(a: &[f64], n: usize, jitters: &[f64]) -> Option<Cholesky> {
    if let Some(c) = Cholesky::new(a, n) {
        return Some(c);
    }
    let scale = (0..n).map(|i| a[i * n + i]).sum::<f64>() / n.max(1) as f64;
    let mut b = a.to_vec();
    for &j in jitters {
        for i in 0..n {
            b[i * n + i] = a[i * n + i] + j * scale;
        }
        if let Some(c) = Cholesky::new(&b, n) {
            return Some(c);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let c = Cholesky::new(&a, 3).unwrap();
        // det by cofactor expansion
        let det: f64 = 4.0 * (15.0 - 1.0) - 2.0 * (6.0 - 0.4) + 0.4 * (2.0 - 2.0);
        assert!((c.log_det() - det.ln()).abs() < 1e-12);
        let z = [1.0, -2.0, 0.5];
        let lz = c.mul_lower(&z);
        // (L z)ᵀ A⁻¹ (L z) = zᵀ z
        assert!((c.quad_form(&lz) - 5.25).abs() < 1e-12);
        assert!(Cholesky::new(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn jitter_rescues_singular() {
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(Cholesky::new(&a, 2).is_none());
        assert!(cholesky_with_jitter(&a, 2, &[1e-10, 1e-8]).is_some());
    }
}
