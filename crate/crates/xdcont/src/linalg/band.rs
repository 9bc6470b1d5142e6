//! Banded matrices in LAPACK-style column storage and an LU factorization
//! with partial pivoting. The factorization tracks pivot signs and the row
//! permutation parity so the sign of det(J) is available as a byproduct —
//! that sign drives the branch-point test function during continuation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Square banded matrix with `kl` sub- and `ku` superdiagonals. Storage
/// reserves the extra `kl` superdiagonals filled in by pivoted elimination,
/// so a matrix can be factored without reallocation.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandMatrix { n, kl, ku, ldab, data: vec![0.0; ldab * n] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i, "entry outside band");
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i + self.ku >= j && j + self.kl >= i {
            self.data[j * self.ldab + (self.kl + self.ku + i - j)]
        } else {
            0.0
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// y = A x (uses only the declared band, not the fill region).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            let base = j * self.ldab + self.kl + self.ku;
            for i in lo..=hi {
                y[i] += self.data[base + i - j] * xj;
            }
        }
    }

    /// alpha*A + beta*B with the union band.
    pub fn linear_combination(alpha: f64, a: &BandMatrix, beta: f64, b: &BandMatrix) -> BandMatrix {
        assert_eq!(a.n, b.n);
        let kl = a.kl.max(b.kl);
        let ku = a.ku.max(b.ku);
        let mut out = BandMatrix::new(a.n, kl, ku);
        for (m, s) in [(a, alpha), (b, beta)] {
            if s == 0.0 {
                continue;
            }
            for j in 0..m.n {
                let lo = j.saturating_sub(m.ku);
                let hi = (j + m.kl).min(m.n - 1);
                for i in lo..=hi {
                    out.add(i, j, s * m.get(i, j));
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// LU-factorizes a copy of the matrix.
    pub fn factor(&self) -> Result<BandLu> {
        let mut lu = BandLu {
            n: self.n,
            kl: self.kl,
            ku: self.ku,
            ldab: self.ldab,
            data: self.data.clone(),
            piv: vec![0; self.n],
            det_sign: 1,
            min_pivot: f64::INFINITY,
            zero_pivot: false,
        };
        lu.factorize()?;
        Ok(lu)
    }
}

/// Factored band matrix P A = L U.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    det_sign: i8,
    min_pivot: f64,
    zero_pivot: bool,
}

impl BandLu {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    fn factorize(&mut self) -> Result<()> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku; // upper bandwidth after fill
        let mut sign = 1i8;
        for j in 0..n {
            let ilast = (j + kl).min(n - 1);
            // partial pivot: largest magnitude in column j at or below the diagonal
            let mut jp = j;
            let mut best = self.at(j, j).abs();
            for i in j + 1..=ilast {
                let v = self.at(i, j).abs();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            self.piv[j] = jp;
            if jp != j {
                sign = -sign;
                let clast = (j + kv).min(n - 1);
                for c in j..=clast {
                    let a = self.at(j, c);
                    let b = self.at(jp, c);
                    *self.at_mut(j, c) = b;
                    *self.at_mut(jp, c) = a;
                }
            }
            let pivot = self.at(j, j);
            self.min_pivot = self.min_pivot.min(pivot.abs());
            if pivot == 0.0 {
                // keep going so near-singular systems (inverse iteration at a
                // branch point) remain solvable; flag the exact breakdown
                self.zero_pivot = true;
                *self.at_mut(j, j) = 1e-300;
            } else if pivot < 0.0 {
                sign = -sign;
            }
            let pivot = self.at(j, j);
            for i in j + 1..=ilast {
                let m = self.at(i, j) / pivot;
                *self.at_mut(i, j) = m;
                if m != 0.0 {
                    let clast = (j + kv).min(n - 1);
                    for c in j + 1..=clast {
                        let upper = self.at(j, c);
                        if upper != 0.0 {
                            *self.at_mut(i, c) -= m * upper;
                        }
                    }
                }
            }
        }
        self.det_sign = if self.zero_pivot { 0 } else { sign };
        Ok(())
    }

    /// Sign of det(A): +1, -1, or 0 when an exactly zero pivot occurred.
    pub fn det_sign(&self) -> i8 {
        self.det_sign
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn is_singular(&self) -> bool {
        self.zero_pivot
    }

    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::Linear(format!(
                "rhs length {} does not match system size {}",
                b.len(),
                self.n
            )));
        }
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku;
        // forward: P and L
        for j in 0..n {
            let jp = self.piv[j];
            if jp != j {
                b.swap(j, jp);
            }
            let bj = b[j];
            if bj != 0.0 {
                let ilast = (j + kl).min(n - 1);
                for i in j + 1..=ilast {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
        // backward: U
        for j in (0..n).rev() {
            b[j] /= self.at(j, j);
            let bj = b[j];
            if bj != 0.0 {
                let ifirst = j.saturating_sub(kv);
                for i in ifirst..j {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> BandMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = BandMatrix::new(n, kl, ku);
        for j in 0..n {
            let lo = j.saturating_sub(ku);
            let hi = (j + kl).min(n - 1);
            for i in lo..=hi {
                a.set(i, j, rng.gen_range(-1.0..1.0));
            }
            // keep it comfortably nonsingular
            a.add(j, j, 3.0);
        }
        a
    }

    #[test]
    fn solve_matches_dense_lu() {
        for (n, kl, ku, seed) in [(12, 2, 3, 1u64), (30, 5, 5, 2), (7, 1, 1, 3), (20, 6, 2, 4)] {
            let a = random_banded(n, kl, ku, seed);
            let lu = a.factor().unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
            let x = lu.solve(&b).unwrap();
            let dense = a.to_dense();
            let xd = dense.clone().lu().solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-10, "n={n} i={i}: {} vs {}", x[i], xd[i]);
            }
            // matvec consistency: A x = b
            let back = a.matvec(&x);
            for i in 0..n {
                assert!((back[i] - b[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn det_sign_matches_dense_determinant() {
        for seed in 0..20u64 {
            let a = random_banded(9, 3, 2, 100 + seed);
            // mix in negative diagonals so both signs occur
            let mut a = a;
            for j in 0..9 {
                if (seed + j as u64) % 3 == 0 {
                    let v = a.get(j, j);
                    a.set(j, j, -v);
                }
            }
            let lu = a.factor().unwrap();
            let det = a.to_dense().determinant();
            assert_eq!(lu.det_sign(), det.signum() as i8, "seed {seed}, det {det}");
        }
    }

    #[test]
    fn near_singular_systems_still_solve() {
        // rank-deficient-by-construction matrix: last row equals first row
        let mut a = BandMatrix::new(3, 2, 2);
        let rows = [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [2.0, 1.0, 1e-14]];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                a.set(i, j, v);
            }
        }
        let lu = a.factor().unwrap();
        assert!(lu.min_pivot() < 1e-10);
        let x = lu.solve(&[1.0, 0.0, 1.0]).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_combination_unions_bands() {
        let a = random_banded(10, 1, 2, 7);
        let b = random_banded(10, 3, 0, 8);
        let c = BandMatrix::linear_combination(2.0, &a, -0.5, &b);
        let cd = c.to_dense();
        let want = a.to_dense() * 2.0 - b.to_dense() * 0.5;
        assert!((cd - want).abs().max() < 1e-14);
    }
}
