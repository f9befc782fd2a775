//! Small linear-algebra kernels: banded Cholesky, banded LU with partial
//! pivoting, and a dense Jacobi eigensolver for the Rayleigh-Ritz blocks.
//! Sized for desk-scale grids; factors are cached by the callers.

use crate::error::{Result, SgfError};
use crate::scalar::{cast, Scalar};

// ---------------------------------------------------------------------------
// Symmetric banded matrix (lower band stored row-wise) with Cholesky.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BandedSym<S: Scalar> {
    pub n: usize,
    pub bw: usize,
    /// a[i*(bw+1) + d] = A[i][i-d], d = 0..=bw
    a: Vec<S>,
}

impl<S: Scalar> BandedSym<S> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandedSym { n, bw, a: vec![S::zero(); n * (bw + 1)] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.bw {
            S::zero()
        } else {
            self.a[hi * (self.bw + 1) + d]
        }
    }

    /// Accumulate into A[i][j] (and symmetrically).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: S) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        debug_assert!(d <= self.bw, "entry outside band");
        self.a[hi * (self.bw + 1) + d] += v;
    }

    pub fn matvec(&self, x: &[S], y: &mut [S]) {
        y.iter_mut().for_each(|v| *v = S::zero());
        for i in 0..self.n {
            let row = i * (self.bw + 1);
            y[i] += self.a[row] * x[i];
            let dmax = self.bw.min(i);
            for d in 1..=dmax {
                let j = i - d;
                let v = self.a[row + d];
                y[i] += v * x[j];
                y[j] += v * x[i];
            }
        }
    }

    pub fn quad_form(&self, x: &[S]) -> S {
        let mut y = vec![S::zero(); self.n];
        self.matvec(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| *a * *b).sum()
    }

    pub fn inf_norm(&self) -> S {
        let mut rows = vec![S::zero(); self.n];
        for i in 0..self.n {
            rows[i] += self.a[i * (self.bw + 1)].abs();
            for d in 1..=self.bw.min(i) {
                let v = self.a[i * (self.bw + 1) + d].abs();
                rows[i] += v;
                rows[i - d] += v;
            }
        }
        rows.into_iter().fold(S::zero(), |m, v| m.max(v))
    }

    pub fn cholesky(&self) -> Result<BandedChol<S>> {
        let n = self.n;
        let bw = self.bw;
        let mut l = vec![S::zero(); n * (bw + 1)];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = self.get(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * (bw + 1) + (i - k)] * l[j * (bw + 1) + (j - k)];
                }
                if j < i {
                    let d = l[j * (bw + 1)];
                    l[i * (bw + 1) + (i - j)] = s / d;
                } else {
                    if s <= S::zero() || !s.is_finite() {
                        return Err(SgfError::SolveFailure(format!(
                            "banded Cholesky broke down at row {i} (pivot {s:e})"
                        )));
                    }
                    l[i * (bw + 1)] = s.sqrt();
                }
            }
        }
        Ok(BandedChol { n, bw, l, a: self.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct BandedChol<S: Scalar> {
    n: usize,
    bw: usize,
    l: Vec<S>,
    a: BandedSym<S>,
}

impl<S: Scalar> BandedChol<S> {
    pub fn solve_in_place(&self, b: &mut [S]) {
        let bw = self.bw;
        for i in 0..self.n {
            let mut s = b[i];
            let k0 = i.saturating_sub(bw);
            for k in k0..i {
                s -= self.l[i * (bw + 1) + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * (bw + 1)];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            let kmax = (i + bw).min(self.n - 1);
            for k in i + 1..=kmax {
                s -= self.l[k * (bw + 1) + (k - i)] * b[k];
            }
            b[i] = s / self.l[i * (bw + 1)];
        }
    }

    /// Solve with iterative refinement; returns the backward error
    /// `|b - Ax| / (|A| |x| + |b|)` actually achieved.
    pub fn solve_refined(&self, rhs: &[S], x: &mut [S]) -> S {
        x.copy_from_slice(rhs);
        self.solve_in_place(x);
        let anorm = self.a.inf_norm();
        let bnorm = rhs.iter().fold(S::zero(), |m, v| m.max(v.abs()));
        let mut r = vec![S::zero(); self.n];
        let berr = |a: &BandedSym<S>, x: &[S], r: &mut [S]| -> S {
            a.matvec(x, r);
            let mut rn = S::zero();
            let mut xn = S::zero();
            for ((ri, bi), xi) in r.iter_mut().zip(rhs).zip(x) {
                *ri = *bi - *ri;
                rn = rn.max(ri.abs());
                xn = xn.max(xi.abs());
            }
            rn / (anorm * xn + bnorm).max(S::min_positive_value())
        };
        let mut e = berr(&self.a, x, &mut r);
        for _ in 0..4 {
            if e < cast::<S>(1e-14) {
                break;
            }
            self.solve_in_place(&mut r);
            for (xi, di) in x.iter_mut().zip(&r) {
                *xi += *di;
            }
            let en = berr(&self.a, x, &mut r);
            if en >= e {
                break;
            }
            e = en;
        }
        e
    }
}

// ---------------------------------------------------------------------------
// General banded matrix with LU (partial pivoting), LAPACK gbtrf layout.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BandedMat<S: Scalar> {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    /// ab[r * n + j] with r = kl + ku + i - j; top kl rows are fill-in space.
    ab: Vec<S>,
}

impl<S: Scalar> BandedMat<S> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let rows = 2 * kl + ku + 1;
        BandedMat { n, kl, ku, ab: vec![S::zero(); rows * n] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        let r = self.kl + self.ku + i - j;
        r * self.n + j
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(j + self.kl >= i && i + self.ku >= j, "entry outside band");
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        if j + self.kl < i || i + self.ku < j {
            S::zero()
        } else {
            self.ab[self.slot(i, j)]
        }
    }

    pub fn matvec(&self, x: &[S], y: &mut [S]) {
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku).min(self.n - 1);
            let mut s = S::zero();
            for j in j0..=j1 {
                s += self.get(i, j) * x[j];
            }
            y[i] = s;
        }
    }

    pub fn inf_norm(&self) -> S {
        let mut m = S::zero();
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku).min(self.n - 1);
            let mut row = S::zero();
            for j in j0..=j1 {
                row += self.get(i, j).abs();
            }
            m = m.max(row);
        }
        m
    }

    pub fn lu(&self) -> Result<BandedLu<S>> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let kv = kl + ku; // superdiagonals in the factored band
        let mut ab = self.ab.clone();
        let mut ipiv = vec![0usize; n];
        let at = |ab: &Vec<S>, i: usize, j: usize| ab[(kl + ku + i - j) * n + j];
        for j in 0..n {
            let imax = (j + kl).min(n - 1);
            let mut p = j;
            let mut pmax = at(&ab, j, j).abs();
            for i in j + 1..=imax {
                let v = at(&ab, i, j).abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if pmax == S::zero() || !pmax.is_finite() {
                return Err(SgfError::SolveFailure(format!(
                    "banded LU: zero pivot in column {j}"
                )));
            }
            ipiv[j] = p;
            let jmax = (j + kv).min(n - 1);
            if p != j {
                for c in j..=jmax {
                    let s1 = (kl + ku + j - c) * n + c;
                    let s2 = (kl + ku + p - c) * n + c;
                    ab.swap(s1, s2);
                }
            }
            let piv = at(&ab, j, j);
            for i in j + 1..=imax {
                let s = (kl + ku + i - j) * n + j;
                let m = ab[s] / piv;
                ab[s] = m;
                for c in j + 1..=jmax {
                    let su = (kl + ku + j - c) * n + c;
                    let si = (kl + ku + i - c) * n + c;
                    let u = ab[su];
                    ab[si] = ab[si] - m * u;
                }
            }
        }
        Ok(BandedLu { n, kl, ku, ab, ipiv, orig: self.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu<S: Scalar> {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<S>,
    ipiv: Vec<usize>,
    orig: BandedMat<S>,
}

impl<S: Scalar> BandedLu<S> {
    pub fn solve_in_place(&self, b: &mut [S]) {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let kv = kl + ku;
        let at = |i: usize, j: usize| self.ab[(kl + ku + i - j) * n + j];
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let imax = (j + kl).min(n - 1);
            let bj = b[j];
            for i in j + 1..=imax {
                b[i] = b[i] - at(i, j) * bj;
            }
        }
        for i in (0..n).rev() {
            let jmax = (i + kv).min(n - 1);
            let mut s = b[i];
            for j in i + 1..=jmax {
                s -= at(i, j) * b[j];
            }
            b[i] = s / at(i, i);
        }
    }

    pub fn solve_refined(&self, rhs: &[S], x: &mut [S]) -> S {
        x.copy_from_slice(rhs);
        self.solve_in_place(x);
        let anorm = self.orig.inf_norm();
        let bnorm = rhs.iter().fold(S::zero(), |m, v| m.max(v.abs()));
        let mut r = vec![S::zero(); self.n];
        let berr = |a: &BandedMat<S>, x: &[S], r: &mut [S]| -> S {
            a.matvec(x, r);
            let mut rn = S::zero();
            let mut xn = S::zero();
            for ((ri, bi), xi) in r.iter_mut().zip(rhs).zip(x) {
                *ri = *bi - *ri;
                rn = rn.max(ri.abs());
                xn = xn.max(xi.abs());
            }
            rn / (anorm * xn + bnorm).max(S::min_positive_value())
        };
        let mut e = berr(&self.orig, x, &mut r);
        for _ in 0..4 {
            if e < cast::<S>(1e-14) {
                break;
            }
            self.solve_in_place(&mut r);
            for (xi, di) in x.iter_mut().zip(&r) {
                *xi += *di;
            }
            let en = berr(&self.orig, x, &mut r);
            if en >= e {
                break;
            }
            e = en;
        }
        e
    }
}

// ---------------------------------------------------------------------------
// Dense helpers for the small Rayleigh-Ritz and Gram problems.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DMat<S: Scalar> {
    pub n: usize,
    pub m: usize,
    pub a: Vec<S>,
}

impl<S: Scalar> DMat<S> {
    pub fn zeros(n: usize, m: usize) -> Self {
        DMat { n, m, a: vec![S::zero(); n * m] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.a[i * self.m + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.a[i * self.m + j] = v;
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    /// Dense Cholesky, lower factor.
    pub fn cholesky(&self) -> Result<DMat<S>> {
        assert_eq!(self.n, self.m);
        let n = self.n;
        let mut l = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if j < i {
                    l.set(i, j, s / l.get(j, j));
                } else {
                    if s <= S::zero() || !s.is_finite() {
                        return Err(SgfError::SolveFailure(format!(
                            "dense Cholesky broke down at row {i} (pivot {s:e})"
                        )));
                    }
                    l.set(i, i, s.sqrt());
                }
            }
        }
        Ok(l)
    }

    /// 1-norm condition estimate from the Cholesky factor: ||A||_1 * ||A^-1 e||_1 proxy.
    pub fn cond_estimate(&self, l: &DMat<S>) -> S {
        let n = self.n;
        let mut anorm = S::zero();
        for j in 0..n {
            let mut c = S::zero();
            for i in 0..n {
                c += self.get(i, j).abs();
            }
            anorm = anorm.max(c);
        }
        let mut e = vec![S::one(); n];
        chol_solve(l, &mut e);
        let inv = e.iter().fold(S::zero(), |m, v| m.max(v.abs()));
        anorm * inv
    }
}

/// Solve L L^T x = b in place.
pub fn chol_solve<S: Scalar>(l: &DMat<S>, b: &mut [S]) {
    let n = l.n;
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * b[k];
        }
        b[i] = s / l.get(i, i);
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.get(k, i) * b[k];
        }
        b[i] = s / l.get(i, i);
    }
}

/// Cyclic Jacobi for a dense symmetric matrix. Returns eigenvalues ascending
/// and eigenvectors as columns.
pub fn jacobi_eigh<S: Scalar>(mat: &DMat<S>, max_sweeps: usize) -> Result<(Vec<S>, DMat<S>)> {
    assert_eq!(mat.n, mat.m);
    let n = mat.n;
    let mut a = mat.clone();
    let mut v = DMat::identity(n);
    let tol = cast::<S>(1e-30);
    for _sweep in 0..max_sweeps {
        let mut off = S::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == S::zero() {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (cast::<S>(2.0) * apq);
                let t = if theta >= S::zero() {
                    S::one() / (theta + (S::one() + theta * theta).sqrt())
                } else {
                    -S::one() / (-theta + (S::one() + theta * theta).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<S> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let vals: Vec<S> = order.iter().map(|&i| diag[i]).collect();
    let mut vecs = DMat::zeros(n, n);
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, newc, v.get(r, oldc));
        }
    }
    Ok((vals, vecs))
}

/// Generalized symmetric eigenproblem A x = theta B x with B SPD.
/// Returns (theta ascending, X with columns B-orthonormal).
pub fn general_eigh<S: Scalar>(a: &DMat<S>, b: &DMat<S>) -> Result<(Vec<S>, DMat<S>)> {
    let n = a.n;
    let l = b.cholesky()?;
    // C = L^-1 A L^-T
    let mut c = DMat::zeros(n, n);
    // first W = L^-1 A (solve L W = A column-wise on rows)
    let mut w = a.clone();
    for j in 0..n {
        for i in 0..n {
            let mut s = w.get(i, j);
            for k in 0..i {
                s -= l.get(i, k) * w.get(k, j);
            }
            w.set(i, j, s / l.get(i, i));
        }
    }
    // C = W L^-T: solve rows against L
    for i in 0..n {
        for j in 0..n {
            let mut s = w.get(i, j);
            for k in 0..j {
                s -= c.get(i, k) * l.get(j, k);
            }
            c.set(i, j, s / l.get(j, j));
        }
    }
    // symmetrize roundoff
    for i in 0..n {
        for j in i + 1..n {
            let m = (c.get(i, j) + c.get(j, i)) * cast::<S>(0.5);
            c.set(i, j, m);
            c.set(j, i, m);
        }
    }
    let (vals, z) = jacobi_eigh(&c, 60)?;
    // X = L^-T Z
    let mut x = DMat::zeros(n, n);
    for j in 0..n {
        let mut col: Vec<S> = (0..n).map(|i| z.get(i, j)).collect();
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l.get(k, i) * col[k];
            }
            col[i] = s / l.get(i, i);
        }
        for i in 0..n {
            x.set(i, j, col[i]);
        }
    }
    Ok((vals, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_next(s: &mut u64) -> f64 {
        *s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*s >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let n = 40;
        let bw = 5;
        let mut s = 7u64;
        let mut m = BandedSym::<f64>::zeros(n, bw);
        for i in 0..n {
            m.add(i, i, 10.0 + rng_next(&mut s));
            for d in 1..=bw.min(i) {
                m.add(i, i - d, rng_next(&mut s) - 0.5);
            }
        }
        let ch = m.cholesky().unwrap();
        let rhs: Vec<f64> = (0..n).map(|_| rng_next(&mut s) - 0.5).collect();
        let mut x = vec![0.0; n];
        let res = ch.solve_refined(&rhs, &mut x);
        assert!(res < 1e-13, "residual {res}");
        let mut y = vec![0.0; n];
        m.matvec(&x, &mut y);
        for (a, b) in y.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn banded_lu_matches_matvec() {
        let n = 35;
        let (kl, ku) = (4, 3);
        let mut s = 99u64;
        let mut m = BandedMat::<f64>::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v = if i == j { 5.0 + rng_next(&mut s) } else { rng_next(&mut s) - 0.5 };
                m.add(i, j, v);
            }
        }
        let lu = m.lu().unwrap();
        let rhs: Vec<f64> = (0..n).map(|_| rng_next(&mut s) - 0.5).collect();
        let mut x = vec![0.0; n];
        let res = lu.solve_refined(&rhs, &mut x);
        assert!(res < 1e-12, "residual {res}");
    }

    #[test]
    fn jacobi_small_known() {
        let mut a = DMat::<f64>::zeros(2, 2);
        a.set(0, 0, 2.0);
        a.set(1, 1, 3.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        let (vals, _) = jacobi_eigh(&a, 30).unwrap();
        let lo = 2.5 - (1.25f64).sqrt();
        let hi = 2.5 + (1.25f64).sqrt();
        assert!((vals[0] - lo).abs() < 1e-12);
        assert!((vals[1] - hi).abs() < 1e-12);
    }

    #[test]
    fn general_eigh_recovers_pencil() {
        let n = 8;
        let mut s = 3u64;
        let mut a = DMat::<f64>::zeros(n, n);
        let mut b = DMat::<f64>::zeros(n, n);
        for i in 0..n {
            a.set(i, i, 1.0 + i as f64);
            b.set(i, i, 1.0);
            for j in 0..i {
                let v = 0.1 * (rng_next(&mut s) - 0.5);
                a.set(i, j, v);
                a.set(j, i, v);
                let w = 0.05 * (rng_next(&mut s) - 0.5);
                b.set(i, j, w);
                b.set(j, i, w);
            }
        }
        let (vals, x) = general_eigh(&a, &b).unwrap();
        // verify A x = theta B x and B-orthonormality
        for c in 0..n {
            for r in 0..n {
                let mut ax = 0.0;
                let mut bx = 0.0;
                for k in 0..n {
                    ax += a.get(r, k) * x.get(k, c);
                    bx += b.get(r, k) * x.get(k, c);
                }
                assert!((ax - vals[c] * bx).abs() < 1e-9, "pencil residual");
            }
        }
        for c1 in 0..n {
            for c2 in 0..n {
                let mut s2 = 0.0;
                for r in 0..n {
                    let mut bx = 0.0;
                    for k in 0..n {
                        bx += b.get(r, k) * x.get(k, c2);
                    }
                    s2 += x.get(r, c1) * bx;
                }
                let target = if c1 == c2 { 1.0 } else { 0.0 };
                assert!((s2 - target).abs() < 1e-10);
            }
        }
    }
}
