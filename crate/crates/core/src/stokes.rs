//! Linear machinery in stream-function form: Leray projection, the clamped
//! elliptic operator behind the resolvent, the Stokes eigenbasis, the W-basis
//! and every norm the energy bookkeeping uses.
//!
//! Quadrature-Gram assemblies carry the machine-exact structure (basis
//! orthonormality, resolvent spectral identities, positivity); pointwise
//! stencil compositions carry the O(h^2) consistency. The eigenproblem is the
//! symmetric pencil  <lap psi, lap phi>_W = lambda <grad psi, grad phi>_W
//! over clamped streams, matching the quadrature the rest of the code uses.

use std::io::{Read, Write};
use std::path::Path;

use crate::band::{general_eigh, BandedChol, BandedLu, BandedMat, BandedSym, DMat};
use crate::error::{Result, SgfError};
use crate::grid::{
    curl2d, grad_norm_sq, l2_norm, laplacian_vec, perp_grad, vec_inner,
    vec_norm, BcTag, Grid, GridRef, ScalarField, VectorField,
};
use crate::scalar::{cast, sq, Scalar};

pub const BASIS_MAGIC: &[u8; 4] = b"SGB1";

/// Linear-solve target residual (relative, max-norm).
pub const SOLVE_TOL: f64 = 1e-11;
/// Relative eigensolve residual target.
pub const TOL_EIG: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Interior DOF bookkeeping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Dof {
    pub nx: usize,
    pub ny: usize,
}

impl Dof {
    pub fn of<S: Scalar>(grid: &GridRef<S>) -> Self {
        Dof { nx: grid.nx, ny: grid.ny }
    }

    #[inline]
    pub fn count(&self) -> usize {
        (self.nx - 2) * (self.ny - 2)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        (iy - 1) * (self.nx - 2) + (ix - 1)
    }

    #[inline]
    pub fn is_dof(&self, ix: usize, iy: usize) -> bool {
        ix >= 1 && iy >= 1 && ix <= self.nx - 2 && iy <= self.ny - 2
    }

    pub fn to_field<S: Scalar>(&self, grid: &GridRef<S>, v: &[S], bc: BcTag) -> ScalarField<S> {
        let mut f = ScalarField::zeros(grid, bc);
        for iy in 1..self.ny - 1 {
            for ix in 1..self.nx - 1 {
                f.values[grid.idx(ix, iy)] = v[self.index(ix, iy)];
            }
        }
        f
    }

    pub fn from_field<S: Scalar>(&self, f: &ScalarField<S>) -> Vec<S> {
        let grid = &f.grid;
        let mut v = vec![S::zero(); self.count()];
        for iy in 1..self.ny - 1 {
            for ix in 1..self.nx - 1 {
                v[self.index(ix, iy)] = f.values[grid.idx(ix, iy)];
            }
        }
        v
    }
}

// 1D second-difference row with the tag closure, boundary columns kept
// (callers drop zero-trace columns).
fn d2_row(n: usize, i: usize, invh2: f64, clamped: bool) -> Vec<(usize, f64)> {
    if i == 0 {
        if clamped {
            vec![(0, -2.0 * invh2), (1, 2.0 * invh2)]
        } else {
            vec![(0, 2.0 * invh2), (1, -5.0 * invh2), (2, 4.0 * invh2), (3, -invh2)]
        }
    } else if i == n - 1 {
        if clamped {
            vec![(n - 1, -2.0 * invh2), (n - 2, 2.0 * invh2)]
        } else {
            vec![(n - 1, 2.0 * invh2), (n - 2, -5.0 * invh2), (n - 3, 4.0 * invh2), (n - 4, -invh2)]
        }
    } else {
        vec![(i - 1, invh2), (i, -2.0 * invh2), (i + 1, invh2)]
    }
}

// 1D first-difference row, one-sided at the walls (Dirichlet/free closure).
fn d1_row(n: usize, i: usize, inv2h: f64) -> Vec<(usize, f64)> {
    if i == 0 {
        vec![(0, -3.0 * inv2h), (1, 4.0 * inv2h), (2, -inv2h)]
    } else if i == n - 1 {
        vec![(n - 1, 3.0 * inv2h), (n - 2, -4.0 * inv2h), (n - 3, inv2h)]
    } else {
        vec![(i + 1, inv2h), (i - 1, -inv2h)]
    }
}

// ---------------------------------------------------------------------------
// Operator assemblies, cached per grid by callers.
// ---------------------------------------------------------------------------

/// Quadrature Gram of `perp_grad` with the clamped closure:
/// psi^T S psi = ||perp_grad(psi)||_H^2 exactly. Symmetric PSD.
pub fn assemble_velocity_gram<S: Scalar>(grid: &GridRef<S>) -> BandedSym<S> {
    let dof = Dof::of(grid);
    let bw = 2 * (grid.nx - 2) + 2;
    let mut m = BandedSym::zeros(dof.count(), bw);
    let inv2h = 0.5 / grid.h.to_f64().unwrap();
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let w = grid.quad_weight(grid.idx(ix, iy)).to_f64().unwrap();
            // u_x = -d_y psi: central only at y-interior nodes (clamped walls give 0)
            if iy >= 1 && iy <= grid.ny - 2 {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(2);
                if dof.is_dof(ix, iy + 1) {
                    row.push((dof.index(ix, iy + 1), inv2h));
                }
                if dof.is_dof(ix, iy - 1) {
                    row.push((dof.index(ix, iy - 1), -inv2h));
                }
                for &(a, ca) in &row {
                    for &(b, cb) in &row {
                        if a >= b {
                            m.add(a, b, cast::<S>(w * ca * cb));
                        }
                    }
                }
            }
            // u_y = d_x psi
            if ix >= 1 && ix <= grid.nx - 2 {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(2);
                if dof.is_dof(ix + 1, iy) {
                    row.push((dof.index(ix + 1, iy), inv2h));
                }
                if dof.is_dof(ix - 1, iy) {
                    row.push((dof.index(ix - 1, iy), -inv2h));
                }
                for &(a, ca) in &row {
                    for &(b, cb) in &row {
                        if a >= b {
                            m.add(a, b, cast::<S>(w * ca * cb));
                        }
                    }
                }
            }
        }
    }
    m
}

/// Quadrature Gram of the compact clamped Laplacian evaluated at every node:
/// psi^T B psi = sum_k w_k (lap psi)_k^2. Symmetric positive definite.
pub fn assemble_biharmonic_gram<S: Scalar>(grid: &GridRef<S>) -> BandedSym<S> {
    let dof = Dof::of(grid);
    let bw = 2 * (grid.nx - 2) + 2;
    let mut m = BandedSym::zeros(dof.count(), bw);
    let invh2 = 1.0 / sq(grid.h).to_f64().unwrap();
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let w = grid.quad_weight(grid.idx(ix, iy)).to_f64().unwrap();
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(8);
            for (jx, c) in d2_row(grid.nx, ix, invh2, true) {
                if dof.is_dof(jx, iy) {
                    row.push((dof.index(jx, iy), c));
                }
            }
            for (jy, c) in d2_row(grid.ny, iy, invh2, true) {
                if dof.is_dof(ix, jy) {
                    row.push((dof.index(ix, jy), c));
                }
            }
            for &(a, ca) in &row {
                for &(b, cb) in &row {
                    if a >= b {
                        m.add(a, b, cast::<S>(w * ca * cb));
                    }
                }
            }
        }
    }
    m
}

/// Adjoint of the clamped `perp_grad` against the quadrature: returns the
/// interior vector of `<f, perp_grad(.)>_H` functionals.
pub fn perp_grad_adjoint<S: Scalar>(f: &VectorField<S>) -> Vec<S> {
    let grid = f.grid().clone();
    let dof = Dof::of(&grid);
    let mut rhs = vec![S::zero(); dof.count()];
    let inv2h = cast::<S>(0.5) / grid.h;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let k = grid.idx(ix, iy);
            let w = grid.quad_weight(k);
            if iy >= 1 && iy <= grid.ny - 2 {
                let c = -w * f.x.values[k] * inv2h; // u_x = -d_y psi
                if dof.is_dof(ix, iy + 1) {
                    rhs[dof.index(ix, iy + 1)] += c;
                }
                if dof.is_dof(ix, iy - 1) {
                    rhs[dof.index(ix, iy - 1)] -= c;
                }
            }
            if ix >= 1 && ix <= grid.nx - 2 {
                let c = w * f.y.values[k] * inv2h;
                if dof.is_dof(ix + 1, iy) {
                    rhs[dof.index(ix + 1, iy)] += c;
                }
                if dof.is_dof(ix - 1, iy) {
                    rhs[dof.index(ix - 1, iy)] -= c;
                }
            }
        }
    }
    rhs
}

/// Composition `curl . perp_grad` on Dirichlet streams (the operator the
/// Leray projection inverts so that divergence-free slip fields are fixed
/// points to solver precision). Mildly nonsymmetric in wall-adjacent rows.
pub fn assemble_leray_matrix<S: Scalar>(grid: &GridRef<S>) -> BandedMat<S> {
    let nx = grid.nx;
    let ny = grid.ny;
    let dof = Dof::of(grid);
    // 1D first-derivative squared, dense then banded extraction
    let sq1d = |n: usize| -> Vec<Vec<f64>> {
        let inv2h = 0.5 / grid.h.to_f64().unwrap();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for (j, c) in d1_row(n, i, inv2h) {
                d[i][j] += c;
            }
        }
        let mut d2 = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                if d[i][k] != 0.0 {
                    for j in 0..n {
                        if d[k][j] != 0.0 {
                            d2[i][j] += d[i][k] * d[k][j];
                        }
                    }
                }
            }
        }
        d2
    };
    let dx2 = sq1d(nx);
    let dy2 = sq1d(ny);
    let band = 2 * (nx - 2) + 2;
    let mut m = BandedMat::zeros(dof.count(), band, band);
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let r = dof.index(ix, iy);
            for jx in ix.saturating_sub(2)..=(ix + 2).min(nx - 1) {
                if dx2[ix][jx] != 0.0 && dof.is_dof(jx, iy) {
                    m.add(r, dof.index(jx, iy), cast::<S>(dx2[ix][jx]));
                }
            }
            for jy in iy.saturating_sub(2)..=(iy + 2).min(ny - 1) {
                if dy2[iy][jy] != 0.0 && dof.is_dof(ix, jy) {
                    m.add(r, dof.index(ix, jy), cast::<S>(dy2[iy][jy]));
                }
            }
        }
    }
    m
}

/// Compact 5-point Dirichlet Laplacian as an SPD matrix (rows are `-lap`).
pub fn assemble_dirichlet_poisson<S: Scalar>(grid: &GridRef<S>) -> BandedSym<S> {
    let dof = Dof::of(grid);
    let bw = grid.nx - 2;
    let mut m = BandedSym::zeros(dof.count(), bw);
    let invh2 = S::one() / sq(grid.h);
    let four = cast::<S>(4.0);
    for iy in 1..grid.ny - 1 {
        for ix in 1..grid.nx - 1 {
            let r = dof.index(ix, iy);
            m.add(r, r, four * invh2);
            if dof.is_dof(ix - 1, iy) && dof.index(ix - 1, iy) <= r {
                m.add(r, dof.index(ix - 1, iy), -invh2);
            }
            if dof.is_dof(ix, iy - 1) {
                m.add(r, dof.index(ix, iy - 1), -invh2);
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Solver bundle per grid
// ---------------------------------------------------------------------------

/// Cached factorizations for one grid: the Leray solve, the Dirichlet
/// Poisson solve and the Gram pair (S, B) behind the clamped elliptic
/// operator and the Stokes pencil.
pub struct StokesSolver<S: Scalar> {
    pub grid: GridRef<S>,
    pub dof: Dof,
    pub s_gram: BandedSym<S>,
    pub b_gram: BandedSym<S>,
    leray_lu: std::sync::Mutex<Option<std::sync::Arc<BandedLu<S>>>>,
    poisson: BandedChol<S>,
    /// (alpha, Cholesky of S + alpha^2 B), most recently used
    elliptic: std::sync::Mutex<Vec<(S, std::sync::Arc<BandedChol<S>>)>>,
}

impl<S: Scalar> StokesSolver<S> {
    pub fn new(grid: &GridRef<S>) -> Result<Self> {
        let s_gram = assemble_velocity_gram(grid);
        let b_gram = assemble_biharmonic_gram(grid);
        let poisson = assemble_dirichlet_poisson(grid).cholesky()?;
        Ok(StokesSolver {
            grid: grid.clone(),
            dof: Dof::of(grid),
            s_gram,
            b_gram,
            leray_lu: std::sync::Mutex::new(None),
            poisson,
            elliptic: std::sync::Mutex::new(Vec::new()),
        })
    }

    fn leray_factor(&self) -> Result<std::sync::Arc<BandedLu<S>>> {
        let mut slot = self.leray_lu.lock().unwrap();
        if let Some(lu) = slot.as_ref() {
            return Ok(lu.clone());
        }
        let lu = std::sync::Arc::new(assemble_leray_matrix(&self.grid).lu()?);
        *slot = Some(lu.clone());
        Ok(lu)
    }

    fn elliptic_chol(&self, alpha: S) -> Result<std::sync::Arc<BandedChol<S>>> {
        {
            let cache = self.elliptic.lock().unwrap();
            if let Some((_, c)) = cache.iter().find(|(a, _)| *a == alpha) {
                return Ok(c.clone());
            }
        }
        let mut e = self.s_gram.clone();
        let a2 = sq(alpha);
        let n = e.n;
        let bw = e.bw;
        for i in 0..n {
            for d in 0..=bw.min(i) {
                let v = self.b_gram.get(i, i - d);
                if v != S::zero() {
                    e.add(i, i - d, a2 * v);
                }
            }
        }
        let chol = std::sync::Arc::new(e.cholesky()?);
        self.elliptic.lock().unwrap().push((alpha, chol.clone()));
        Ok(chol)
    }

    /// Dirichlet Poisson solve `lap psi = rhs`, psi = 0 on the wall
    /// (compact 5-point operator).
    pub fn poisson_solve(&self, rhs: &ScalarField<S>) -> Result<ScalarField<S>> {
        let mut b = self.dof.from_field(rhs);
        for v in &mut b {
            *v = -*v;
        }
        let mut x = vec![S::zero(); b.len()];
        let res = self.poisson.solve_refined(&b, &mut x);
        if res.to_f64().unwrap_or(f64::INFINITY) > 1e-9 {
            return Err(SgfError::SolveFailure(format!("poisson residual {res:e}")));
        }
        Ok(self.dof.to_field(&self.grid, &x, BcTag::Dirichlet))
    }

    /// Leray projection: P f = perp_grad(psi), psi the Dirichlet stream with
    /// curl(perp_grad(psi)) = curl f. Annihilates gradients and fixes
    /// divergence-free slip fields to solver precision.
    pub fn leray_project(&self, f: &VectorField<S>) -> Result<VectorField<S>> {
        Ok(perp_grad(&self.leray_stream(f)?))
    }

    /// Stream of the Leray projection (Dirichlet tag).
    pub fn leray_stream(&self, f: &VectorField<S>) -> Result<ScalarField<S>> {
        let lu = self.leray_factor()?;
        let w = curl2d(f);
        let rhs = self.dof.from_field(&w);
        let mut x = vec![S::zero(); rhs.len()];
        let res = lu.solve_refined(&rhs, &mut x);
        if res.to_f64().unwrap_or(f64::INFINITY) > SOLVE_TOL {
            return Err(SgfError::SolveFailure(format!("leray residual {res:e}")));
        }
        Ok(self.dof.to_field(&self.grid, &x, BcTag::Dirichlet))
    }

    /// Weak clamped solve of `lap phi - alpha^2 lap^2 phi = q`; returns
    /// `u = perp_grad(phi)`. At alpha = 0 the problem degenerates to the
    /// Dirichlet Poisson solve the format prescribes.
    pub fn elliptic_k(&self, q: &ScalarField<S>, alpha: S) -> Result<VectorField<S>> {
        if alpha == S::zero() {
            let phi = self.poisson_solve(q)?;
            return Ok(perp_grad(&phi));
        }
        let phi = self.elliptic_k_stream(q, alpha)?;
        Ok(perp_grad(&phi))
    }

    /// Clamped stream of the elliptic solve (alpha > 0).
    pub fn elliptic_k_stream(&self, q: &ScalarField<S>, alpha: S) -> Result<ScalarField<S>> {
        let chol = self.elliptic_chol(alpha)?;
        let mut rhs = vec![S::zero(); self.dof.count()];
        for iy in 1..self.grid.ny - 1 {
            for ix in 1..self.grid.nx - 1 {
                let k = self.grid.idx(ix, iy);
                rhs[self.dof.index(ix, iy)] = -self.grid.quad_weight(k) * q.values[k];
            }
        }
        let mut x = vec![S::zero(); rhs.len()];
        let res = chol.solve_refined(&rhs, &mut x);
        if res.to_f64().unwrap_or(f64::INFINITY) > SOLVE_TOL {
            return Err(SgfError::NonConvergence {
                what: "elliptic_k",
                iters: 2,
                residual: res.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.dof.to_field(&self.grid, &x, BcTag::Clamped))
    }

    /// Resolvent `(I - alpha^2 A)^-1 P f` through the vector weak form
    /// `<u, v>_H + alpha^2 <lap_psi u, lap_psi v> = <f, v>_H` over clamped
    /// streams, which reproduces the eigen representation
    /// `e_i / (1 + alpha^2 lambda_i)` to solver precision.
    pub fn resolvent_solve(&self, f: &VectorField<S>, alpha: S) -> Result<VectorField<S>> {
        let phi = self.resolvent_stream(f, alpha)?;
        Ok(perp_grad(&phi))
    }

    pub fn resolvent_stream(&self, f: &VectorField<S>, alpha: S) -> Result<ScalarField<S>> {
        if alpha <= S::zero() {
            return Err(SgfError::Config("resolvent_solve requires alpha > 0".into()));
        }
        let chol = self.elliptic_chol(alpha)?;
        let rhs = perp_grad_adjoint(f);
        let mut x = vec![S::zero(); rhs.len()];
        let res = chol.solve_refined(&rhs, &mut x);
        if res.to_f64().unwrap_or(f64::INFINITY) > SOLVE_TOL {
            return Err(SgfError::NonConvergence {
                what: "resolvent_solve",
                iters: 2,
                residual: res.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.dof.to_field(&self.grid, &x, BcTag::Clamped))
    }
}

// ---------------------------------------------------------------------------
// Norms
// ---------------------------------------------------------------------------

/// `curl(u - alpha^2 lap u)` with one-sided wall rows for the Laplacian.
pub fn curl_v<S: Scalar>(u: &VectorField<S>, alpha: S) -> ScalarField<S> {
    let mut out = curl2d(u);
    if alpha != S::zero() {
        out.axpy(-sq(alpha), &curl2d(&laplacian_vec(u)));
    }
    out
}

pub fn norm_h<S: Scalar>(u: &VectorField<S>) -> S {
    vec_norm(u)
}

pub fn norm_v<S: Scalar>(u: &VectorField<S>, alpha: S) -> S {
    (vec_inner(u, u).unwrap_or_else(|_| S::nan()) + sq(alpha) * grad_norm_sq(u)).max(S::zero()).sqrt()
}

pub fn norm_star<S: Scalar>(u: &VectorField<S>, alpha: S) -> S {
    l2_norm(&curl_v(u, alpha))
}

pub fn norm_w<S: Scalar>(u: &VectorField<S>, alpha: S) -> S {
    (sq(norm_v(u, alpha)) + sq(norm_star(u, alpha))).sqrt()
}

/// `(||u||^2 + ||grad u||^2 + ||curl(u - lap u)||^2)^(1/2)`, the alpha-free
/// H^3 surrogate.
pub fn norm_h3s<S: Scalar>(u: &VectorField<S>) -> S {
    let mut c = curl2d(u);
    c.axpy(-S::one(), &curl2d(&laplacian_vec(u)));
    (vec_inner(u, u).unwrap_or_else(|_| S::nan()) + grad_norm_sq(u) + sq(l2_norm(&c)))
        .max(S::zero())
        .sqrt()
}

// ---------------------------------------------------------------------------
// Stokes eigenbasis
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct StokesEigenbasis<S: Scalar> {
    pub grid: GridRef<S>,
    /// Pencil eigenvalues, ascending, strictly positive.
    pub lambdas: Vec<S>,
    /// Clamped stream functions, H-normalized through the S-Gram.
    pub streams: Vec<ScalarField<S>>,
    /// Velocity fields `perp_grad(psi_i)`, H-orthonormal.
    pub fields: Vec<VectorField<S>>,
    /// Relative pencil residuals `|B psi - lambda S psi| / (lambda |S psi|)`.
    pub residuals: Vec<S>,
}

impl<S: Scalar> StokesEigenbasis<S> {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `sum a_i e_i` on the grid.
    pub fn combine(&self, a: &[S]) -> VectorField<S> {
        let mut u = VectorField::zeros(&self.grid, crate::grid::VecKind::NoSlip);
        for (c, f) in a.iter().zip(&self.fields) {
            u.axpy(*c, f);
        }
        u
    }

    pub fn write_cache<W: Write>(&self, w: &mut W, alpha: S) -> Result<()> {
        w.write_all(BASIS_MAGIC)?;
        w.write_all(&(self.grid.nx as u32).to_le_bytes())?;
        w.write_all(&(self.grid.ny as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&alpha.to_f64().unwrap().to_le_bytes())?;
        for l in &self.lambdas {
            w.write_all(&l.to_f64().unwrap().to_le_bytes())?;
        }
        for r in &self.residuals {
            w.write_all(&r.to_f64().unwrap().to_le_bytes())?;
        }
        for s in &self.streams {
            s.write_snapshot(w)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(r: &mut R) -> Result<(Self, f64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BASIS_MAGIC {
            return Err(SgfError::Format("bad basis cache magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let nx = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let ny = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let alpha = f64::from_le_bytes(b8);
        let mut lambdas = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            lambdas.push(cast::<S>(f64::from_le_bytes(b8)));
        }
        let mut residuals = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            residuals.push(cast::<S>(f64::from_le_bytes(b8)));
        }
        let mut streams = Vec::with_capacity(n);
        for _ in 0..n {
            streams.push(ScalarField::read_snapshot(r)?);
        }
        let grid = Grid::new(nx, ny)?;
        let fields = streams.iter().map(perp_grad).collect();
        Ok((StokesEigenbasis { grid, lambdas, streams, fields, residuals }, alpha))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cache(&mut f, S::zero())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(Self::read_cache(&mut f)?.0)
    }
}

/// Smallest-N eigenpairs of the clamped stream pencil via subspace iteration
/// on the Cholesky factor of the biharmonic Gram.
pub fn stokes_eigensolve<S: Scalar>(
    solver: &StokesSolver<S>,
    n_modes: usize,
) -> Result<StokesEigenbasis<S>> {
    let n = solver.dof.count();
    if n_modes == 0 || n_modes > 64 {
        return Err(SgfError::Config(format!("stokes_eigensolve: N = {n_modes} out of range")));
    }
    let p = (n_modes + 8).min(n);
    let bchol = solver.b_gram.cholesky()?;
    // deterministic pseudo-random start block
    let mut x: Vec<Vec<S>> = (0..p)
        .map(|c| {
            let mut state = 0x9e3779b97f4a7c15u64 ^ ((c as u64) << 32);
            (0..n)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    cast::<S>(((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5)
                })
                .collect()
        })
        .collect();
    let mut lambdas = vec![S::zero(); p];
    let max_iter = 600;
    let mut converged = false;
    let mut tmp = vec![S::zero(); n];
    for iter in 0..max_iter {
        // X <- B^-1 S X
        for col in x.iter_mut() {
            solver.s_gram.matvec(col, &mut tmp);
            let mut y = vec![S::zero(); n];
            bchol.solve_refined(&tmp, &mut y);
            *col = y;
        }
        orthonormalize(&mut x);
        if iter % 4 == 3 || iter == max_iter - 1 {
            // Rayleigh-Ritz on the pencil (M hat, A hat): largest mu = 1/lambda
            let mut ahat = DMat::zeros(p, p);
            let mut mhat = DMat::zeros(p, p);
            for (i, xi) in x.iter().enumerate() {
                solver.b_gram.matvec(xi, &mut tmp);
                for (j, xj) in x.iter().enumerate() {
                    let v: S = xj.iter().zip(&tmp).map(|(a, b)| *a * *b).sum();
                    ahat.set(j, i, v);
                }
                solver.s_gram.matvec(xi, &mut tmp);
                for (j, xj) in x.iter().enumerate() {
                    let v: S = xj.iter().zip(&tmp).map(|(a, b)| *a * *b).sum();
                    mhat.set(j, i, v);
                }
            }
            for i in 0..p {
                for j in 0..i {
                    let a = (ahat.get(i, j) + ahat.get(j, i)) * cast::<S>(0.5);
                    ahat.set(i, j, a);
                    ahat.set(j, i, a);
                    let m = (mhat.get(i, j) + mhat.get(j, i)) * cast::<S>(0.5);
                    mhat.set(i, j, m);
                    mhat.set(j, i, m);
                }
            }
            let (mus, z) = general_eigh(&mhat, &ahat)?;
            // mus ascending; mu = 1/lambda, want the p largest mus
            let mut xs: Vec<Vec<S>> = Vec::with_capacity(p);
            let mut ls: Vec<S> = Vec::with_capacity(p);
            for c in (0..p).rev() {
                let mu = mus[c];
                if mu <= S::zero() {
                    continue;
                }
                let mut v = vec![S::zero(); n];
                for (i, xi) in x.iter().enumerate() {
                    let zc = z.get(i, c);
                    for (vk, xk) in v.iter_mut().zip(xi) {
                        *vk += zc * *xk;
                    }
                }
                xs.push(v);
                ls.push(S::one() / mu);
            }
            if xs.len() < n_modes {
                continue;
            }
            // convergence: relative pencil residual of the wanted modes
            let mut all_ok = true;
            for i in 0..n_modes {
                let r = pencil_residual(solver, &xs[i], ls[i]);
                if r > cast::<S>(TOL_EIG) {
                    all_ok = false;
                    break;
                }
            }
            x = xs;
            let plen = x.len();
            lambdas[..plen].copy_from_slice(&ls[..plen]);
            if all_ok {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(SgfError::NonConvergence {
            what: "stokes_eigensolve",
            iters: max_iter,
            residual: pencil_residual(solver, &x[0], lambdas[0]).to_f64().unwrap_or(f64::NAN),
        });
    }
    // keep N, normalize in the S-Gram (H-norm of the velocity field), and
    // S-orthogonalize inside degenerate clusters (square symmetry pairs)
    let mut streams_dof: Vec<Vec<S>> = x.into_iter().take(n_modes).collect();
    let lam: Vec<S> = lambdas[..n_modes].to_vec();
    let mut i = 0;
    while i < n_modes {
        let mut j = i + 1;
        while j < n_modes && (lam[j] - lam[i]).abs() <= cast::<S>(1e-6) * lam[i] {
            j += 1;
        }
        for a in i..j {
            for b in i..a {
                let (head, tail) = streams_dof.split_at_mut(a);
                let proj = s_inner(solver, &tail[0], &head[b]);
                let other = head[b].clone();
                for (va, vb) in tail[0].iter_mut().zip(&other) {
                    *va = *va - proj * *vb;
                }
            }
            let nrm = s_inner(solver, &streams_dof[a], &streams_dof[a]).sqrt();
            for v in streams_dof[a].iter_mut() {
                *v = *v / nrm;
            }
        }
        i = j;
    }
    let residuals: Vec<S> = streams_dof
        .iter()
        .zip(&lam)
        .map(|(psi, l)| pencil_residual(solver, psi, *l))
        .collect();
    let streams: Vec<ScalarField<S>> = streams_dof
        .iter()
        .map(|v| solver.dof.to_field(&solver.grid, v, BcTag::Clamped))
        .collect();
    let fields = streams.iter().map(perp_grad).collect();
    Ok(StokesEigenbasis { grid: solver.grid.clone(), lambdas: lam, streams, fields, residuals })
}

fn s_inner<S: Scalar>(solver: &StokesSolver<S>, a: &[S], b: &[S]) -> S {
    let mut tmp = vec![S::zero(); a.len()];
    solver.s_gram.matvec(b, &mut tmp);
    a.iter().zip(&tmp).map(|(x, y)| *x * *y).sum()
}

fn pencil_residual<S: Scalar>(solver: &StokesSolver<S>, psi: &[S], lambda: S) -> S {
    let n = psi.len();
    let mut bv = vec![S::zero(); n];
    let mut sv = vec![S::zero(); n];
    solver.b_gram.matvec(psi, &mut bv);
    solver.s_gram.matvec(psi, &mut sv);
    let mut rn = S::zero();
    let mut sn = S::zero();
    for k in 0..n {
        rn += sq(bv[k] - lambda * sv[k]);
        sn += sq(sv[k]);
    }
    (rn / sn).sqrt() / lambda
}

fn orthonormalize<S: Scalar>(x: &mut [Vec<S>]) {
    let p = x.len();
    for c in 0..p {
        for _pass in 0..2 {
            for b in 0..c {
                let (head, tail) = x.split_at_mut(c);
                let dot: S = tail[0].iter().zip(&head[b]).map(|(a, v)| *a * *v).sum();
                for (a, v) in tail[0].iter_mut().zip(&head[b]) {
                    *a = *a - dot * *v;
                }
            }
        }
        let nv: S = x[c].iter().map(|v| sq(*v)).sum::<S>().sqrt();
        let inv = S::one() / nv;
        for v in x[c].iter_mut() {
            *v = *v * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// W-basis (the Galerkin basis)
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct WEigenbasis<S: Scalar> {
    pub alpha: S,
    /// Pencil eigenvalues, ascending, all >= 1.
    pub lambdas: Vec<S>,
    /// Velocity fields, W-orthonormal; `<e_i, e_j>_V = delta_ij / lambda_i`.
    pub fields: Vec<VectorField<S>>,
    /// Clamped streams of the fields (combinations of the Stokes streams).
    pub streams: Vec<ScalarField<S>>,
    /// Expansion of e_i over the Stokes fields.
    pub coeffs: Vec<Vec<S>>,
    /// Stokes eigenvalues of the underlying modes.
    pub stokes_lambdas: Vec<S>,
}

impl<S: Scalar> WEigenbasis<S> {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn grid(&self) -> &GridRef<S> {
        self.fields[0].grid()
    }

    pub fn combine(&self, c: &[S]) -> VectorField<S> {
        let mut u = VectorField::zeros(self.grid(), crate::grid::VecKind::NoSlip);
        for (ci, f) in c.iter().zip(&self.fields) {
            u.axpy(*ci, f);
        }
        u
    }

    /// Stream function of `sum c_i e_i` (clamped).
    pub fn combine_stream(&self, c: &[S]) -> ScalarField<S> {
        let mut psi = ScalarField::zeros(self.grid(), BcTag::Clamped);
        for (ci, s) in c.iter().zip(&self.streams) {
            psi.axpy(*ci, s);
        }
        psi
    }

    /// Algebraic stiffness Gram `<grad e_i, grad e_j>` in the spectral forms.
    pub fn grad_gram(&self) -> DMat<S> {
        let n = self.len();
        let m = self.stokes_lambdas.len();
        let mut g = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut v = S::zero();
                for r in 0..m {
                    v += self.coeffs[i][r] * self.coeffs[j][r] * self.stokes_lambdas[r];
                }
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    /// Algebraic H-Gram `<e_i, e_j>` (the Stokes fields are H-orthonormal).
    pub fn h_gram(&self) -> DMat<S> {
        let n = self.len();
        let m = self.stokes_lambdas.len();
        let mut g = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut v = S::zero();
                for r in 0..m {
                    v += self.coeffs[i][r] * self.coeffs[j][r];
                }
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    /// H-inner expansion coefficients of a grid field over the Stokes span,
    /// converted to W-basis coordinates.
    pub fn project_h(&self, stokes: &StokesEigenbasis<S>, u: &VectorField<S>) -> Result<Vec<S>> {
        let m = stokes.len();
        let a: Vec<S> = (0..m)
            .map(|r| vec_inner(u, &stokes.fields[r]))
            .collect::<Result<_>>()?;
        // coeffs rows are (scaled) unit vectors over the Stokes modes; invert
        // through the H-Gram of the basis combination matrix.
        let n = self.len();
        let hg = self.h_gram();
        let lch = hg.cholesky()?;
        let mut rhs: Vec<S> = (0..n)
            .map(|i| (0..m).map(|r| self.coeffs[i][r] * a[r]).sum())
            .collect();
        crate::band::chol_solve(&lch, &mut rhs);
        Ok(rhs)
    }
}

/// Generalized eigenproblem `K_W c = lambda K_V c` over the span of the
/// Stokes fields; the produced fields are W-orthonormal.
///
/// The Grams are assembled in the spectrally consistent forms the pencil
/// provides: `<e_i, e_j>_H = delta`, `<grad e_i, grad e_j> = lambda_i delta`
/// and `curl(e - alpha^2 lap e) = (1 + alpha^2 lambda) curl e` hold exactly
/// there, so the W-spectrum is independent of the headroom M.
pub fn w_basis<S: Scalar>(
    stokes: &StokesEigenbasis<S>,
    n_modes: usize,
    alpha: S,
) -> Result<WEigenbasis<S>> {
    let m = stokes.len();
    if n_modes + 4 > m {
        return Err(SgfError::Config(format!(
            "w_basis needs spectral headroom: N = {n_modes} > M - 4 = {}",
            m.saturating_sub(4)
        )));
    }
    let mut kv = DMat::zeros(m, m);
    let mut kw = DMat::zeros(m, m);
    for i in 0..m {
        let lt = stokes.lambdas[i];
        let v = S::one() + sq(alpha) * lt;
        let star = sq(v) * lt;
        kv.set(i, i, v);
        kw.set(i, i, v + star);
    }
    let lchol = kv.cholesky().map_err(|_| {
        SgfError::SolveFailure("w_basis: V-Gram not positive definite".into())
    })?;
    let cond = kv.cond_estimate(&lchol);
    if cond.to_f64().unwrap_or(f64::INFINITY) > 1e12 {
        return Err(SgfError::SolveFailure(format!(
            "w_basis: ill-conditioned V-Gram (cond ~ {cond:e})"
        )));
    }
    let (vals, x) = general_eigh(&kw, &kv)?;
    // columns are K_V-orthonormal; rescale to K_W-orthonormal
    let mut lambdas = Vec::with_capacity(n_modes);
    let mut coeffs = Vec::with_capacity(n_modes);
    for c in 0..n_modes {
        let lam = vals[c];
        if lam < S::one() - cast::<S>(1e-9) {
            return Err(SgfError::SolveFailure(format!(
                "w_basis: eigenvalue {lam} below 1, W-norm should dominate V-norm"
            )));
        }
        let scale = S::one() / lam.sqrt();
        let col: Vec<S> = (0..m).map(|r| x.get(r, c) * scale).collect();
        lambdas.push(lam);
        coeffs.push(col);
    }
    let mut fields = Vec::with_capacity(n_modes);
    let mut streams = Vec::with_capacity(n_modes);
    for col in &coeffs {
        let mut psi = ScalarField::zeros(&stokes.grid, BcTag::Clamped);
        for (ci, s) in col.iter().zip(&stokes.streams) {
            psi.axpy(*ci, s);
        }
        fields.push(perp_grad(&psi));
        streams.push(psi);
    }
    Ok(WEigenbasis {
        alpha,
        lambdas,
        fields,
        streams,
        coeffs,
        stokes_lambdas: stokes.lambdas.clone(),
    })
}
