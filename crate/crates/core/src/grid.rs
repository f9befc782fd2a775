//! Discrete calculus on a tensor grid over the unit square: fields, difference
//! stencils, quadrature and the binary snapshot format shared by every module.
//!
//! One first-difference operator per axis (central inside, one-sided
//! second-order at walls, reflection for clamped fields) underlies `grad`,
//! `perp_grad`, `divergence` and `curl2d`, so the commutation identities
//! `div(perp_grad(f)) = 0` and `curl2d(grad(f)) = 0` hold to rounding, not
//! just to O(h^2).

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, SgfError};
use crate::scalar::{cast, Scalar};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SGF1";

/// Boundary tag carried by every scalar field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcTag {
    /// Zero trace, normal derivative free.
    Dirichlet,
    /// Zero trace and zero normal derivative (ghost reflection).
    Clamped,
    /// No constraint.
    Free,
}

impl BcTag {
    pub fn as_byte(self) -> u8 {
        match self {
            BcTag::Dirichlet => 0,
            BcTag::Clamped => 1,
            BcTag::Free => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(BcTag::Dirichlet),
            1 => Ok(BcTag::Clamped),
            2 => Ok(BcTag::Free),
            _ => Err(SgfError::Format(format!("unknown bc tag byte {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BcTag::Dirichlet => "dirichlet",
            BcTag::Clamped => "clamped",
            BcTag::Free => "free",
        }
    }

    fn zero_trace(self) -> bool {
        matches!(self, BcTag::Dirichlet | BcTag::Clamped)
    }
}

/// Kind of a vector field, tracked for invariant checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecKind {
    /// Vanishes componentwise on the boundary.
    NoSlip,
    /// Zero normal trace only.
    Slip,
    Free,
}

/// Uniform tensor grid on [0, Lx] x [0, Ly] with Lx = 1.
#[derive(Debug)]
pub struct Grid<S: Scalar> {
    pub nx: usize,
    pub ny: usize,
    pub h: S,
    interior: Vec<bool>,
    bdist: Vec<S>,
    /// Trapezoid quadrature weight per node (h^2 interior, halved per wall).
    quad_w: Vec<S>,
}

pub type GridRef<S> = Arc<Grid<S>>;

impl<S: Scalar> Grid<S> {
    pub fn unit_square(n: usize) -> Result<GridRef<S>> {
        Self::new(n, n)
    }

    pub fn new(nx: usize, ny: usize) -> Result<GridRef<S>> {
        if nx < 9 || ny < 9 {
            return Err(SgfError::GridTooSmall { nx, ny });
        }
        let h = S::one() / cast::<S>((nx - 1) as f64);
        let mut interior = vec![false; nx * ny];
        let mut bdist = vec![S::zero(); nx * ny];
        let mut quad_w = vec![S::zero(); nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let k = iy * nx + ix;
                let on_bnd = ix == 0 || iy == 0 || ix == nx - 1 || iy == ny - 1;
                interior[k] = !on_bnd;
                let d = ix.min(nx - 1 - ix).min(iy).min(ny - 1 - iy);
                bdist[k] = cast::<S>(d as f64) * h;
                let wx = if ix == 0 || ix == nx - 1 { cast::<S>(0.5) } else { S::one() };
                let wy = if iy == 0 || iy == ny - 1 { cast::<S>(0.5) } else { S::one() };
                quad_w[k] = h * h * wx * wy;
            }
        }
        Ok(Arc::new(Grid { nx, ny, h, interior, bdist, quad_w }))
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn x(&self, ix: usize) -> S {
        cast::<S>(ix as f64) * self.h
    }

    #[inline]
    pub fn y(&self, iy: usize) -> S {
        cast::<S>(iy as f64) * self.h
    }

    #[inline]
    pub fn is_interior(&self, ix: usize, iy: usize) -> bool {
        self.interior[self.idx(ix, iy)]
    }

    #[inline]
    pub fn boundary_distance(&self, ix: usize, iy: usize) -> S {
        self.bdist[self.idx(ix, iy)]
    }

    #[inline]
    pub fn quad_weight(&self, k: usize) -> S {
        self.quad_w[k]
    }

    pub fn boundary_node_count(&self) -> usize {
        self.interior.iter().filter(|&&b| !b).count()
    }

    /// Interior (DOF) node count.
    pub fn interior_count(&self) -> usize {
        (self.nx - 2) * (self.ny - 2)
    }

    pub fn same(a: &GridRef<S>, b: &GridRef<S>) -> bool {
        Arc::ptr_eq(a, b) || (a.nx == b.nx && a.ny == b.ny)
    }
}

/// Grid-sampled scalar field with a boundary tag.
#[derive(Debug, Clone)]
pub struct ScalarField<S: Scalar> {
    pub grid: GridRef<S>,
    pub values: Vec<S>,
    pub bc: BcTag,
}

impl<S: Scalar> ScalarField<S> {
    pub fn zeros(grid: &GridRef<S>, bc: BcTag) -> Self {
        ScalarField { grid: grid.clone(), values: vec![S::zero(); grid.len()], bc }
    }

    /// Sample `f(x, y)` at the nodes; zero-trace tags get their boundary zeroed.
    pub fn from_fn(grid: &GridRef<S>, bc: BcTag, mut f: impl FnMut(S, S) -> S) -> Self {
        let mut values = vec![S::zero(); grid.len()];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                values[grid.idx(ix, iy)] = f(grid.x(ix), grid.y(iy));
            }
        }
        let mut out = ScalarField { grid: grid.clone(), values, bc };
        if bc.zero_trace() {
            out.zero_boundary();
        }
        out
    }

    pub fn zero_boundary(&mut self) {
        let g = self.grid.clone();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                if !g.is_interior(ix, iy) {
                    self.values[g.idx(ix, iy)] = S::zero();
                }
            }
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> S {
        self.values[self.grid.idx(ix, iy)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.len() {
            return Err(SgfError::Format("value buffer does not match grid".into()));
        }
        if self.bc.zero_trace() {
            for iy in 0..self.grid.ny {
                for ix in 0..self.grid.nx {
                    if !self.grid.is_interior(ix, iy) && self.at(ix, iy) != S::zero() {
                        return Err(SgfError::Format(format!(
                            "{} field nonzero on boundary at ({ix},{iy})",
                            self.bc.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, a: S) {
        for v in &mut self.values {
            *v = *v * a;
        }
    }

    pub fn axpy(&mut self, a: S, other: &ScalarField<S>) {
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v = *v + a * *o;
        }
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.grid.nx as u32).to_le_bytes())?;
        w.write_all(&(self.grid.ny as u32).to_le_bytes())?;
        w.write_all(&[self.bc.as_byte()])?;
        for v in &self.values {
            w.write_all(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(SgfError::Format("bad snapshot magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let nx = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let ny = u32::from_le_bytes(b4) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let bc = BcTag::from_byte(tag[0])?;
        let grid = Grid::new(nx, ny)?;
        let mut values = Vec::with_capacity(nx * ny);
        let mut b8 = [0u8; 8];
        for _ in 0..nx * ny {
            r.read_exact(&mut b8)?;
            values.push(cast::<S>(f64::from_le_bytes(b8)));
        }
        Ok(ScalarField { grid, values, bc })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_snapshot(&mut f)
    }
}

/// Two scalar components on one grid.
#[derive(Debug, Clone)]
pub struct VectorField<S: Scalar> {
    pub x: ScalarField<S>,
    pub y: ScalarField<S>,
    pub kind: VecKind,
}

impl<S: Scalar> VectorField<S> {
    pub fn zeros(grid: &GridRef<S>, kind: VecKind) -> Self {
        VectorField {
            x: ScalarField::zeros(grid, BcTag::Free),
            y: ScalarField::zeros(grid, BcTag::Free),
            kind,
        }
    }

    pub fn from_fn(
        grid: &GridRef<S>,
        kind: VecKind,
        mut f: impl FnMut(S, S) -> (S, S),
    ) -> Self {
        let mut vx = ScalarField::zeros(grid, BcTag::Free);
        let mut vy = ScalarField::zeros(grid, BcTag::Free);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (a, b) = f(grid.x(ix), grid.y(iy));
                let k = grid.idx(ix, iy);
                vx.values[k] = a;
                vy.values[k] = b;
            }
        }
        let mut out = VectorField { x: vx, y: vy, kind };
        if kind == VecKind::NoSlip {
            out.x.zero_boundary();
            out.y.zero_boundary();
        }
        out
    }

    #[inline]
    pub fn grid(&self) -> &GridRef<S> {
        &self.x.grid
    }

    pub fn scale(&mut self, a: S) {
        self.x.scale(a);
        self.y.scale(a);
    }

    pub fn axpy(&mut self, a: S, other: &VectorField<S>) {
        self.x.axpy(a, &other.x);
        self.y.axpy(a, &other.y);
    }

    pub fn max_abs(&self) -> S {
        let mut m = S::zero();
        for (a, b) in self.x.values.iter().zip(&self.y.values) {
            m = m.max((*a * *a + *b * *b).sqrt());
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Max boundary-node magnitude, for no-slip checks.
    pub fn boundary_max(&self) -> S {
        let g = self.grid().clone();
        let mut m = S::zero();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                if !g.is_interior(ix, iy) {
                    let k = g.idx(ix, iy);
                    m = m.max(self.x.values[k].abs()).max(self.y.values[k].abs());
                }
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Stencils. A single per-axis first difference (central inside, one-sided
// second order at walls, zero for clamped fields whose reflection kills the
// normal derivative) is shared by every first-order operator.
// ---------------------------------------------------------------------------

#[inline]
fn d1_line<S: Scalar>(f: impl Fn(usize) -> S, n: usize, i: usize, inv2h: S, clamped: bool) -> S {
    if i == 0 {
        if clamped {
            S::zero()
        } else {
            (cast::<S>(4.0) * f(1) - cast::<S>(3.0) * f(0) - f(2)) * inv2h
        }
    } else if i == n - 1 {
        if clamped {
            S::zero()
        } else {
            (cast::<S>(3.0) * f(n - 1) - cast::<S>(4.0) * f(n - 2) + f(n - 3)) * inv2h
        }
    } else {
        (f(i + 1) - f(i - 1)) * inv2h
    }
}

#[inline]
fn d2_line<S: Scalar>(f: impl Fn(usize) -> S, n: usize, i: usize, invh2: S, clamped: bool) -> S {
    let two = cast::<S>(2.0);
    if i == 0 {
        if clamped {
            // ghost reflection f(-1) = f(1)
            two * (f(1) - f(0)) * invh2
        } else {
            (two * f(0) - cast::<S>(5.0) * f(1) + cast::<S>(4.0) * f(2) - f(3)) * invh2
        }
    } else if i == n - 1 {
        if clamped {
            two * (f(n - 2) - f(n - 1)) * invh2
        } else {
            (two * f(n - 1) - cast::<S>(5.0) * f(n - 2) + cast::<S>(4.0) * f(n - 3) - f(n - 4))
                * invh2
        }
    } else {
        (f(i + 1) - two * f(i) + f(i - 1)) * invh2
    }
}

/// d/dx with the tag-dependent wall closure.
pub fn dx<S: Scalar>(phi: &ScalarField<S>) -> ScalarField<S> {
    let g = phi.grid.clone();
    let inv2h = S::one() / (cast::<S>(2.0) * g.h);
    let clamped = phi.bc == BcTag::Clamped;
    let mut out = ScalarField::zeros(&g, BcTag::Free);
    for iy in 0..g.ny {
        let row = iy * g.nx;
        for ix in 0..g.nx {
            out.values[row + ix] =
                d1_line(|i| phi.values[row + i], g.nx, ix, inv2h, clamped);
        }
    }
    out
}

/// d/dy with the tag-dependent wall closure.
pub fn dy<S: Scalar>(phi: &ScalarField<S>) -> ScalarField<S> {
    let g = phi.grid.clone();
    let inv2h = S::one() / (cast::<S>(2.0) * g.h);
    let clamped = phi.bc == BcTag::Clamped;
    let mut out = ScalarField::zeros(&g, BcTag::Free);
    for ix in 0..g.nx {
        for iy in 0..g.ny {
            out.values[iy * g.nx + ix] =
                d1_line(|i| phi.values[i * g.nx + ix], g.ny, iy, inv2h, clamped);
        }
    }
    out
}

fn d2x<S: Scalar>(phi: &ScalarField<S>) -> ScalarField<S> {
    let g = phi.grid.clone();
    let invh2 = S::one() / (g.h * g.h);
    let clamped = phi.bc == BcTag::Clamped;
    let mut out = ScalarField::zeros(&g, BcTag::Free);
    for iy in 0..g.ny {
        let row = iy * g.nx;
        for ix in 0..g.nx {
            out.values[row + ix] =
                d2_line(|i| phi.values[row + i], g.nx, ix, invh2, clamped);
        }
    }
    out
}

fn d2y<S: Scalar>(phi: &ScalarField<S>) -> ScalarField<S> {
    let g = phi.grid.clone();
    let invh2 = S::one() / (g.h * g.h);
    let clamped = phi.bc == BcTag::Clamped;
    let mut out = ScalarField::zeros(&g, BcTag::Free);
    for ix in 0..g.nx {
        for iy in 0..g.ny {
            out.values[iy * g.nx + ix] =
                d2_line(|i| phi.values[i * g.nx + ix], g.ny, iy, invh2, clamped);
        }
    }
    out
}

pub fn grad<S: Scalar>(phi: &ScalarField<S>) -> VectorField<S> {
    VectorField { x: dx(phi), y: dy(phi), kind: VecKind::Free }
}

/// `(-d/dy, d/dx)`; a clamped stream yields a no-slip field, a Dirichlet
/// stream a slip field.
pub fn perp_grad<S: Scalar>(phi: &ScalarField<S>) -> VectorField<S> {
    let mut fx = dy(phi);
    fx.scale(-S::one());
    let fy = dx(phi);
    let kind = match phi.bc {
        BcTag::Clamped => VecKind::NoSlip,
        BcTag::Dirichlet => VecKind::Slip,
        BcTag::Free => VecKind::Free,
    };
    let mut out = VectorField { x: fx, y: fy, kind };
    if kind == VecKind::NoSlip {
        // clamped closure already yields exact zeros; make it bit-exact
        out.x.zero_boundary();
        out.y.zero_boundary();
    }
    out
}

pub fn divergence<S: Scalar>(u: &VectorField<S>) -> ScalarField<S> {
    let mut out = dx(&u.x);
    out.axpy(S::one(), &dy(&u.y));
    out
}

pub fn curl2d<S: Scalar>(u: &VectorField<S>) -> ScalarField<S> {
    let mut out = dx(&u.y);
    out.axpy(-S::one(), &dy(&u.x));
    out
}

/// Compact 5-point Laplacian with the tag closure at wall rows.
pub fn laplacian<S: Scalar>(phi: &ScalarField<S>) -> ScalarField<S> {
    let mut out = d2x(phi);
    out.axpy(S::one(), &d2y(phi));
    out
}

/// Componentwise vector Laplacian (one-sided wall rows for no-slip data).
pub fn laplacian_vec<S: Scalar>(u: &VectorField<S>) -> VectorField<S> {
    VectorField { x: laplacian(&u.x), y: laplacian(&u.y), kind: VecKind::Free }
}

/// 13-point biharmonic as the composition of the compact Laplacian with
/// itself; the clamped problem is the only one the elliptic machinery poses.
pub fn biharmonic<S: Scalar>(phi: &ScalarField<S>) -> Result<ScalarField<S>> {
    if phi.bc != BcTag::Clamped {
        return Err(SgfError::BcMismatch { expected: "clamped", got: phi.bc.name() });
    }
    let inner = laplacian(phi);
    Ok(laplacian(&inner))
}

/// Advective derivative `(a . grad) u`, componentwise.
pub fn advect<S: Scalar>(a: &VectorField<S>, u: &VectorField<S>) -> VectorField<S> {
    let gx_ux = dx(&u.x);
    let gy_ux = dy(&u.x);
    let gx_uy = dx(&u.y);
    let gy_uy = dy(&u.y);
    let g = u.grid().clone();
    let mut out = VectorField::zeros(&g, VecKind::Free);
    for k in 0..g.len() {
        let ax = a.x.values[k];
        let ay = a.y.values[k];
        out.x.values[k] = ax * gx_ux.values[k] + ay * gy_ux.values[k];
        out.y.values[k] = ax * gx_uy.values[k] + ay * gy_uy.values[k];
    }
    out
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Max |f| over interior nodes; wall rows carry one-sided closure values and
/// are excluded from the machine-exact identities.
pub fn interior_max_abs<S: Scalar>(f: &ScalarField<S>) -> S {
    let g = &f.grid;
    let mut m = S::zero();
    for iy in 1..g.ny - 1 {
        for ix in 1..g.nx - 1 {
            m = m.max(f.values[g.idx(ix, iy)].abs());
        }
    }
    m
}

pub fn l2_inner<S: Scalar>(f: &ScalarField<S>, g: &ScalarField<S>) -> Result<S> {
    if !Grid::same(&f.grid, &g.grid) {
        return Err(SgfError::GridMismatch("l2_inner"));
    }
    let grid = &f.grid;
    let mut acc = S::zero();
    for k in 0..grid.len() {
        acc += grid.quad_weight(k) * f.values[k] * g.values[k];
    }
    Ok(acc)
}

pub fn l2_norm<S: Scalar>(f: &ScalarField<S>) -> S {
    l2_inner(f, f).map(|v| v.max(S::zero()).sqrt()).unwrap_or_else(|_| S::nan())
}

pub fn vec_inner<S: Scalar>(u: &VectorField<S>, v: &VectorField<S>) -> Result<S> {
    if !Grid::same(u.grid(), v.grid()) {
        return Err(SgfError::GridMismatch("vec_inner"));
    }
    let grid = u.grid();
    let mut acc = S::zero();
    for k in 0..grid.len() {
        acc += grid.quad_weight(k)
            * (u.x.values[k] * v.x.values[k] + u.y.values[k] * v.y.values[k]);
    }
    Ok(acc)
}

pub fn vec_norm<S: Scalar>(u: &VectorField<S>) -> S {
    vec_inner(u, u).map(|v| v.max(S::zero()).sqrt()).unwrap_or_else(|_| S::nan())
}

/// `int grad u : grad v` with the shared first differences, summed over both
/// components.
pub fn grad_inner<S: Scalar>(u: &VectorField<S>, v: &VectorField<S>) -> S {
    let (uxx, uyx, uxy, uyy) = (dx(&u.x), dy(&u.x), dx(&u.y), dy(&u.y));
    let (vxx, vyx, vxy, vyy) = (dx(&v.x), dy(&v.x), dx(&v.y), dy(&v.y));
    let g = u.grid();
    let mut acc = S::zero();
    for k in 0..g.len() {
        acc += g.quad_weight(k)
            * (uxx.values[k] * vxx.values[k]
                + uyx.values[k] * vyx.values[k]
                + uxy.values[k] * vxy.values[k]
                + uyy.values[k] * vyy.values[k]);
    }
    acc
}

/// `int |grad u|^2` with the shared first differences, summed over both
/// components.
pub fn grad_norm_sq<S: Scalar>(u: &VectorField<S>) -> S {
    let gxx = dx(&u.x);
    let gyx = dy(&u.x);
    let gxy = dx(&u.y);
    let gyy = dy(&u.y);
    let g = u.grid();
    let mut acc = S::zero();
    for k in 0..g.len() {
        acc += g.quad_weight(k)
            * (gxx.values[k] * gxx.values[k]
                + gyx.values[k] * gyx.values[k]
                + gxy.values[k] * gxy.values[k]
                + gyy.values[k] * gyy.values[k]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    type F = ScalarField<f64>;

    fn grid(n: usize) -> GridRef<f64> {
        Grid::unit_square(n).unwrap()
    }

    #[test]
    fn make_grid_examples() {
        let g = grid(9);
        assert_eq!(g.h, 1.0 / 8.0);
        assert_eq!(g.boundary_node_count(), 32);
        let g = grid(33);
        assert_eq!(g.h, 1.0 / 32.0);
        assert!(matches!(
            Grid::<f64>::new(8, 9),
            Err(SgfError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn grid_invariants() {
        let g = grid(11);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let on_b = ix == 0 || iy == 0 || ix == g.nx - 1 || iy == g.ny - 1;
                assert_eq!(g.is_interior(ix, iy), !on_b);
                let d = g.boundary_distance(ix, iy);
                assert!(d >= 0.0);
                assert_eq!(d == 0.0, on_b);
            }
        }
    }

    #[test]
    fn grad_linear_exact() {
        let g = grid(17);
        let phi = F::from_fn(&g, BcTag::Free, |x, _| x);
        let v = grad(&phi);
        for k in 0..g.len() {
            assert!((v.x.values[k] - 1.0).abs() < 1e-13);
            assert!(v.y.values[k].abs() < 1e-13);
        }
    }

    #[test]
    fn grad_quadratic_exact() {
        let g = grid(33);
        let phi = F::from_fn(&g, BcTag::Free, |x, y| x * x + y * y);
        let v = grad(&phi);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let k = g.idx(ix, iy);
                assert!((v.x.values[k] - 2.0 * g.x(ix)).abs() < 1e-12);
                assert!((v.y.values[k] - 2.0 * g.y(iy)).abs() < 1e-12);
            }
        }
    }

    fn max_err_grad_sin(n: usize) -> f64 {
        let g = grid(n);
        let pi = std::f64::consts::PI;
        let phi = F::from_fn(&g, BcTag::Free, |x, y| (pi * x).sin() * (pi * y).sin());
        let v = grad(&phi);
        let mut m: f64 = 0.0;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let k = g.idx(ix, iy);
                let ex = pi * (pi * g.x(ix)).cos() * (pi * g.y(iy)).sin();
                m = m.max((v.x.values[k] - ex).abs());
            }
        }
        m
    }

    #[test]
    fn grad_second_order() {
        let r = max_err_grad_sin(17) / max_err_grad_sin(33);
        assert!((3.5..=4.5).contains(&r), "Richardson ratio {r}");
    }

    #[test]
    fn laplacian_second_order() {
        let pi = std::f64::consts::PI;
        let err = |n: usize| {
            let g = grid(n);
            let phi = F::from_fn(&g, BcTag::Free, |x, y| (pi * x).sin() * (pi * y).sin());
            let lap = laplacian(&phi);
            let mut m: f64 = 0.0;
            for iy in 1..g.ny - 1 {
                for ix in 1..g.nx - 1 {
                    let k = g.idx(ix, iy);
                    m = m.max((lap.values[k] + 2.0 * pi * pi * phi.values[k]).abs());
                }
            }
            m
        };
        let r = err(17) / err(33);
        assert!((3.5..=4.5).contains(&r), "Richardson ratio {r}");
    }

    #[test]
    fn laplacian_quadratic_and_const() {
        let g = grid(17);
        let phi = F::from_fn(&g, BcTag::Free, |x, _| x * x);
        let lap = laplacian(&phi);
        for v in &lap.values {
            assert!((v - 2.0).abs() < 1e-11);
        }
        let c = F::from_fn(&g, BcTag::Free, |_, _| 3.25);
        let lap = laplacian(&c);
        assert!(lap.max_abs() < 1e-12);
    }

    #[test]
    fn calculus_identities_exact() {
        // div(perp_grad) = 0 and curl(grad) = 0 to rounding for any field.
        let g = grid(21);
        let phi = F::from_fn(&g, BcTag::Free, |x, y| {
            (3.0 * x).sin() * (2.0 * y).cos() + x * x * y
        });
        let d = divergence(&perp_grad(&phi));
        assert!(d.max_abs() < 1e-11, "div perp = {}", d.max_abs());
        let c = curl2d(&grad(&phi));
        assert!(c.max_abs() < 1e-11, "curl grad = {}", c.max_abs());
    }

    #[test]
    fn curl_perp_matches_laplacian_on_quadratics() {
        // Both stencil families are exact on quadratics, walls included.
        let g = grid(19);
        let phi = F::from_fn(&g, BcTag::Free, |x, y| {
            x * x - 2.0 * y * y + 0.75 * x * y + 0.5 * x - y
        });
        let lhs = curl2d(&perp_grad(&phi));
        let rhs = laplacian(&phi);
        let mut m: f64 = 0.0;
        for k in 0..g.len() {
            m = m.max((lhs.values[k] - rhs.values[k]).abs());
        }
        assert!(m < 1e-10, "identity gap {m}");
    }

    #[test]
    fn curl_perp_consistent_second_order() {
        let pi = std::f64::consts::PI;
        let gap = |n: usize| {
            let g = grid(n);
            let phi = F::from_fn(&g, BcTag::Free, |x, y| (pi * x).sin() * (pi * y).sin());
            let lhs = curl2d(&perp_grad(&phi));
            let rhs = laplacian(&phi);
            let mut m: f64 = 0.0;
            for iy in 2..g.ny - 2 {
                for ix in 2..g.nx - 2 {
                    let k = g.idx(ix, iy);
                    m = m.max((lhs.values[k] - rhs.values[k]).abs());
                }
            }
            m
        };
        let r = gap(17) / gap(33);
        assert!((3.0..=5.0).contains(&r), "gap ratio {r}");
    }

    #[test]
    fn divergence_examples() {
        let g = grid(17);
        let rot = VectorField::from_fn(&g, VecKind::Free, |x, y| (y, -x));
        assert!(divergence(&rot).max_abs() < 1e-12);
        let lin = VectorField::from_fn(&g, VecKind::Free, |x, y| (x, y));
        let d = divergence(&lin);
        for v in &d.values {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn curl_examples() {
        let g = grid(17);
        let rot = VectorField::from_fn(&g, VecKind::Free, |x, y| (-y, x));
        let c = curl2d(&rot);
        for v in &c.values {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perp_grad_examples() {
        let g = grid(17);
        let phi = F::from_fn(&g, BcTag::Free, |x, _| x);
        let v = perp_grad(&phi);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let k = g.idx(ix, iy);
                assert!(v.x.values[k].abs() < 1e-13);
                assert!((v.y.values[k] - 1.0).abs() < 1e-13);
            }
        }
        // clamped bump -> no-slip field; the commutation identity is exact at
        // every interior node (wall rows are closure territory)
        let bump = clamped_bump(&g);
        let u = perp_grad(&bump);
        assert_eq!(u.kind, VecKind::NoSlip);
        assert_eq!(u.boundary_max(), 0.0);
        let d = divergence(&u);
        let mut m: f64 = 0.0;
        for iy in 1..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                m = m.max(d.values[g.idx(ix, iy)].abs());
            }
        }
        assert!(m < 1e-12, "interior divergence {m}");
    }

    pub(crate) fn clamped_bump(g: &GridRef<f64>) -> F {
        // x^2 (1-x)^2 y^2 (1-y)^2 vanishes with its normal derivative on the walls
        F::from_fn(g, BcTag::Clamped, |x, y| {
            let bx = x * x * (1.0 - x) * (1.0 - x);
            let by = y * y * (1.0 - y) * (1.0 - y);
            bx * by
        })
    }

    #[test]
    fn biharmonic_of_x2y2() {
        let g = grid(21);
        let phi = F::from_fn(&g, BcTag::Clamped, |x, y| x * x * y * y);
        // tag forces zero trace; rebuild raw values for the interior check
        let mut raw = phi.clone();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                raw.values[g.idx(ix, iy)] = g.x(ix).powi(2) * g.y(iy).powi(2);
            }
        }
        let b = biharmonic(&raw).unwrap();
        for iy in 4..g.ny - 4 {
            for ix in 4..g.nx - 4 {
                assert!((b.values[g.idx(ix, iy)] - 8.0).abs() < 1e-9);
            }
        }
        let free = F::from_fn(&g, BcTag::Free, |x, _| x);
        assert!(biharmonic(&free).is_err());
    }

    #[test]
    fn biharmonic_is_laplacian_squared_inside() {
        let g = grid(33);
        // interior-supported: clamped bump to the 4th power decays fast at walls
        let phi = F::from_fn(&g, BcTag::Clamped, |x, y| {
            let b = x * (1.0 - x) * y * (1.0 - y);
            (4.0 * b).powi(4)
        });
        let bi = biharmonic(&phi).unwrap();
        let ll = laplacian(&laplacian(&phi));
        let mut m: f64 = 0.0;
        for k in 0..g.len() {
            m = m.max((bi.values[k] - ll.values[k]).abs());
        }
        assert!(m < 1e-12, "composition gap {m}");
    }

    #[test]
    fn quadrature_examples() {
        let g = grid(33);
        let one = F::from_fn(&g, BcTag::Free, |_, _| 1.0);
        assert!((l2_inner(&one, &one).unwrap() - 1.0).abs() < 1e-12);
        let pi = std::f64::consts::PI;
        let s = F::from_fn(&g, BcTag::Free, |x, _| (pi * x).sin());
        let v = l2_inner(&s, &s).unwrap();
        assert!((v - 0.5).abs() < 2.0 * g.h * g.h, "got {v}");
        // symmetry + positivity
        let t = F::from_fn(&g, BcTag::Free, |x, y| x - y);
        assert_eq!(l2_inner(&s, &t).unwrap(), l2_inner(&t, &s).unwrap());
        assert!(l2_inner(&t, &t).unwrap() > 0.0);
        let z = F::zeros(&g, BcTag::Free);
        assert_eq!(l2_inner(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = F::zeros(&grid(9), BcTag::Free);
        let b = F::zeros(&grid(11), BcTag::Free);
        assert!(l2_inner(&a, &b).is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let g = grid(9);
        let phi = F::from_fn(&g, BcTag::Dirichlet, |x, y| x * y * (1.0 - x));
        let mut buf = Vec::new();
        phi.write_snapshot(&mut buf).unwrap();
        let back = F::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.bc, BcTag::Dirichlet);
        assert_eq!(back.values, phi.values);
    }

    #[test]
    fn generic_scalar_smoke() {
        let g = Grid::<f32>::unit_square(9).unwrap();
        let phi = ScalarField::<f32>::from_fn(&g, BcTag::Free, |x, _| x * x);
        let lap = laplacian(&phi);
        for v in &lap.values {
            assert!((v - 2.0).abs() < 1e-3);
        }
    }
}
