//! Truncated stochastic system in the W-basis and its time integration:
//! explicit Euler-Maruyama on the Ito form with corrector, implicit midpoint
//! on the Stratonovich form, plus the per-step energy bookkeeping.
//!
//! Coefficient dynamics, from the V-dual pairing against the basis:
//!   dc_i = lambda_i [ -nu <grad u, grad e_i> - (b(u, u - a^2 lap u, e_i)
//!          + a^2 b(e_i, lap u, u)) + nu_t <F(u), e_i> ] dt
//!          + lambda_i sqrt(nu_t) b(sigma_k, u, e_i) dW^k.
//! The viscous and corrector terms run through precomputed Grams so the
//! discrete energy identity closes to rounding; the noise matrices are skew
//! to the bit, which is what keeps the V-energy a martingale-free invariant.

use serde::{Deserialize, Serialize};

use crate::band::DMat;
use crate::error::{Result, SgfError};
use crate::grid::{dx, dy, grad_inner, vec_inner, GridRef, ScalarField, VecKind, VectorField};
use crate::operators::{trilinear_b, NoiseModel};
use crate::scalar::{cast, sq, Scalar};
use crate::stokes::{norm_h3s, norm_star, StokesEigenbasis, StokesSolver, WEigenbasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EmIto,
    MidpointStrat,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EmIto => "em_ito",
            Scheme::MidpointStrat => "midpoint_strat",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub alpha: f64,
    pub nu: f64,
    pub nu_tilde: f64,
    pub n_modes: usize,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub save_stride: usize,
    /// Diagnostic switch: drop the rotational nonlinearity (linear runs).
    #[serde(default = "default_true")]
    pub nonlinearity: bool,
    /// Record the per-step structure diagnostics (skew pairings).
    #[serde(default)]
    pub check_structure: bool,
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    pub fn validate(&self, basis_len: usize) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(SgfError::Config("alpha must be positive".into()));
        }
        if self.nu < 0.0 || self.nu_tilde < 0.0 {
            return Err(SgfError::Config("nu, nu_tilde must be nonnegative".into()));
        }
        if self.dt <= 0.0 || self.dt > self.t_end {
            return Err(SgfError::Config("need 0 < dt <= t_end".into()));
        }
        if self.n_modes > basis_len {
            return Err(SgfError::Config(format!(
                "N = {} exceeds basis size {basis_len}",
                self.n_modes
            )));
        }
        if self.save_stride == 0 {
            return Err(SgfError::Config("save_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Recorded scaling ratio nu / alpha^2.
    pub fn c_nu(&self) -> f64 {
        self.nu / (self.alpha * self.alpha)
    }

    /// Recorded scaling ratio nu_tilde / alpha^2.
    pub fn c_nu_tilde(&self) -> f64 {
        self.nu_tilde / (self.alpha * self.alpha)
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone)]
pub struct GalerkinState<S: Scalar> {
    pub t: S,
    pub c: Vec<S>,
}

impl<S: Scalar> GalerkinState<S> {
    pub fn zeros(n: usize) -> Self {
        GalerkinState { t: S::zero(), c: vec![S::zero(); n] }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.c.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Counter-based Brownian increments
// ---------------------------------------------------------------------------

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[inline]
fn counter_key(seed: u64, path: u64, step: u64, mode: u64, draw: u64) -> u64 {
    let mut h = mix(seed ^ 0x9e3779b97f4a7c15);
    h = mix(h ^ path.wrapping_mul(0xd1342543de82ef95));
    h = mix(h ^ step.wrapping_mul(0x2545f4914f6cdd1d));
    h = mix(h ^ mode.wrapping_mul(0x9e6c63d0876a9a47));
    mix(h ^ draw)
}

#[inline]
fn unit_open(h: u64) -> f64 {
    // (-1, 1), never exactly 0
    (((h >> 11) as f64) + 0.5) / ((1u64 << 53) as f64) * 2.0 - 1.0
}

/// Standard normal by the polar method, fully determined by the counters.
fn gauss(seed: u64, path: u64, step: u64, mode: u64) -> f64 {
    let mut draw = 0u64;
    loop {
        let u1 = unit_open(counter_key(seed, path, step, mode, 2 * draw));
        let u2 = unit_open(counter_key(seed, path, step, mode, 2 * draw + 1));
        let s = u1 * u1 + u2 * u2;
        if s > 0.0 && s < 1.0 {
            return u1 * (-2.0 * s.ln() / s).sqrt();
        }
        draw += 1;
    }
}

/// Brownian increments `Normal(0, dt)` derived from (seed, path id, step,
/// mode); bit-identical across runs and trivially parallel across paths.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub seed: u64,
    pub path_id: u64,
    pub modes: usize,
    pub dt: f64,
    /// Number of generator draws summed per increment; paths sharing a seed
    /// and a common fine resolution see the same Brownian motion across dt
    /// refinements.
    pub fine_subdiv: usize,
}

impl BrownianPath {
    pub fn new(seed: u64, path_id: u64, modes: usize, dt: f64) -> Self {
        BrownianPath { seed, path_id, modes, dt, fine_subdiv: 1 }
    }

    /// Increments at `dt` assembled from a generator running at
    /// `dt / subdiv`.
    pub fn refined(seed: u64, path_id: u64, modes: usize, dt: f64, subdiv: usize) -> Self {
        BrownianPath { seed, path_id, modes, dt, fine_subdiv: subdiv.max(1) }
    }

    pub fn increments<S: Scalar>(&self, step: usize) -> Vec<S> {
        let k = self.fine_subdiv;
        let sdt = (self.dt / k as f64).sqrt();
        let mut out = vec![S::zero(); self.modes];
        for j in 0..k {
            let fine_step = (step * k + j) as u64;
            for (m, o) in out.iter_mut().enumerate() {
                *o += cast::<S>(gauss(self.seed, self.path_id, fine_step, m as u64) * sdt);
            }
        }
        out
    }

    /// Increment over [step*dt, (step+subdiv)*dt) when this path refines a
    /// coarser one: sum of the fine increments.
    pub fn coarse_increments<S: Scalar>(&self, step: usize, subdiv: usize) -> Vec<S> {
        let mut acc = vec![S::zero(); self.modes];
        for s in 0..subdiv {
            for (a, v) in acc.iter_mut().zip(self.increments::<S>(step * subdiv + s)) {
                *a += v;
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Precomputed Galerkin system
// ---------------------------------------------------------------------------

struct ModeCache<S: Scalar> {
    e: VectorField<S>,
    lap_e: VectorField<S>,
    // gradients of e and of lap e
    ge: [ScalarField<S>; 4],
    gle: [ScalarField<S>; 4],
}

pub struct GalerkinSystem<S: Scalar> {
    pub alpha: S,
    pub nu: S,
    pub nu_tilde: S,
    pub lambdas: Vec<S>,
    pub n: usize,
    grid: GridRef<S>,
    modes: Vec<ModeCache<S>>,
    /// Algebraic stiffness Gram `<grad e_i, grad e_j>`.
    kgrad: DMat<S>,
    /// Corrector Gram `<F(e_j), e_i>` (quadrature), unscaled by nu_tilde.
    fmat: DMat<S>,
    /// Skew noise matrices `b(sigma_k, e_j, e_i)`, exact to the bit.
    bmats: Vec<DMat<S>>,
    /// Noise coefficient fields, kept for the structure diagnostics.
    sigma: Vec<VectorField<S>>,
    /// Cholesky of the quadrature V-Gram of the basis fields (projection).
    vgram_quad_chol: DMat<S>,
    pub nonlinearity: bool,
}

impl<S: Scalar> GalerkinSystem<S> {
    pub fn build(
        basis: &WEigenbasis<S>,
        noise: &NoiseModel<S>,
        solver: &StokesSolver<S>,
        cfg: &SimConfig,
    ) -> Result<Self> {
        cfg.validate(basis.len())?;
        let n = cfg.n_modes;
        let alpha = cast::<S>(cfg.alpha);
        let grid = basis.grid().clone();
        let mut modes = Vec::with_capacity(n);
        for i in 0..n {
            let e = basis.fields[i].clone();
            let lap_e = crate::grid::laplacian_vec(&e);
            let ge = [dx(&e.x), dy(&e.x), dx(&e.y), dy(&e.y)];
            let gle = [dx(&lap_e.x), dy(&lap_e.x), dx(&lap_e.y), dy(&lap_e.y)];
            modes.push(ModeCache { e, lap_e, ge, gle });
        }
        let full = basis.grad_gram();
        let mut kgrad = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kgrad.set(i, j, full.get(i, j));
            }
        }
        let mut fmat = DMat::zeros(n, n);
        if noise.modes() > 0 {
            for j in 0..n {
                let fj = crate::operators::ito_corrector_f(&modes[j].e, noise, solver, alpha)?;
                for i in 0..n {
                    fmat.set(i, j, vec_inner(&fj, &modes[i].e)?);
                }
            }
        }
        let mut bmats = Vec::with_capacity(noise.modes());
        for k in 0..noise.modes() {
            let mut bk = DMat::zeros(n, n);
            for j in 0..n {
                for i in 0..=j {
                    let v = trilinear_b(&noise.sigma[k], &modes[j].e, &modes[i].e)?;
                    bk.set(i, j, v);
                    bk.set(j, i, -v);
                }
            }
            bmats.push(bk);
        }
        let sigma = noise.sigma.clone();
        // quadrature V-Gram for the V-orthogonal truncation diagnostics
        let a2 = sq(alpha);
        let mut vg = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut h = vec_inner(&modes[i].e, &modes[j].e)?;
                let gq = {
                    let gi = &modes[i].ge;
                    let gj = &modes[j].ge;
                    let mut acc = S::zero();
                    for k in 0..grid.len() {
                        let w = grid.quad_weight(k);
                        for d in 0..4 {
                            acc += w * gi[d].values[k] * gj[d].values[k];
                        }
                    }
                    acc
                };
                h += a2 * gq;
                vg.set(i, j, h);
                vg.set(j, i, h);
            }
        }
        let vgram_quad_chol = vg.cholesky()?;
        Ok(GalerkinSystem {
            alpha,
            nu: cast::<S>(cfg.nu),
            nu_tilde: cast::<S>(cfg.nu_tilde),
            lambdas: basis.lambdas[..n].to_vec(),
            n,
            grid,
            modes,
            kgrad,
            fmat,
            bmats,
            sigma,
            vgram_quad_chol,
            nonlinearity: cfg.nonlinearity,
        })
    }

    pub fn noise_modes(&self) -> usize {
        self.bmats.len()
    }

    pub fn reconstruct(&self, c: &[S]) -> VectorField<S> {
        let mut u = VectorField::zeros(&self.grid, VecKind::NoSlip);
        for (ci, m) in c.iter().zip(&self.modes) {
            u.axpy(*ci, &m.e);
        }
        u
    }

    /// `||u||_V^2` through the exact V-Gram `diag(1/lambda)`.
    pub fn norm_v_sq(&self, c: &[S]) -> S {
        c.iter().zip(&self.lambdas).map(|(ci, l)| *ci * *ci / *l).sum()
    }

    /// `||grad u||^2` through the stiffness Gram.
    pub fn grad_sq(&self, c: &[S]) -> S {
        let mut acc = S::zero();
        for i in 0..self.n {
            for j in 0..self.n {
                acc += c[i] * self.kgrad.get(i, j) * c[j];
            }
        }
        acc
    }

    /// `<F(u), u>` through the corrector Gram (unscaled).
    pub fn f_pairing(&self, c: &[S]) -> S {
        let mut acc = S::zero();
        for i in 0..self.n {
            for j in 0..self.n {
                acc += c[i] * self.fmat.get(i, j) * c[j];
            }
        }
        acc
    }

    /// Ito compensator `nu_t sum_k sum_i lambda_i <G^k(u), e_i>^2`.
    pub fn ito_compensator(&self, c: &[S]) -> S {
        let mut acc = S::zero();
        for bk in &self.bmats {
            for i in 0..self.n {
                let mut gi = S::zero();
                for j in 0..self.n {
                    gi += bk.get(i, j) * c[j];
                }
                acc += self.lambdas[i] * gi * gi;
            }
        }
        self.nu_tilde * acc
    }

    /// Drift vector; `with_corrector` distinguishes the Ito form from the
    /// Stratonovich midpoint form.
    pub fn drift(&self, c: &[S], with_corrector: bool, out: &mut [S]) {
        let n = self.n;
        // linear parts through the Grams
        for i in 0..n {
            let mut visc = S::zero();
            let mut fc = S::zero();
            for j in 0..n {
                visc += self.kgrad.get(i, j) * c[j];
                if with_corrector {
                    fc += self.fmat.get(i, j) * c[j];
                }
            }
            out[i] = -self.nu * visc;
            if with_corrector {
                out[i] += self.nu_tilde * fc;
            }
        }
        if self.nonlinearity {
            self.add_nonlinear(c, out);
        }
        for i in 0..n {
            out[i] *= self.lambdas[i];
        }
    }

    /// Accumulate `-(b(u, u - a^2 lap u, e_i) + a^2 b(e_i, lap u, u))`.
    fn add_nonlinear(&self, c: &[S], out: &mut [S]) {
        let g = &self.grid;
        let len = g.len();
        let a2 = sq(self.alpha);
        let half = cast::<S>(0.5);
        // reconstruct u, lap u and their gradients from the mode caches
        let mut ux = vec![S::zero(); len];
        let mut uy = vec![S::zero(); len];
        let mut lx = vec![S::zero(); len];
        let mut ly = vec![S::zero(); len];
        let mut gu = [
            vec![S::zero(); len],
            vec![S::zero(); len],
            vec![S::zero(); len],
            vec![S::zero(); len],
        ];
        let mut gl = [
            vec![S::zero(); len],
            vec![S::zero(); len],
            vec![S::zero(); len],
            vec![S::zero(); len],
        ];
        for (ci, m) in c.iter().zip(&self.modes) {
            let ci = *ci;
            for k in 0..len {
                ux[k] += ci * m.e.x.values[k];
                uy[k] += ci * m.e.y.values[k];
                lx[k] += ci * m.lap_e.x.values[k];
                ly[k] += ci * m.lap_e.y.values[k];
            }
            for d in 0..4 {
                let (gud, mged) = (&mut gu[d], &m.ge[d]);
                for k in 0..len {
                    gud[k] += ci * mged.values[k];
                }
                let (gld, mgld) = (&mut gl[d], &m.gle[d]);
                for k in 0..len {
                    gld[k] += ci * mgld.values[k];
                }
            }
        }
        // w = u - a^2 lap u, grad w = grad u - a^2 grad lap u
        // advection (u . grad) w, computed once
        let mut adv_wx = vec![S::zero(); len];
        let mut adv_wy = vec![S::zero(); len];
        for k in 0..len {
            let gwxx = gu[0][k] - a2 * gl[0][k];
            let gwxy = gu[1][k] - a2 * gl[1][k];
            let gwyx = gu[2][k] - a2 * gl[2][k];
            let gwyy = gu[3][k] - a2 * gl[3][k];
            adv_wx[k] = ux[k] * gwxx + uy[k] * gwxy;
            adv_wy[k] = ux[k] * gwyx + uy[k] * gwyy;
        }
        for (i, m) in self.modes.iter().enumerate() {
            let mut q1 = S::zero(); // <(u.grad) w, e_i>
            let mut q2 = S::zero(); // <(u.grad) e_i, w>
            let mut q3 = S::zero(); // <(e_i.grad) lap u, u>
            let mut q4 = S::zero(); // <(e_i.grad) u, lap u>
            for k in 0..len {
                let w = self.grid.quad_weight(k);
                let wx = ux[k] - a2 * lx[k];
                let wy = uy[k] - a2 * ly[k];
                q1 += w * (adv_wx[k] * m.e.x.values[k] + adv_wy[k] * m.e.y.values[k]);
                let aex = ux[k] * m.ge[0].values[k] + uy[k] * m.ge[1].values[k];
                let aey = ux[k] * m.ge[2].values[k] + uy[k] * m.ge[3].values[k];
                q2 += w * (aex * wx + aey * wy);
                let ex = m.e.x.values[k];
                let ey = m.e.y.values[k];
                let alx = ex * gl[0][k] + ey * gl[1][k];
                let aly = ex * gl[2][k] + ey * gl[3][k];
                q3 += w * (alx * ux[k] + aly * uy[k]);
                let aux = ex * gu[0][k] + ey * gu[1][k];
                let auy = ex * gu[2][k] + ey * gu[3][k];
                q4 += w * (aux * lx[k] + auy * ly[k]);
            }
            let b_uwe = half * (q1 - q2);
            let b_elu = half * (q3 - q4);
            out[i] -= b_uwe + a2 * b_elu;
        }
    }

    /// Diffusion vector for noise mode k: `lambda_i sqrt(nu_t) (B^k c)_i`.
    pub fn diffusion(&self, c: &[S], k: usize, out: &mut [S]) {
        let root = self.nu_tilde.sqrt();
        let bk = &self.bmats[k];
        for i in 0..self.n {
            let mut gi = S::zero();
            for j in 0..self.n {
                gi += bk.get(i, j) * c[j];
            }
            out[i] = self.lambdas[i] * root * gi;
        }
    }

    /// `sum_i g_i c_i / lambda_i`, the V-energy pairing of the noise; skew
    /// matrices keep it at rounding level.
    pub fn noise_energy_pairing(&self, c: &[S], k: usize) -> (S, S) {
        let bk = &self.bmats[k];
        let mut acc = S::zero();
        let mut mag = S::zero();
        let root = self.nu_tilde.sqrt();
        for i in 0..self.n {
            let mut gi = S::zero();
            for j in 0..self.n {
                gi += bk.get(i, j) * c[j];
            }
            let term = root * gi * c[i];
            acc += term;
            mag += term.abs();
        }
        (acc, mag)
    }
}

// ---------------------------------------------------------------------------
// Steppers
// ---------------------------------------------------------------------------

pub struct StepDiagnostics<S: Scalar> {
    /// max_k |sum_i g_i c_i / lambda_i| (relative to the term magnitudes)
    pub noise_pairing_rel: S,
    /// max_k |b(sigma_k, u, u)| on the grid (exact-zero carrier)
    pub b_sigma_uu_max: S,
}

pub fn step_em_ito<S: Scalar>(
    sys: &GalerkinSystem<S>,
    state: &GalerkinState<S>,
    increments: &[S],
    dt: S,
) -> Result<GalerkinState<S>> {
    let n = sys.n;
    let mut d = vec![S::zero(); n];
    sys.drift(&state.c, true, &mut d);
    let mut c = state.c.clone();
    for i in 0..n {
        c[i] += dt * d[i];
    }
    let mut g = vec![S::zero(); n];
    for k in 0..sys.noise_modes() {
        sys.diffusion(&state.c, k, &mut g);
        for i in 0..n {
            c[i] += increments[k] * g[i];
        }
    }
    let out = GalerkinState { t: state.t + dt, c };
    if !out.is_finite() {
        return Err(SgfError::BlowUp {
            t: state.t.to_f64().unwrap_or(f64::NAN),
            step: 0,
        });
    }
    Ok(out)
}

/// Implicit midpoint on the Stratonovich form (no corrector); the fixed
/// point is driven to 1e-12 so the V-energy identity closes pathwise.
pub fn step_midpoint_strat<S: Scalar>(
    sys: &GalerkinSystem<S>,
    state: &GalerkinState<S>,
    increments: &[S],
    dt: S,
) -> Result<(GalerkinState<S>, Vec<S>)> {
    let n = sys.n;
    let tol = cast::<S>(1e-12);
    let mut x = state.c.clone();
    let mut d = vec![S::zero(); n];
    let mut g = vec![S::zero(); n];
    let mut mid = vec![S::zero(); n];
    let half = cast::<S>(0.5);
    for _iter in 0..50 {
        for i in 0..n {
            mid[i] = half * (state.c[i] + x[i]);
        }
        sys.drift(&mid, false, &mut d);
        let mut xn = state.c.clone();
        for i in 0..n {
            xn[i] += dt * d[i];
        }
        for k in 0..sys.noise_modes() {
            sys.diffusion(&mid, k, &mut g);
            for i in 0..n {
                xn[i] += increments[k] * g[i];
            }
        }
        let mut gap = S::zero();
        let mut scale = S::one();
        for i in 0..n {
            gap = gap.max((xn[i] - x[i]).abs());
            scale = scale.max(xn[i].abs());
        }
        x = xn;
        if gap <= tol * scale {
            if !x.iter().all(|v| v.is_finite()) {
                return Err(SgfError::BlowUp {
                    t: state.t.to_f64().unwrap_or(f64::NAN),
                    step: 0,
                });
            }
            for i in 0..n {
                mid[i] = half * (state.c[i] + x[i]);
            }
            return Ok((GalerkinState { t: state.t + dt, c: x }, mid));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SgfError::BlowUp {
                t: state.t.to_f64().unwrap_or(f64::NAN),
                step: 0,
            });
        }
    }
    Err(SgfError::NonConvergence {
        what: "midpoint fixed point",
        iters: 50,
        residual: f64::NAN,
    })
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajSample {
    pub t: f64,
    pub norm_v_sq: f64,
    pub norm_star_sq: f64,
    pub norm_h3s_sq: f64,
    pub energy_residual: f64,
    pub remainder_integral: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajSample>,
    pub blew_up: bool,
    pub steps_completed: usize,
    /// Structure diagnostics maxima over the run (present when enabled).
    pub max_noise_pairing_rel: f64,
    pub max_b_sigma_uu: f64,
    /// Final coefficient vector (empty after blow-up).
    pub final_coeffs: Vec<f64>,
    /// Coefficient vectors at the sample times.
    pub coeff_frames: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn sup_norm_v_sq(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.norm_v_sq))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,normV2,normStar2,normH3s2,energy_residual,remainder_integral")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.t, s.norm_v_sq, s.norm_star_sq, s.norm_h3s_sq, s.energy_residual,
                s.remainder_integral
            )?;
        }
        Ok(())
    }
}

/// Project `u0` onto the basis through the Stokes span.
pub fn project_initial<S: Scalar>(
    u0: &VectorField<S>,
    basis: &WEigenbasis<S>,
    stokes: &StokesEigenbasis<S>,
) -> Result<GalerkinState<S>> {
    let c = basis.project_h(stokes, u0)?;
    Ok(GalerkinState { t: S::zero(), c })
}

/// Paper-form finite-N remainder
/// `r(u) = -nu_t sum_k b(sigma_k, u, (I - P^N)(I - a^2 A)^-1 G^k(u))`,
/// evaluated on the grid with the V-orthogonal truncation.
pub fn galerkin_remainder<S: Scalar>(
    sys: &GalerkinSystem<S>,
    noise: &NoiseModel<S>,
    solver: &StokesSolver<S>,
    c: &[S],
) -> Result<S> {
    if noise.modes() == 0 {
        return Ok(S::zero());
    }
    let u = sys.reconstruct(c);
    let alpha = sys.alpha;
    let mut total = S::zero();
    for k in 0..noise.modes() {
        let gk = crate::operators::g_k(&u, noise, solver, k)?;
        let smooth = solver.resolvent_solve(&gk, alpha)?;
        // V-orthogonal projection onto span{e_1..e_N} through the
        // quadrature V-Gram, exact on the span
        let mut rhs: Vec<S> = Vec::with_capacity(sys.n);
        for i in 0..sys.n {
            rhs.push(
                vec_inner(&smooth, &sys.modes[i].e)?
                    + sq(alpha) * grad_inner(&smooth, &sys.modes[i].e),
            );
        }
        crate::band::chol_solve(&sys.vgram_quad_chol, &mut rhs);
        let mut tail = smooth.clone();
        for (i, p) in rhs.iter().enumerate() {
            tail.axpy(-*p, &sys.modes[i].e);
        }
        total -= trilinear_b(&noise.sigma[k], &u, &tail)?;
    }
    Ok(sys.nu_tilde * total)
}

/// Run S = T/dt steps recording diagnostics every save_stride; the residual
/// R(t) closes the V-energy law for the scheme in use.
pub fn simulate_path<S: Scalar>(
    sys: &GalerkinSystem<S>,
    cfg: &SimConfig,
    initial: &GalerkinState<S>,
    path: &BrownianPath,
) -> Result<Trajectory> {
    let steps = cfg.steps();
    let dt = cast::<S>(cfg.dt);
    let mut state = initial.clone();
    let v0 = sys.norm_v_sq(&state.c);
    let blow_cap = (v0 + S::one()) * cast::<S>(1e12);
    let mut visc_int = S::zero();
    let mut rem_int = S::zero();
    let two = cast::<S>(2.0);
    let mut samples = Vec::new();
    let mut max_pairing = S::zero();
    let mut max_bsig = S::zero();
    let mut blew_up = false;
    let mut completed = 0;

    let mut coeff_frames: Vec<Vec<f64>> = Vec::new();
    let record = |samples: &mut Vec<TrajSample>,
                  frames: &mut Vec<Vec<f64>>,
                  sys: &GalerkinSystem<S>,
                  state: &GalerkinState<S>,
                  visc_int: S,
                  rem_int: S,
                  v0: S| {
        let u = sys.reconstruct(&state.c);
        let vsq = sys.norm_v_sq(&state.c);
        let residual = vsq + two * sys.nu * visc_int - v0 - rem_int;
        samples.push(TrajSample {
            t: state.t.to_f64().unwrap_or(f64::NAN),
            norm_v_sq: vsq.to_f64().unwrap_or(f64::NAN),
            norm_star_sq: sq(norm_star(&u, sys.alpha)).to_f64().unwrap_or(f64::NAN),
            norm_h3s_sq: sq(norm_h3s(&u)).to_f64().unwrap_or(f64::NAN),
            energy_residual: residual.to_f64().unwrap_or(f64::NAN),
            remainder_integral: rem_int.to_f64().unwrap_or(f64::NAN),
        });
        frames.push(state.c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
    };

    record(&mut samples, &mut coeff_frames, sys, &state, visc_int, rem_int, v0);
    for step in 0..steps {
        let dw = path.increments::<S>(step);
        if cfg.check_structure {
            for k in 0..sys.noise_modes() {
                let (acc, mag) = sys.noise_energy_pairing(&state.c, k);
                let rel = acc.abs() / (mag + cast::<S>(1e-300));
                max_pairing = max_pairing.max(rel.min(acc.abs()));
                let u = sys.reconstruct(&state.c);
                let b = trilinear_b(&sys.sigma[k], &u, &u).unwrap_or(S::zero());
                max_bsig = max_bsig.max(b.abs());
            }
        }
        let stepped = match cfg.scheme {
            Scheme::EmIto => {
                let rem_rate = two * sys.nu_tilde * sys.f_pairing(&state.c)
                    + sys.ito_compensator(&state.c);
                let visc_rate = sys.grad_sq(&state.c);
                match step_em_ito(sys, &state, &dw, dt) {
                    Ok(next) => {
                        visc_int += dt * visc_rate;
                        rem_int += dt * rem_rate;
                        Some(next)
                    }
                    Err(SgfError::BlowUp { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
            Scheme::MidpointStrat => match step_midpoint_strat(sys, &state, &dw, dt) {
                Ok((next, mid)) => {
                    visc_int += dt * sys.grad_sq(&mid);
                    Some(next)
                }
                Err(SgfError::BlowUp { .. }) => None,
                Err(e) => return Err(e),
            },
        };
        match stepped {
            Some(next) => {
                if sys.norm_v_sq(&next.c) > blow_cap {
                    blew_up = true;
                    break;
                }
                state = next;
                completed = step + 1;
                if (step + 1) % cfg.save_stride == 0 || step + 1 == steps {
                    record(&mut samples, &mut coeff_frames, sys, &state, visc_int, rem_int, v0);
                }
            }
            None => {
                blew_up = true;
                break;
            }
        }
    }
    let final_coeffs = if blew_up {
        Vec::new()
    } else {
        state.c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    };
    Ok(Trajectory {
        samples,
        blew_up,
        steps_completed: completed,
        max_noise_pairing_rel: max_pairing.to_f64().unwrap_or(f64::NAN),
        max_b_sigma_uu: max_bsig.to_f64().unwrap_or(f64::NAN),
        final_coeffs,
        coeff_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::operators::{build_noise_model, NoiseKind};
    use crate::stokes::{stokes_eigensolve, w_basis};

    struct Setup {
        solver: StokesSolver<f64>,
        stokes: StokesEigenbasis<f64>,
        basis: WEigenbasis<f64>,
        noise: NoiseModel<f64>,
    }

    fn setup(n_grid: usize, m_stokes: usize, n_w: usize, k_noise: usize, alpha: f64) -> Setup {
        let g = Grid::unit_square(n_grid).unwrap();
        let solver = StokesSolver::new(&g).unwrap();
        let stokes = stokes_eigensolve(&solver, m_stokes).unwrap();
        let basis = w_basis(&stokes, n_w, alpha).unwrap();
        let noise = build_noise_model(NoiseKind::Bumps, k_noise, 1.0, &g, None).unwrap();
        Setup { solver, stokes, basis, noise }
    }

    fn cfg(alpha: f64, nu: f64, nu_tilde: f64, n: usize) -> SimConfig {
        SimConfig {
            alpha,
            nu,
            nu_tilde,
            n_modes: n,
            dt: 1e-3,
            t_end: 0.1,
            scheme: Scheme::MidpointStrat,
            seed: 42,
            save_stride: 10,
            nonlinearity: true,
            check_structure: false,
        }
    }

    fn rng(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn brownian_determinism_and_moments() {
        let p1 = BrownianPath::new(7, 3, 4, 1e-3);
        let p2 = BrownianPath::new(7, 3, 4, 1e-3);
        for step in 0..50 {
            assert_eq!(p1.increments::<f64>(step), p2.increments::<f64>(step));
        }
        // different path ids decorrelate
        let p3 = BrownianPath::new(7, 4, 4, 1e-3);
        assert_ne!(p1.increments::<f64>(0), p3.increments::<f64>(0));
        // crude moment sanity over many draws
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let n = 20000;
        for step in 0..n {
            let v = p1.increments::<f64>(step)[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64;
        assert!(mean.abs() < 3.0 * (1e-3f64 / n as f64).sqrt(), "mean {mean}");
        assert!((var - 1e-3).abs() < 1e-4, "var {var}");
        // coarse increments refine consistently
        let fine = BrownianPath::new(7, 3, 2, 2.5e-4);
        let mut acc = [0.0; 2];
        for s in 0..4 {
            let v = fine.increments::<f64>(8 + s);
            acc[0] += v[0];
            acc[1] += v[1];
        }
        let c = fine.coarse_increments::<f64>(2, 4);
        assert_eq!(acc.to_vec(), c);
    }

    #[test]
    fn project_initial_basics() {
        let s = setup(17, 10, 5, 0, 0.3);
        let st = project_initial(&s.basis.fields[3], &s.basis, &s.stokes).unwrap();
        for (i, v) in st.c.iter().enumerate() {
            let target = if i == 3 { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-10, "c[{i}] = {v}");
        }
        let zero = VectorField::zeros(s.basis.grid(), VecKind::NoSlip);
        let st0 = project_initial(&zero, &s.basis, &s.stokes).unwrap();
        assert!(st0.c.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn project_initial_bessel_monotone() {
        let s = setup(17, 14, 10, 0, 0.3);
        // smooth no-slip target
        let mut u0 = VectorField::zeros(s.basis.grid(), VecKind::NoSlip);
        u0.axpy(0.9, &s.stokes.fields[0]);
        u0.axpy(-0.5, &s.stokes.fields[3]);
        u0.axpy(0.2, &s.stokes.fields[7]);
        let err_at = |n: usize| {
            let cut = w_basis(&s.stokes, n, 0.3).unwrap();
            let st = project_initial(&u0, &cut, &s.stokes).unwrap();
            let mut rec = cut.combine(&st.c);
            rec.axpy(-1.0, &u0);
            crate::stokes::norm_v(&rec, 0.3)
        };
        let e5 = err_at(5);
        let e10 = err_at(10);
        assert!(e10 <= e5 + 1e-12, "V-error grew: {e5} -> {e10}");
    }

    #[test]
    fn drift_energy_orthogonal_inviscid() {
        let s = setup(17, 10, 6, 0, 0.3);
        let c = cfg(0.3, 0.0, 0.0, 6);
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let mut st = 5u64;
        for _ in 0..5 {
            let cvec: Vec<f64> = (0..6).map(|_| rng(&mut st)).collect();
            let mut d = vec![0.0; 6];
            sys.drift(&cvec, true, &mut d);
            let pairing: f64 = d.iter().zip(&cvec).zip(&sys.lambdas)
                .map(|((di, ci), l)| di * ci / l)
                .sum();
            let scale: f64 = d.iter().zip(&cvec).zip(&sys.lambdas)
                .map(|((di, ci), l)| (di * ci / l).abs())
                .sum();
            assert!(pairing.abs() <= 1e-12 * scale.max(1e-12), "pairing {pairing} scale {scale}");
        }
    }

    #[test]
    fn drift_homogeneity_split() {
        let s = setup(17, 10, 6, 2, 0.3);
        let c = cfg(0.3, 0.02, 0.1, 6);
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let mut lin_cfg = c.clone();
        lin_cfg.nonlinearity = false;
        let lin_sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &lin_cfg).unwrap();
        let mut st = 9u64;
        let cvec: Vec<f64> = (0..6).map(|_| rng(&mut st)).collect();
        let c2: Vec<f64> = cvec.iter().map(|v| 2.0 * v).collect();
        let mut full2 = vec![0.0; 6];
        sys.drift(&c2, true, &mut full2);
        let mut lin1 = vec![0.0; 6];
        lin_sys.drift(&cvec, true, &mut lin1);
        let mut full1 = vec![0.0; 6];
        sys.drift(&cvec, true, &mut full1);
        // quad part = full - lin; check drift(2c) = 4 quad(c) + 2 lin(c)
        for i in 0..6 {
            let quad = full1[i] - lin1[i];
            let expect = 4.0 * quad + 2.0 * lin1[i];
            assert!(
                (full2[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "mode {i}: {} vs {expect}",
                full2[i]
            );
        }
    }

    #[test]
    fn drift_linear_matches_matrix_exponential() {
        let s = setup(17, 10, 4, 0, 0.3);
        let mut c = cfg(0.3, 0.05, 0.0, 4);
        c.nonlinearity = false;
        c.dt = 5e-6;
        c.t_end = 1.0;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        // oracle: scaling-and-squaring Taylor exponential of the N x N matrix
        let n = 4;
        let mut m = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut ej = vec![0.0; n];
                ej[j] = 1.0;
                let mut d = vec![0.0; n];
                sys.drift(&ej, true, &mut d);
                m[i][j] = d[i];
            }
        }
        let expm = |m: &Vec<Vec<f64>>, t: f64| {
            let k = 20; // scaling
            let scale = t / (1u64 << k) as f64;
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                a[i][i] = 1.0;
            }
            // Taylor to order 8 of exp(scale M)
            let mut term = a.clone();
            for order in 1..=8 {
                let mut next = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for l in 0..n {
                        for j in 0..n {
                            next[i][j] += term[i][l] * m[l][j] * scale / order as f64;
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        a[i][j] += next[i][j];
                    }
                }
                term = next;
            }
            // square k times
            for _ in 0..k {
                let mut sqm = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for l in 0..n {
                        for j in 0..n {
                            sqm[i][j] += a[i][l] * a[l][j];
                        }
                    }
                }
                a = sqm;
            }
            a
        };
        let e = expm(&m, c.t_end);
        let c0 = vec![1.0, -0.5, 0.25, 0.7];
        let oracle: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| e[i][j] * c0[j]).sum())
            .collect();
        // integrate with EM (no noise)
        let st0 = GalerkinState { t: 0.0, c: c0 };
        let path = BrownianPath::new(1, 1, 0, c.dt);
        let mut st = st0;
        for step in 0..c.steps() {
            st = step_em_ito(&sys, &st, &path.increments::<f64>(step), c.dt).unwrap();
        }
        for i in 0..n {
            let rel = (st.c[i] - oracle[i]).abs() / oracle[i].abs().max(1e-6);
            assert!(rel < 1e-6, "mode {i}: {} vs {} (rel {rel})", st.c[i], oracle[i]);
        }
    }

    #[test]
    fn diffusion_energy_orthogonal_and_linear() {
        let s = setup(17, 10, 6, 3, 0.3);
        let c = cfg(0.3, 0.0, 0.4, 6);
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let mut st = 3u64;
        let cvec: Vec<f64> = (0..6).map(|_| rng(&mut st)).collect();
        for k in 0..3 {
            let (acc, mag) = sys.noise_energy_pairing(&cvec, k);
            assert!(acc.abs() <= 1e-13 * mag.max(1e-13), "k={k}: {acc}");
            let mut g1 = vec![0.0; 6];
            sys.diffusion(&cvec, k, &mut g1);
            let c3: Vec<f64> = cvec.iter().map(|v| 3.0 * v).collect();
            let mut g3 = vec![0.0; 6];
            sys.diffusion(&c3, k, &mut g3);
            for i in 0..6 {
                assert!((g3[i] - 3.0 * g1[i]).abs() < 1e-12 * g1[i].abs().max(1.0));
            }
        }
        // nu_tilde = 0 -> zero diffusion
        let c0 = cfg(0.3, 0.0, 0.0, 6);
        let sys0 = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c0).unwrap();
        let mut g = vec![1.0; 6];
        sys0.diffusion(&cvec, 0, &mut g);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn em_step_identity_and_linear_algebra() {
        let s = setup(17, 10, 4, 0, 0.3);
        let mut c = cfg(0.3, 0.0, 0.0, 4);
        c.nonlinearity = false;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st = GalerkinState { t: 0.0, c: vec![0.3, -0.1, 0.2, 0.05] };
        let next = step_em_ito(&sys, &st, &[], 1e-3).unwrap();
        // nu = 0 and no nonlinearity: drift vanishes, state unchanged
        assert_eq!(next.c, st.c);

        // one linear step matches the hand-rolled matrix update
        let c2 = cfg(0.3, 0.07, 0.0, 4);
        let mut c2 = c2;
        c2.nonlinearity = false;
        let sys2 = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c2).unwrap();
        let next2 = step_em_ito(&sys2, &st, &[], 1e-3).unwrap();
        let mut d = vec![0.0; 4];
        sys2.drift(&st.c, true, &mut d);
        for i in 0..4 {
            assert_eq!(next2.c[i], st.c[i] + 1e-3 * d[i]);
        }
    }

    #[test]
    fn em_strong_self_convergence() {
        let s = setup(17, 10, 6, 2, 0.25);
        let dts = [1e-2, 5e-3, 2.5e-3];
        let dt_fine = 2.5e-3 / 4.0;
        let fine = BrownianPath::new(11, 0, 2, dt_fine);
        let t_end = 0.5;
        let run = |dt: f64| {
            let mut c = cfg(0.25, 0.05, 0.2, 6);
            c.dt = dt;
            c.t_end = t_end;
            let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
            let mut st = GalerkinState { t: 0.0, c: vec![0.5, -0.3, 0.2, 0.1, -0.05, 0.02] };
            let subdiv = (dt / dt_fine).round() as usize;
            for step in 0..c.steps() {
                let dw = fine.coarse_increments::<f64>(step, subdiv);
                st = step_em_ito(&sys, &st, &dw, dt).unwrap();
            }
            st.c
        };
        let reference = run(dt_fine);
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let c = run(dt);
                c.iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(
            errs[1] < errs[0] && errs[2] < errs[1],
            "errors not decreasing: {errs:?}"
        );
        // order >= 1/2: halving dt shrinks the error by at least ~sqrt(2) net
        assert!(errs[2] < errs[0] / 1.6, "too slow: {errs:?}");
    }

    #[test]
    fn midpoint_conserves_inviscid_energy() {
        let s = setup(17, 12, 6, 2, 0.3);
        let mut c = cfg(0.3, 0.0, 0.3, 6);
        c.dt = 1e-3;
        c.t_end = 0.3;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st0 = GalerkinState { t: 0.0, c: vec![0.6, -0.4, 0.3, 0.15, -0.1, 0.05] };
        let v0 = sys.norm_v_sq(&st0.c);
        let path = BrownianPath::new(77, 0, 2, c.dt);
        let mut st = st0;
        for step in 0..c.steps() {
            let (next, _) = step_midpoint_strat(&sys, &st, &path.increments::<f64>(step), 1e-3).unwrap();
            st = next;
        }
        let vt = sys.norm_v_sq(&st.c);
        assert!(
            (vt - v0).abs() <= 1e-8 * v0,
            "V-energy drifted: {v0} -> {vt} (rel {})",
            (vt - v0).abs() / v0
        );
    }

    #[test]
    fn midpoint_viscous_energy_identity() {
        let s = setup(17, 12, 6, 2, 0.3);
        let mut c = cfg(0.3, 0.05, 0.3, 6);
        c.dt = 1e-3;
        c.t_end = 0.3;
        c.save_stride = 50;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st0 = GalerkinState { t: 0.0, c: vec![0.6, -0.4, 0.3, 0.15, -0.1, 0.05] };
        let path = BrownianPath::new(78, 0, 2, c.dt);
        let traj = simulate_path(&sys, &c, &st0, &path).unwrap();
        assert!(!traj.blew_up);
        let last = traj.samples.last().unwrap();
        let v0 = traj.samples[0].norm_v_sq;
        assert!(
            last.energy_residual.abs() <= 1e-8 * v0,
            "residual {} vs v0 {v0}",
            last.energy_residual
        );
    }

    #[test]
    fn simulate_path_determinism_and_dissipation() {
        let s = setup(17, 12, 6, 2, 0.3);
        let mut c = cfg(0.3, 0.1, 0.2, 6);
        c.dt = 1e-3;
        c.t_end = 0.2;
        c.scheme = Scheme::EmIto;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st0 = GalerkinState { t: 0.0, c: vec![0.5, -0.3, 0.2, 0.1, -0.05, 0.02] };
        let path = BrownianPath::new(5, 9, 2, c.dt);
        let t1 = simulate_path(&sys, &c, &st0, &path).unwrap();
        let t2 = simulate_path(&sys, &c, &st0, &path).unwrap();
        assert_eq!(t1.final_coeffs, t2.final_coeffs);
        for (a, b) in t1.samples.iter().zip(&t2.samples) {
            assert_eq!(a.norm_v_sq, b.norm_v_sq);
            assert_eq!(a.energy_residual, b.energy_residual);
        }

        // deterministic viscous run: monotone nonincreasing V-energy
        let mut cd = cfg(0.3, 0.1, 0.0, 6);
        cd.dt = 1e-3;
        cd.t_end = 0.2;
        cd.save_stride = 1;
        cd.scheme = Scheme::MidpointStrat;
        let sysd = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &cd).unwrap();
        let td = simulate_path(&sysd, &cd, &st0, &path).unwrap();
        for w in td.samples.windows(2) {
            assert!(w[1].norm_v_sq <= w[0].norm_v_sq * (1.0 + 1e-12));
        }
    }

    #[test]
    fn remainder_zero_without_noise_and_shrinks_with_n() {
        // remainder vanishes for K = 0
        let s0 = setup(17, 16, 8, 0, 0.3);
        let c0 = cfg(0.3, 0.0, 0.5, 8);
        let sys0 = GalerkinSystem::build(&s0.basis, &s0.noise, &s0.solver, &c0).unwrap();
        let r0 = galerkin_remainder(&sys0, &s0.noise, &s0.solver, &vec![0.4; 8]).unwrap();
        assert_eq!(r0, 0.0);

        // |r| shrinks from N = 4 to N = 10 on random low-mode states
        let s = setup(17, 16, 10, 2, 0.3);
        let mut st = 13u64;
        let mut shrunk = 0;
        let total = 8;
        for _ in 0..total {
            let mut cvec = vec![0.0; 10];
            for v in cvec.iter_mut().take(4) {
                *v = rng(&mut st);
            }
            let mut c_small = cfg(0.3, 0.0, 0.5, 4);
            c_small.nonlinearity = true;
            let sys_small =
                GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c_small).unwrap();
            let c_big = cfg(0.3, 0.0, 0.5, 10);
            let sys_big = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c_big).unwrap();
            let r_small =
                galerkin_remainder(&sys_small, &s.noise, &s.solver, &cvec[..4].to_vec()).unwrap();
            let r_big = galerkin_remainder(&sys_big, &s.noise, &s.solver, &cvec).unwrap();
            if r_big.abs() <= r_small.abs() + 1e-14 {
                shrunk += 1;
            }
        }
        assert!(shrunk >= total - 1, "remainder shrank in only {shrunk}/{total} cases");
    }

    #[test]
    fn remainder_saturated_projection() {
        // u in the span, single smooth sigma, N = full headroom: the
        // remainder drops to the cross-operator consistency floor
        let g = Grid::<f64>::unit_square(33).unwrap();
        let solver = StokesSolver::new(&g).unwrap();
        let stokes = stokes_eigensolve(&solver, 24).unwrap();
        let basis = w_basis(&stokes, 20, 0.35).unwrap();
        let noise = build_noise_model(NoiseKind::Eigen, 1, 1.0, &g, Some(&stokes)).unwrap();
        let c = cfg(0.35, 0.0, 1.0, 20);
        let sys = GalerkinSystem::build(&basis, &noise, &solver, &c).unwrap();
        let mut cvec = vec![0.0; 20];
        cvec[0] = 0.8;
        cvec[1] = -0.4;
        cvec[2] = 0.2;
        let r = galerkin_remainder(&sys, &noise, &solver, &cvec).unwrap();
        let vsq = sys.norm_v_sq(&cvec);
        println!("saturated remainder {r:e} vs V^2 {vsq:e} (ratio {:e})", r.abs() / vsq);
        // compare against the same state truncated hard at N = 6
        let c6 = cfg(0.35, 0.0, 1.0, 6);
        let sys6 = GalerkinSystem::build(&basis, &noise, &solver, &c6).unwrap();
        let r6 = galerkin_remainder(&sys6, &noise, &solver, &cvec[..6].to_vec()).unwrap();
        println!("N=6 remainder {r6:e}");
        assert!(r.abs() <= 1e-4 * vsq.max(1e-12), "saturated remainder {r} vs {vsq}");
        assert!(r.abs() < 0.1 * r6.abs(), "no saturation gain: {r} vs {r6}");
    }

    #[test]
    fn structure_checks_along_a_run() {
        let s = setup(17, 12, 6, 2, 0.3);
        let mut c = cfg(0.3, 0.02, 0.3, 6);
        c.dt = 1e-3;
        c.t_end = 0.05;
        c.check_structure = true;
        c.scheme = Scheme::EmIto;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st0 = GalerkinState { t: 0.0, c: vec![0.5, -0.3, 0.2, 0.1, -0.05, 0.02] };
        let path = BrownianPath::new(3, 1, 2, c.dt);
        let traj = simulate_path(&sys, &c, &st0, &path).unwrap();
        assert_eq!(traj.max_b_sigma_uu, 0.0, "b(sigma, u, u) must vanish identically");
        assert!(traj.max_noise_pairing_rel < 1e-12, "noise pairing {}", traj.max_noise_pairing_rel);
    }

    #[test]
    fn trajectory_csv_roundtrip_shape() {
        let s = setup(17, 10, 4, 1, 0.3);
        let mut c = cfg(0.3, 0.0, 0.2, 4);
        c.t_end = 0.02;
        c.dt = 1e-3;
        c.save_stride = 5;
        let sys = GalerkinSystem::build(&s.basis, &s.noise, &s.solver, &c).unwrap();
        let st0 = GalerkinState { t: 0.0, c: vec![0.2, 0.1, 0.0, -0.1] };
        let path = BrownianPath::new(1, 2, 1, c.dt);
        let traj = simulate_path(&sys, &c, &st0, &path).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,normV2,normStar2,normH3s2,energy_residual,remainder_integral");
        assert_eq!(lines.len(), traj.samples.len() + 1);
    }
}
