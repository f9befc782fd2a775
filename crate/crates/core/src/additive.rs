//! Additive-noise system and its vorticity formulation: the velocity side
//! runs through the W-basis Galerkin machinery with constant diffusion, the
//! vorticity side is a grid-space transport solve with Arakawa advection and
//! explicit damping; their agreement is a genuine cross-discretization check.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgfError};
use crate::euler::arakawa_jacobian;
use crate::galerkin::{
    BrownianPath, GalerkinState, GalerkinSystem, Scheme, SimConfig, TrajSample, Trajectory,
};
use crate::grid::{curl2d, grad_norm_sq, l2_inner, l2_norm, ScalarField, VectorField};
use crate::operators::NoiseModel;
use crate::scalar::{cast, sq, Scalar};
use crate::stokes::{curl_v, norm_h3s, StokesSolver, WEigenbasis};

/// Additive noise: the coefficient fields plus their curls, with the
/// `sqrt(nu_tilde)` scaling convention.
#[derive(Debug)]
pub struct AdditiveNoiseModel<S: Scalar> {
    pub sigma: Vec<VectorField<S>>,
    /// `s_k = curl sigma_k`, computed once.
    pub s_curl: Vec<ScalarField<S>>,
    pub nu_tilde: S,
}

impl<S: Scalar> AdditiveNoiseModel<S> {
    pub fn from_noise(noise: &NoiseModel<S>) -> Self {
        let s_curl = noise.sigma.iter().map(curl2d).collect();
        AdditiveNoiseModel {
            sigma: noise.sigma.clone(),
            s_curl,
            nu_tilde: noise.nu_tilde,
        }
    }

    pub fn modes(&self) -> usize {
        self.sigma.len()
    }

    /// `nu_tilde * sum_k ||s_k||^2`, the vorticity Ito production rate.
    pub fn curl_production(&self) -> S {
        self.nu_tilde * self.s_curl.iter().map(|s| sq(l2_norm(s))).sum()
    }
}

/// Velocity-side additive system: Galerkin drift without corrector, constant
/// diffusion `g_i^k = sqrt(nu_t) lambda_i <sigma_k, e_i>`.
pub struct AdditiveSystem<S: Scalar> {
    pub sys: GalerkinSystem<S>,
    /// Per noise mode, the constant diffusion vector.
    gvecs: Vec<Vec<S>>,
    pub nu_tilde: S,
}

impl<S: Scalar> AdditiveSystem<S> {
    pub fn build(
        basis: &WEigenbasis<S>,
        noise: &AdditiveNoiseModel<S>,
        solver: &StokesSolver<S>,
        cfg: &SimConfig,
    ) -> Result<Self> {
        // the inner system supplies drift and Grams; no transport noise
        let mut inner_cfg = cfg.clone();
        inner_cfg.nu_tilde = 0.0;
        let empty = NoiseModel::empty(S::zero());
        let sys = GalerkinSystem::build(basis, &empty, solver, &inner_cfg)?;
        let root = cast::<S>(cfg.nu_tilde).sqrt();
        let mut gvecs = Vec::with_capacity(noise.modes());
        for sigma in &noise.sigma {
            let mut g = Vec::with_capacity(cfg.n_modes);
            for i in 0..cfg.n_modes {
                let inner = crate::grid::vec_inner(sigma, &basis.fields[i])?;
                g.push(basis.lambdas[i] * root * inner);
            }
            gvecs.push(g);
        }
        Ok(AdditiveSystem { sys, gvecs, nu_tilde: cast::<S>(cfg.nu_tilde) })
    }

    /// Ito compensator of the V-energy: `nu_t sum_k sum_i lambda_i <sigma_k, e_i>^2`
    /// (the finite-N truncation of `sum <sigma_k, R sigma_k>`).
    pub fn v_energy_production(&self) -> S {
        let mut acc = S::zero();
        for g in &self.gvecs {
            for (gi, l) in g.iter().zip(&self.sys.lambdas) {
                acc += *gi * *gi / *l;
            }
        }
        acc
    }
}

/// One path of the additive velocity system; both schemes available.
pub fn simulate_velocity_additive<S: Scalar>(
    asys: &AdditiveSystem<S>,
    cfg: &SimConfig,
    initial: &GalerkinState<S>,
    path: &BrownianPath,
) -> Result<Trajectory> {
    let steps = cfg.steps();
    let dt = cast::<S>(cfg.dt);
    let n = asys.sys.n;
    let mut state = initial.clone();
    let v0 = asys.sys.norm_v_sq(&state.c);
    let blow_cap = (v0 + S::one()) * cast::<S>(1e12);
    let mut visc_int = S::zero();
    let mut prod_int = S::zero();
    let two = cast::<S>(2.0);
    let half = cast::<S>(0.5);
    let mut samples = Vec::new();
    let mut blew_up = false;
    let mut completed = 0;
    let mut coeff_frames: Vec<Vec<f64>> = Vec::new();
    let record = |samples: &mut Vec<TrajSample>,
                  frames: &mut Vec<Vec<f64>>,
                  state: &GalerkinState<S>,
                  visc: S,
                  prod: S| {
        let u = asys.sys.reconstruct(&state.c);
        let vsq = asys.sys.norm_v_sq(&state.c);
        let residual = vsq + two * asys.sys.nu * visc - v0 - prod;
        samples.push(TrajSample {
            t: state.t.to_f64().unwrap_or(f64::NAN),
            norm_v_sq: vsq.to_f64().unwrap_or(f64::NAN),
            norm_star_sq: sq(crate::stokes::norm_star(&u, asys.sys.alpha))
                .to_f64()
                .unwrap_or(f64::NAN),
            norm_h3s_sq: sq(norm_h3s(&u)).to_f64().unwrap_or(f64::NAN),
            energy_residual: residual.to_f64().unwrap_or(f64::NAN),
            remainder_integral: prod.to_f64().unwrap_or(f64::NAN),
        });
        frames.push(state.c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
    };
    record(&mut samples, &mut coeff_frames, &state, visc_int, prod_int);
    let mut drift = vec![S::zero(); n];
    for step in 0..steps {
        let dw = path.increments::<S>(step);
        let next = match cfg.scheme {
            Scheme::EmIto => {
                asys.sys.drift(&state.c, false, &mut drift);
                let mut c = state.c.clone();
                for i in 0..n {
                    c[i] += dt * drift[i];
                }
                for (g, w) in asys.gvecs.iter().zip(&dw) {
                    for i in 0..n {
                        c[i] += *w * g[i];
                    }
                }
                visc_int += dt * asys.sys.grad_sq(&state.c);
                prod_int += dt * asys.v_energy_production();
                GalerkinState { t: state.t + dt, c }
            }
            Scheme::MidpointStrat => {
                // additive noise: the increment is state-independent, the
                // midpoint only affects the drift
                let mut x = state.c.clone();
                let mut mid = vec![S::zero(); n];
                let tol = cast::<S>(1e-12);
                let mut done = false;
                for _ in 0..50 {
                    for i in 0..n {
                        mid[i] = half * (state.c[i] + x[i]);
                    }
                    asys.sys.drift(&mid, false, &mut drift);
                    let mut xn = state.c.clone();
                    for i in 0..n {
                        xn[i] += dt * drift[i];
                    }
                    for (g, w) in asys.gvecs.iter().zip(&dw) {
                        for i in 0..n {
                            xn[i] += *w * g[i];
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
                        done = true;
                        break;
                    }
                }
                if !done {
                    return Err(SgfError::NonConvergence {
                        what: "additive midpoint",
                        iters: 50,
                        residual: f64::NAN,
                    });
                }
                for i in 0..n {
                    mid[i] = half * (state.c[i] + x[i]);
                }
                visc_int += dt * asys.sys.grad_sq(&mid);
                prod_int += dt * asys.v_energy_production();
                GalerkinState { t: state.t + dt, c: x }
            }
        };
        if !next.is_finite() || asys.sys.norm_v_sq(&next.c) > blow_cap {
            blew_up = true;
            break;
        }
        state = next;
        completed = step + 1;
        if (step + 1) % cfg.save_stride == 0 || step + 1 == steps {
            record(&mut samples, &mut coeff_frames, &state, visc_int, prod_int);
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
        max_noise_pairing_rel: 0.0,
        max_b_sigma_uu: 0.0,
        final_coeffs,
        coeff_frames,
    })
}

// ---------------------------------------------------------------------------
// Vorticity formulation on the grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VorticityConfig {
    pub alpha: f64,
    pub nu: f64,
    pub nu_tilde: f64,
    pub dt: f64,
    pub t_end: f64,
    pub save_stride: usize,
    /// Test mode: freeze u = 0 (pure additive diffusion of q).
    #[serde(default)]
    pub transport_off: bool,
}

impl VorticityConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(SgfError::Config("alpha must be positive".into()));
        }
        if self.nu > 0.0 && self.nu * self.dt / (self.alpha * self.alpha) > 0.5 {
            return Err(SgfError::Config(format!(
                "explicit damping unstable: nu dt / alpha^2 = {}",
                self.nu * self.dt / (self.alpha * self.alpha)
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct VorticityTrajectory<S: Scalar> {
    pub times: Vec<S>,
    pub q_fields: Vec<ScalarField<S>>,
    pub q_norm_sq: Vec<S>,
    /// Integral of the damping pairing `-(2 nu / a^2) <q - curl u, q>`.
    pub damping_integral: Vec<S>,
}

/// Explicit grid-space integration of the vorticity system
/// `dq = -(u . grad q + nu/a^2 (q - curl u)) dt + sqrt(nu_t) sum s_k dW`,
/// the velocity recovered through the clamped elliptic operator each step.
pub fn simulate_vorticity_additive<S: Scalar>(
    cfg: &VorticityConfig,
    q0: &ScalarField<S>,
    noise: &AdditiveNoiseModel<S>,
    solver: &StokesSolver<S>,
    path: &BrownianPath,
) -> Result<VorticityTrajectory<S>> {
    cfg.validate()?;
    let grid = solver.grid.clone();
    let alpha = cast::<S>(cfg.alpha);
    let nu = cast::<S>(cfg.nu);
    let damp = nu / sq(alpha);
    let root = cast::<S>(cfg.nu_tilde).sqrt();
    let dt = cast::<S>(cfg.dt);
    let steps = cfg.steps();
    let mut q = q0.clone();
    let mut traj = VorticityTrajectory {
        times: vec![S::zero()],
        q_fields: vec![q.clone()],
        q_norm_sq: vec![sq(l2_norm(&q))],
        damping_integral: vec![S::zero()],
    };
    let mut damp_int = S::zero();
    let two = cast::<S>(2.0);
    let half = cast::<S>(0.5);
    let sixth = S::one() / cast::<S>(6.0);
    // deterministic RHS (advection + damping); additive noise is applied
    // after a classic RK4 substep, which keeps pure transport conservative
    let rhs = |q: &ScalarField<S>| -> Result<ScalarField<S>> {
        let mut drift = ScalarField::zeros(&grid, crate::grid::BcTag::Free);
        if !cfg.transport_off {
            let phi = solver.elliptic_k_stream(q, alpha)?;
            let j = arakawa_jacobian(&phi, q);
            drift.axpy(-S::one(), &j);
            if nu > S::zero() {
                let u = crate::grid::perp_grad(&phi);
                let cu = curl2d(&u);
                let mut rel = q.clone();
                rel.axpy(-S::one(), &cu);
                drift.axpy(-damp, &rel);
            }
        } else if nu > S::zero() {
            drift.axpy(-damp, q);
        }
        Ok(drift)
    };
    for step in 0..steps {
        // CFL and damping bookkeeping at the left endpoint
        if !cfg.transport_off {
            let phi = solver.elliptic_k_stream(&q, alpha)?;
            let u = crate::grid::perp_grad(&phi);
            let cflv = (dt * u.max_abs() / grid.h).to_f64().unwrap_or(f64::INFINITY);
            if cflv > 0.5 {
                return Err(SgfError::CflViolation { cfl: cflv });
            }
            if nu > S::zero() {
                let cu = curl2d(&u);
                let mut rel = q.clone();
                rel.axpy(-S::one(), &cu);
                damp_int += dt * two * damp * l2_inner(&rel, &q)?;
            }
        } else if nu > S::zero() {
            damp_int += dt * two * damp * l2_inner(&q, &q)?;
        }
        let k1 = rhs(&q)?;
        let mut q2 = q.clone();
        q2.axpy(half * dt, &k1);
        let k2 = rhs(&q2)?;
        let mut q3 = q.clone();
        q3.axpy(half * dt, &k2);
        let k3 = rhs(&q3)?;
        let mut q4 = q.clone();
        q4.axpy(dt, &k3);
        let k4 = rhs(&q4)?;
        let mut incr = k1;
        incr.axpy(two, &k2);
        incr.axpy(two, &k3);
        incr.axpy(S::one(), &k4);
        q.axpy(dt * sixth, &incr);
        if noise.modes() > 0 {
            let dw = path.increments::<S>(step);
            for (s, w) in noise.s_curl.iter().zip(&dw) {
                q.axpy(root * *w, s);
            }
        }
        if !q.is_finite() {
            return Err(SgfError::BlowUp {
                t: (dt * cast::<S>(step as f64)).to_f64().unwrap_or(f64::NAN),
                step,
            });
        }
        if (step + 1) % cfg.save_stride == 0 || step + 1 == steps {
            traj.times.push(dt * cast::<S>((step + 1) as f64));
            traj.q_fields.push(q.clone());
            traj.q_norm_sq.push(sq(l2_norm(&q)));
            traj.damping_integral.push(damp_int);
        }
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_rel_discrepancy: f64,
    pub q0_norm: f64,
    pub times: Vec<f64>,
    pub rel_discrepancy: Vec<f64>,
}

/// Feed the same Brownian path to both formulations and compare
/// `curl(u - a^2 lap u)` of the velocity side against the vorticity side.
pub fn check_equivalence<S: Scalar>(
    cfg: &SimConfig,
    u0: &GalerkinState<S>,
    asys: &AdditiveSystem<S>,
    basis: &WEigenbasis<S>,
    noise: &AdditiveNoiseModel<S>,
    solver: &StokesSolver<S>,
    path: &BrownianPath,
) -> Result<EquivalenceReport> {
    let alpha = cast::<S>(cfg.alpha);
    let u_field = basis.combine(&u0.c);
    let q0 = curl_v(&u_field, alpha);
    let vcfg = VorticityConfig {
        alpha: cfg.alpha,
        nu: cfg.nu,
        nu_tilde: cfg.nu_tilde,
        dt: cfg.dt,
        t_end: cfg.t_end,
        save_stride: cfg.save_stride,
        transport_off: false,
    };
    let vtraj = simulate_vorticity_additive(&vcfg, &q0, noise, solver, path)?;

    // velocity side, recording coefficients at the same stride
    let steps = cfg.steps();
    let dt = cast::<S>(cfg.dt);
    let n = asys.sys.n;
    let mut state = u0.clone();
    let mut coeff_frames = vec![state.c.clone()];
    let mut drift = vec![S::zero(); n];
    for step in 0..steps {
        let dw = path.increments::<S>(step);
        asys.sys.drift(&state.c, false, &mut drift);
        let mut c = state.c.clone();
        for i in 0..n {
            c[i] += dt * drift[i];
        }
        for (g, w) in asys.gvecs.iter().zip(&dw) {
            for i in 0..n {
                c[i] += *w * g[i];
            }
        }
        state = GalerkinState { t: state.t + dt, c };
        if !state.is_finite() {
            return Err(SgfError::BlowUp { t: state.t.to_f64().unwrap_or(f64::NAN), step });
        }
        if (step + 1) % cfg.save_stride == 0 || step + 1 == steps {
            coeff_frames.push(state.c.clone());
        }
    }
    let q0n = l2_norm(&q0).to_f64().unwrap_or(f64::NAN).max(1e-300);
    let mut times = Vec::new();
    let mut rels = Vec::new();
    let mut max_rel: f64 = 0.0;
    for (frame, qv) in coeff_frames.iter().zip(&vtraj.q_fields) {
        let u = basis.combine(frame);
        let mut qu = curl_v(&u, alpha);
        qu.axpy(-S::one(), qv);
        let rel = l2_norm(&qu).to_f64().unwrap_or(f64::NAN) / q0n;
        times.push(vtraj.times[rels.len()].to_f64().unwrap_or(f64::NAN));
        rels.push(rel);
        max_rel = max_rel.max(rel);
    }
    Ok(EquivalenceReport {
        max_rel_discrepancy: max_rel,
        q0_norm: q0n,
        times,
        rel_discrepancy: rels,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VorticityEnergyReport {
    pub bins: usize,
    pub z_scores: Vec<f64>,
    pub fraction_within_3: f64,
}

/// Ensemble test of the vorticity Ito law: per save bin, the mean increment
/// of `||q||^2` minus the integrated drift must be a mean-zero martingale.
pub fn check_vorticity_energy_law<S: Scalar>(
    cfg: &VorticityConfig,
    q0: &ScalarField<S>,
    noise: &AdditiveNoiseModel<S>,
    solver: &StokesSolver<S>,
    seed: u64,
    paths: usize,
) -> Result<VorticityEnergyReport> {
    let production = noise.curl_production().to_f64().unwrap_or(0.0);
    let mut trajs = Vec::with_capacity(paths);
    for p in 0..paths {
        let path = BrownianPath::new(seed, p as u64, noise.modes(), cfg.dt);
        trajs.push(simulate_vorticity_additive(cfg, q0, noise, solver, &path)?);
    }
    let frames = trajs[0].times.len();
    let mut z_scores = Vec::new();
    for b in 1..frames {
        let span = (trajs[0].times[b] - trajs[0].times[b - 1]).to_f64().unwrap_or(f64::NAN);
        let mut devs = Vec::with_capacity(paths);
        for t in &trajs {
            let dq = (t.q_norm_sq[b] - t.q_norm_sq[b - 1]).to_f64().unwrap_or(f64::NAN);
            let damp = (t.damping_integral[b] - t.damping_integral[b - 1])
                .to_f64()
                .unwrap_or(f64::NAN);
            devs.push(dq + damp - production * span);
        }
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt().max(1e-300);
        z_scores.push(mean / se);
    }
    let within = z_scores.iter().filter(|z| z.abs() <= 3.0).count() as f64;
    Ok(VorticityEnergyReport {
        bins: z_scores.len(),
        fraction_within_3: within / z_scores.len().max(1) as f64,
        z_scores,
    })
}

/// Right side of the vorticity H^3 control
/// `||q|| / a^2 + ||grad u|| / a^2 + ||grad u||`.
pub fn h3_from_vorticity<S: Scalar>(u: &VectorField<S>, q: &ScalarField<S>, alpha: S) -> S {
    let a2 = sq(alpha);
    let gn = grad_norm_sq(u).max(S::zero()).sqrt();
    l2_norm(q) / a2 + gn / a2 + gn
}
