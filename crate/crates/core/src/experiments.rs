//! Experiment orchestration: the inviscid-limit sweep against the Euler
//! reference, the pathwise energy experiment, the boundary-layer scaling
//! diagnostics and the additive-noise cross-checks. The harness owns all
//! parallelism: paths fan out over a worker pool and reduce in a fixed
//! order, so reruns are byte-identical.

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::additive::{
    check_equivalence, check_vorticity_energy_law, AdditiveNoiseModel, AdditiveSystem,
    VorticityConfig,
};
use crate::config::{Coupling, FamilyKind, HarnessConfig, InitialData};
use crate::error::{Result, SgfError};
use crate::euler::{
    initial_family_cutoff, make_initial_family, reference_vortex_pair, solve_euler,
    verify_family_scalings, EulerTrajectory, InitialScalingTable,
};
use crate::galerkin::{
    project_initial, simulate_path, BrownianPath, GalerkinState, GalerkinSystem, Scheme,
    SimConfig, Trajectory,
};
use crate::grid::{curl2d, perp_grad, Grid, GridRef, ScalarField, VectorField};
use crate::manifest::{ResultRow, ResultTable, RunManifest};
use crate::operators::{build_noise_model, reference_corrector_stream, NoiseModel};
use crate::stokes::{stokes_eigensolve, w_basis, StokesEigenbasis, StokesSolver, WEigenbasis};

/// A grid with its solver and cached Stokes basis; the expensive part of
/// every experiment, shared read-only across workers.
pub struct Lab {
    pub grid: GridRef<f64>,
    pub solver: Arc<StokesSolver<f64>>,
    pub stokes: Arc<StokesEigenbasis<f64>>,
}

impl Lab {
    /// Build or load from the cache directory (`SGF_CACHE_DIR`).
    pub fn build(n: usize, stokes_modes: usize) -> Result<Lab> {
        let grid = Grid::unit_square(n)?;
        let solver = Arc::new(StokesSolver::new(&grid)?);
        let stokes = match cache_path(n, stokes_modes) {
            Some(path) if path.exists() => {
                let loaded = StokesEigenbasis::load(&path)?;
                if loaded.grid.nx == n && loaded.len() == stokes_modes {
                    Arc::new(loaded)
                } else {
                    Arc::new(build_and_cache(&solver, stokes_modes, Some(path))?)
                }
            }
            maybe => Arc::new(build_and_cache(&solver, stokes_modes, maybe)?),
        };
        Ok(Lab { grid, solver, stokes })
    }
}

fn cache_path(n: usize, m: usize) -> Option<PathBuf> {
    std::env::var_os("SGF_CACHE_DIR").map(|dir| {
        PathBuf::from(dir).join(format!("stokes_{n}x{n}_m{m}.sgb"))
    })
}

fn build_and_cache(
    solver: &StokesSolver<f64>,
    m: usize,
    path: Option<PathBuf>,
) -> Result<StokesEigenbasis<f64>> {
    let basis = stokes_eigensolve(solver, m)?;
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).ok();
        }
        basis.save(&p).ok();
    }
    Ok(basis)
}

/// Reference tangential stream per the configured initial data.
pub fn reference_stream(kind: InitialData, grid: &GridRef<f64>) -> ScalarField<f64> {
    match kind {
        InitialData::Gyre => reference_corrector_stream(grid),
        InitialData::VortexPair => reference_vortex_pair(grid),
    }
}

fn initial_field(
    cfg: &HarnessConfig,
    psi_bar: &ScalarField<f64>,
    u_bar: &VectorField<f64>,
    alpha: f64,
    solver: &StokesSolver<f64>,
) -> Result<VectorField<f64>> {
    match cfg.sweep.family {
        FamilyKind::Cutoff => initial_family_cutoff(psi_bar, alpha, cfg.sweep.osc_amp),
        FamilyKind::Resolvent => make_initial_family(u_bar, alpha, solver),
    }
}

// ---------------------------------------------------------------------------
// Inviscid-limit sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub table: ResultTable,
    /// Strictly decreasing `E[sup ||u - u_bar||^2]` with >= 2 SE separations.
    pub diff_decreasing_2se: bool,
    pub last_over_first: f64,
    pub h1_decreasing: bool,
    pub h3_within_factor_10: bool,
    /// Relative change of the first-row sup statistic at half the stride.
    pub stride_sensitivity: f64,
    pub save_stride: usize,
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `sup_t ||u^alpha(t) - u_bar(t)||^2` over the saved frames.
fn sup_diff_sq(
    traj: &Trajectory,
    basis: &WEigenbasis<f64>,
    euler: &EulerTrajectory<f64>,
) -> f64 {
    let mut sup = 0.0f64;
    for (sample, frame) in traj.samples.iter().zip(&traj.coeff_frames) {
        let u = basis.combine(frame);
        let mut d = euler.velocity_at(sample.t);
        d.axpy(-1.0, &u);
        let n = crate::stokes::norm_h(&d);
        sup = sup.max(n * n);
    }
    sup
}

struct AlphaOutcome {
    row: ResultRow,
}

#[allow(clippy::too_many_arguments)]
fn run_alpha(
    cfg: &HarnessConfig,
    lab: &Lab,
    euler: &EulerTrajectory<f64>,
    psi_bar: &ScalarField<f64>,
    u_bar: &VectorField<f64>,
    noise: &NoiseModel<f64>,
    alpha_index: usize,
    alpha: f64,
    save_stride: usize,
    paths: usize,
) -> Result<AlphaOutcome> {
    let basis = w_basis(&lab.stokes, cfg.basis.w_modes, alpha)?;
    let sim = SimConfig {
        alpha,
        nu: cfg.nu_at(alpha),
        nu_tilde: cfg.nu_tilde_at(alpha),
        n_modes: cfg.basis.w_modes,
        dt: cfg.sim.dt,
        t_end: cfg.sim.t_end,
        scheme: cfg.sim.scheme,
        seed: cfg.seed,
        save_stride,
        nonlinearity: true,
        check_structure: false,
    };
    let sys = GalerkinSystem::build(&basis, noise, &lab.solver, &sim)?;
    let u0 = initial_field(cfg, psi_bar, u_bar, alpha, &lab.solver)?;
    let init = project_initial(&u0, &basis, &lab.stokes)?;
    let trajs: Vec<Result<Trajectory>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let path_id = match cfg.sweep.coupling {
                Coupling::SharedPaths => p as u64,
                Coupling::Independent => (alpha_index * 1_000_003 + p) as u64,
            };
            let path = BrownianPath::new(cfg.seed, path_id, noise.modes(), sim.dt);
            simulate_path(&sys, &sim, &init, &path)
        })
        .collect();
    let mut sup_diffs = Vec::new();
    let mut sup_grads = Vec::new();
    let mut sup_h3s = Vec::new();
    let mut blowups = 0usize;
    for t in trajs {
        let t = t?;
        if t.blew_up {
            blowups += 1;
            continue;
        }
        sup_diffs.push(sup_diff_sq(&t, &basis, euler));
        let mut sg = 0.0f64;
        let mut sh = 0.0f64;
        for (s, frame) in t.samples.iter().zip(&t.coeff_frames) {
            sg = sg.max(sys.grad_sq(frame));
            sh = sh.max(s.norm_h3s_sq);
        }
        sup_grads.push(alpha * alpha * sg);
        sup_h3s.push(alpha.powi(6) * sh);
    }
    let (dm, dse) = mean_se(&sup_diffs);
    let (gm, gse) = mean_se(&sup_grads);
    let (hm, hse) = mean_se(&sup_h3s);
    let reliable = (blowups as f64) <= cfg.sweep.max_blowup_fraction * paths as f64;
    Ok(AlphaOutcome {
        row: ResultRow {
            alpha,
            sup_diff_mean: dm,
            sup_diff_se: dse,
            h1_scaled_mean: gm,
            h1_scaled_se: gse,
            h3_scaled_mean: hm,
            h3_scaled_se: hse,
            paths_used: sup_diffs.len(),
            blowups,
            reliable,
        },
    })
}

/// Euler reference run with frames aligned to the sweep's sample times.
pub fn euler_reference(
    cfg: &HarnessConfig,
    lab: &Lab,
    u_bar: &VectorField<f64>,
) -> Result<EulerTrajectory<f64>> {
    let omega0 = curl2d(u_bar);
    let save_interval = cfg.sim.dt * cfg.sim.save_stride as f64;
    let speed = u_bar.max_abs().max(1e-9);
    let dt_bound = 0.4 * lab.grid.h / speed;
    let k = (save_interval / dt_bound).ceil().max(1.0) as usize;
    let dt_e = save_interval / k as f64;
    solve_euler(&omega0, &lab.solver, cfg.sim.t_end, dt_e, k)
}

pub fn run_inviscid_sweep(cfg: &HarnessConfig) -> Result<(SweepReport, RunManifest)> {
    cfg.validate()?;
    let lab = Lab::build(cfg.grid.n, cfg.basis.stokes_modes)?;
    let noise = build_noise_model(
        cfg.noise.kind,
        cfg.noise.modes,
        1.0, // per-alpha nu_tilde set in SimConfig
        &lab.grid,
        Some(&lab.stokes),
    )?;
    let psi_bar = reference_stream(cfg.sweep.initial, &lab.grid);
    let u_bar = perp_grad(&psi_bar);
    let euler = euler_reference(cfg, &lab, &u_bar)?;

    let mut table = ResultTable::default();
    let mut manifest = RunManifest::new("sweep", cfg);
    for (i, &alpha) in cfg.sweep.alphas.iter().enumerate() {
        let out = run_alpha(
            cfg,
            &lab,
            &euler,
            &psi_bar,
            &u_bar,
            &noise,
            i,
            alpha,
            cfg.sim.save_stride,
            cfg.sweep.paths,
        )?;
        manifest
            .path_counts
            .push((alpha, out.row.paths_used, out.row.blowups));
        table.rows.push(out.row);
    }

    // stride sensitivity: first alpha, a few paths, stride halved
    let probe_paths = cfg.sweep.paths.min(4);
    let coarse = run_alpha(
        cfg,
        &lab,
        &euler,
        &psi_bar,
        &u_bar,
        &noise,
        0,
        cfg.sweep.alphas[0],
        cfg.sim.save_stride,
        probe_paths,
    )?;
    let fine = run_alpha(
        cfg,
        &lab,
        &euler,
        &psi_bar,
        &u_bar,
        &noise,
        0,
        cfg.sweep.alphas[0],
        (cfg.sim.save_stride / 2).max(1),
        probe_paths,
    )?;
    let stride_sensitivity = (fine.row.sup_diff_mean - coarse.row.sup_diff_mean).abs()
        / coarse.row.sup_diff_mean.abs().max(1e-300);

    let diff_decreasing_2se = table.rows.windows(2).all(|w| {
        w[1].sup_diff_mean < w[0].sup_diff_mean
            && (w[0].sup_diff_mean - w[1].sup_diff_mean)
                >= 2.0 * (w[0].sup_diff_se + w[1].sup_diff_se)
    });
    let last_over_first = table.rows.last().map(|r| r.sup_diff_mean).unwrap_or(f64::NAN)
        / table.rows.first().map(|r| r.sup_diff_mean).unwrap_or(f64::NAN);
    let h1_decreasing = table
        .rows
        .windows(2)
        .all(|w| w[1].h1_scaled_mean < w[0].h1_scaled_mean);
    let h3s: Vec<f64> = table.rows.iter().map(|r| r.h3_scaled_mean).collect();
    let h3_max = h3s.iter().cloned().fold(f64::MIN, f64::max);
    let h3_min = h3s.iter().cloned().fold(f64::MAX, f64::min);
    let h3_within_factor_10 = h3_min > 0.0 && h3_max / h3_min <= 10.0;

    Ok((
        SweepReport {
            table,
            diff_decreasing_2se,
            last_over_first,
            h1_decreasing,
            h3_within_factor_10,
            stride_sensitivity,
            save_stride: cfg.sim.save_stride,
        },
        manifest,
    ))
}

/// Initial-family scaling gates on the layer-resolving grid.
pub fn run_initial_scaling_gates(cfg: &HarnessConfig) -> Result<InitialScalingTable> {
    let grid = Grid::unit_square(cfg.sweep.scaling_grid)?;
    let psi_bar = reference_stream(cfg.sweep.initial, &grid);
    let u_bar = perp_grad(&psi_bar);
    match cfg.sweep.family {
        FamilyKind::Cutoff => Ok(verify_family_scalings(
            &u_bar,
            &cfg.sweep.alphas,
            |alpha| initial_family_cutoff(&psi_bar, alpha, cfg.sweep.osc_amp),
        )),
        FamilyKind::Resolvent => {
            let solver = StokesSolver::new(&grid)?;
            Ok(verify_family_scalings(&u_bar, &cfg.sweep.alphas, |alpha| {
                make_initial_family(&u_bar, alpha, &solver)
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Energy experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub midpoint_max_rel_residual: f64,
    pub midpoint_tolerance: f64,
    pub midpoint_pass: bool,
    pub em_residual_coarse: f64,
    pub em_residual_fine: f64,
    pub em_shrink_factor: f64,
    pub em_shrink_required: f64,
    pub em_pass: bool,
    pub inviscid_max_rel_drift: f64,
    pub inviscid_pass: bool,
    /// Mean over the ensemble of sup_t ||u||_W relative to its initial value.
    pub w_growth_factor: f64,
}

pub fn run_energy_experiment(cfg: &HarnessConfig) -> Result<(EnergyReport, String)> {
    let lab = Lab::build(cfg.grid.n, cfg.basis.stokes_modes)?;
    let alpha = cfg.sim.alpha;
    let noise = build_noise_model(cfg.noise.kind, cfg.noise.modes, 1.0, &lab.grid, Some(&lab.stokes))?;
    let basis = w_basis(&lab.stokes, cfg.basis.w_modes, alpha)?;
    let mut sim = SimConfig {
        alpha,
        nu: cfg.nu_at(alpha),
        nu_tilde: cfg.nu_tilde_at(alpha),
        n_modes: cfg.basis.w_modes,
        dt: cfg.sim.dt,
        t_end: cfg.sim.t_end,
        scheme: Scheme::MidpointStrat,
        seed: cfg.seed,
        save_stride: cfg.sim.save_stride,
        nonlinearity: true,
        check_structure: false,
    };
    let sys = GalerkinSystem::build(&basis, &noise, &lab.solver, &sim)?;
    let psi_bar = reference_stream(cfg.sweep.initial, &lab.grid);
    let u_bar = perp_grad(&psi_bar);
    let u0 = initial_field(cfg, &psi_bar, &u_bar, alpha, &lab.solver)?;
    let init = project_initial(&u0, &basis, &lab.stokes)?;
    let paths = cfg.energy.paths;

    // midpoint pathwise residual
    let mid: Vec<Trajectory> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let path = BrownianPath::new(cfg.seed, p as u64, noise.modes(), sim.dt);
            simulate_path(&sys, &sim, &init, &path)
        })
        .collect::<Result<_>>()?;
    let v0 = mid[0].samples[0].norm_v_sq;
    let mut midpoint_max = 0.0f64;
    let mut w_growth: f64 = 0.0;
    for t in &mid {
        let last = t.samples.last().unwrap();
        midpoint_max = midpoint_max.max(last.energy_residual.abs() / v0);
        let w0 = (t.samples[0].norm_v_sq + t.samples[0].norm_star_sq).sqrt();
        let sup_w = t
            .samples
            .iter()
            .map(|s| (s.norm_v_sq + s.norm_star_sq).sqrt())
            .fold(0.0f64, f64::max);
        w_growth += sup_w / w0.max(1e-300);
    }
    w_growth /= paths as f64;

    // em residual at dt and dt/2, same Brownian motion
    sim.scheme = Scheme::EmIto;
    let run_em = |dt: f64, subdiv: usize| -> Result<f64> {
        let mut c = sim.clone();
        c.dt = dt;
        let sysr = &sys;
        let trajs: Vec<Trajectory> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let path = BrownianPath::refined(cfg.seed, p as u64, noise.modes(), dt, subdiv);
                simulate_path(sysr, &c, &init, &path)
            })
            .collect::<Result<_>>()?;
        let mut acc = 0.0;
        for t in &trajs {
            acc += t.samples.last().unwrap().energy_residual.abs();
        }
        Ok(acc / paths as f64)
    };
    let em_coarse = run_em(sim.dt, 2)?;
    let em_fine = run_em(sim.dt / 2.0, 1)?;
    let shrink = em_coarse / em_fine.max(1e-300);

    // inviscid lane: nu = 0, conservation under the midpoint scheme
    let mut inv = sim.clone();
    inv.scheme = Scheme::MidpointStrat;
    inv.nu = 0.0;
    let sys_inv = GalerkinSystem::build(&basis, &noise, &lab.solver, &inv)?;
    let mut inviscid_max = 0.0f64;
    for p in 0..paths.min(4) {
        let path = BrownianPath::new(cfg.seed, p as u64, noise.modes(), inv.dt);
        let t = simulate_path(&sys_inv, &inv, &init, &path)?;
        let first = t.samples[0].norm_v_sq;
        for s in &t.samples {
            inviscid_max = inviscid_max.max((s.norm_v_sq - first).abs() / first);
        }
    }

    // residual time series of the first midpoint path
    let mut buf = Vec::new();
    mid[0].write_csv(&mut buf)?;
    let csv = String::from_utf8(buf).expect("csv is utf-8");

    let report = EnergyReport {
        midpoint_max_rel_residual: midpoint_max,
        midpoint_tolerance: cfg.energy.midpoint_tolerance,
        midpoint_pass: midpoint_max <= cfg.energy.midpoint_tolerance,
        em_residual_coarse: em_coarse,
        em_residual_fine: em_fine,
        em_shrink_factor: shrink,
        em_shrink_required: cfg.energy.em_shrink_factor,
        em_pass: shrink >= cfg.energy.em_shrink_factor,
        inviscid_max_rel_drift: inviscid_max,
        inviscid_pass: inviscid_max <= 1e-8,
        w_growth_factor: w_growth,
    };
    Ok((report, csv))
}

// ---------------------------------------------------------------------------
// Boundary-layer corrector diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorRow {
    pub delta: f64,
    pub v_norm: f64,
    pub grad_v_norm: f64,
    /// `alpha^2 / delta` with the sweep convention delta(alpha) = alpha.
    pub alpha_sq_over_delta: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorReport {
    pub rows: Vec<CorrectorRow>,
    pub v_slope: f64,
    pub grad_slope: f64,
    pub v_in_window: bool,
    pub grad_in_window: bool,
    pub linearity_gap: f64,
}

pub fn run_corrector_diagnostics(cfg: &HarnessConfig) -> Result<CorrectorReport> {
    let grid = Grid::unit_square(cfg.corrector.grid_n)?;
    let psi = reference_corrector_stream(&grid);
    let mut rows = Vec::new();
    let mut ln_d = Vec::new();
    let mut ln_v = Vec::new();
    let mut ln_g = Vec::new();
    let mut deltas = cfg.corrector.deltas.clone();
    deltas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for &delta in &deltas {
        match crate::operators::kato_corrector_from_stream(&psi, delta) {
            Ok(c) => {
                let vn = crate::grid::vec_norm(&c.v);
                let gn = crate::grid::grad_norm_sq(&c.v).sqrt();
                rows.push(CorrectorRow {
                    delta,
                    v_norm: vn,
                    grad_v_norm: gn,
                    alpha_sq_over_delta: delta,
                    skipped: false,
                });
                ln_d.push(delta.ln());
                ln_v.push(vn.ln());
                ln_g.push(gn.ln());
            }
            Err(SgfError::LayerUnderResolved { .. }) => {
                rows.push(CorrectorRow {
                    delta,
                    v_norm: f64::NAN,
                    grad_v_norm: f64::NAN,
                    alpha_sq_over_delta: delta,
                    skipped: true,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let slope = |xs: &[f64], ys: &[f64]| {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        num / den
    };
    let v_slope = slope(&ln_d, &ln_v);
    let grad_slope = slope(&ln_d, &ln_g);
    // linearity: doubling the data doubles the corrector exactly
    let probe_delta = deltas.iter().cloned().find(|d| *d >= 4.0 * grid.h).unwrap_or(0.2);
    let c1 = crate::operators::kato_corrector_from_stream(&psi, probe_delta)?;
    let mut psi2 = psi.clone();
    psi2.scale(2.0);
    let c2 = crate::operators::kato_corrector_from_stream(&psi2, probe_delta)?;
    let linearity_gap = (crate::grid::vec_norm(&c2.v) - 2.0 * crate::grid::vec_norm(&c1.v)).abs();
    let (vl, vh) = cfg.corrector.v_slope_window;
    let (gl, gh) = cfg.corrector.grad_slope_window;
    Ok(CorrectorReport {
        rows,
        v_slope,
        grad_slope,
        v_in_window: v_slope >= vl && v_slope <= vh,
        grad_in_window: grad_slope >= gl && grad_slope <= gh,
        linearity_gap,
    })
}

// ---------------------------------------------------------------------------
// Additive-noise experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdditiveReport {
    pub equivalence_base: f64,
    pub equivalence_refined: f64,
    pub equivalence_tolerance: f64,
    pub equivalence_pass: bool,
    pub refinement_factor: f64,
    pub refinement_required: f64,
    pub refinement_pass: bool,
    pub vorticity_bins: usize,
    pub vorticity_fraction_within_3: f64,
    pub vorticity_pass: bool,
    /// z-score of the terminal mean V-energy against the Ito production.
    pub mean_energy_z: f64,
    pub mean_energy_pass: bool,
}

fn additive_level(
    cfg: &HarnessConfig,
    n_grid: usize,
    stokes_m: usize,
    w_n: usize,
    dt: f64,
) -> Result<f64> {
    let lab = Lab::build(n_grid, stokes_m)?;
    let a = &cfg.additive;
    let noise_raw = build_noise_model(
        cfg.noise.kind,
        cfg.noise.modes,
        a.nu_tilde,
        &lab.grid,
        Some(&lab.stokes),
    )?;
    let noise = AdditiveNoiseModel::from_noise(&noise_raw);
    let basis = w_basis(&lab.stokes, w_n, a.alpha)?;
    let sim = SimConfig {
        alpha: a.alpha,
        nu: a.nu,
        nu_tilde: a.nu_tilde,
        n_modes: w_n,
        dt,
        t_end: a.t_end,
        scheme: Scheme::EmIto,
        seed: cfg.seed,
        save_stride: (a.save_stride as f64 * (cfg.additive.dt / dt)).round() as usize,
        nonlinearity: true,
        check_structure: false,
    };
    let asys = AdditiveSystem::build(&basis, &noise, &lab.solver, &sim)?;
    let mut c0 = vec![0.0; w_n];
    let amps = [0.6, -0.4, 0.3, 0.2, -0.15, 0.1];
    for (i, a0) in amps.iter().enumerate() {
        c0[i] = *a0;
    }
    let init = GalerkinState { t: 0.0, c: c0 };
    let path = BrownianPath::new(cfg.seed, 0, noise.modes(), dt);
    let rep = check_equivalence(&sim, &init, &asys, &basis, &noise, &lab.solver, &path)?;
    Ok(rep.max_rel_discrepancy)
}

pub fn run_additive_experiment(cfg: &HarnessConfig) -> Result<AdditiveReport> {
    let a = &cfg.additive;
    // base and jointly refined levels share the Brownian motion seed
    let base = additive_level(cfg, a.grid_n, a.stokes_modes, a.w_modes, a.dt)?;
    let refined = additive_level(
        cfg,
        2 * (a.grid_n - 1) + 1,
        a.stokes_modes + 12,
        a.w_modes + 8,
        a.dt / 2.0,
    )?;

    // vorticity energy law at the base resolution
    let lab = Lab::build(a.grid_n, a.stokes_modes)?;
    let noise_raw = build_noise_model(
        cfg.noise.kind,
        cfg.noise.modes,
        a.nu_tilde,
        &lab.grid,
        Some(&lab.stokes),
    )?;
    let noise = AdditiveNoiseModel::from_noise(&noise_raw);
    let basis = w_basis(&lab.stokes, a.w_modes, a.alpha)?;
    let mut c0 = vec![0.0; a.w_modes];
    let amps = [0.6, -0.4, 0.3, 0.2, -0.15, 0.1];
    for (i, a0) in amps.iter().enumerate() {
        c0[i] = *a0;
    }
    let u0 = basis.combine(&c0);
    let q0 = crate::stokes::curl_v(&u0, a.alpha);
    let vcfg = VorticityConfig {
        alpha: a.alpha,
        nu: a.nu,
        nu_tilde: a.nu_tilde,
        dt: 1e-3,
        t_end: 0.3,
        save_stride: 30,
        transport_off: false,
    };
    let vrep =
        check_vorticity_energy_law(&vcfg, &q0, &noise, &lab.solver, cfg.seed ^ 0xadd1, a.energy_paths)?;

    // mean V-energy law of the velocity formulation
    let sim = SimConfig {
        alpha: a.alpha,
        nu: a.nu,
        nu_tilde: a.nu_tilde,
        n_modes: a.w_modes,
        dt: a.dt,
        t_end: a.t_end,
        scheme: Scheme::EmIto,
        seed: cfg.seed,
        save_stride: a.save_stride,
        nonlinearity: true,
        check_structure: false,
    };
    let asys = AdditiveSystem::build(&basis, &noise, &lab.solver, &sim)?;
    let init = GalerkinState { t: 0.0, c: c0.clone() };
    let m = a.energy_paths;
    // the recorded residual already closes the truncated law:
    // residual(T) = V^2(T) + 2 nu int - V^2(0) - T nu_t sum_i lambda_i <sigma,e_i>^2
    let devs: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|p| {
            let path = BrownianPath::new(cfg.seed ^ 0x5eed, p as u64, noise.modes(), sim.dt);
            let t = crate::additive::simulate_velocity_additive(&asys, &sim, &init, &path)?;
            Ok(t.samples.last().unwrap().energy_residual)
        })
        .collect::<Result<_>>()?;
    let (mean, se) = mean_se(&devs);
    // continuum production for the report: t nu_t sum <sigma_k, R sigma_k>
    let mut production = 0.0;
    for s in &noise.sigma {
        let r = lab.solver.resolvent_solve(s, a.alpha)?;
        production += crate::grid::vec_inner(&r, s)?;
    }
    production *= a.nu_tilde * a.t_end;
    let trunc = asys.v_energy_production() * a.t_end;
    let bias = trunc - production;
    let z = (mean + bias) / se.max(1e-300);

    Ok(AdditiveReport {
        equivalence_base: base,
        equivalence_refined: refined,
        equivalence_tolerance: a.equivalence_tolerance,
        equivalence_pass: base <= a.equivalence_tolerance,
        refinement_factor: base / refined.max(1e-300),
        refinement_required: a.refinement_factor,
        refinement_pass: base / refined.max(1e-300) >= a.refinement_factor,
        vorticity_bins: vrep.bins,
        vorticity_fraction_within_3: vrep.fraction_within_3,
        vorticity_pass: vrep.fraction_within_3 >= 0.95,
        mean_energy_z: z,
        mean_energy_pass: z.abs() <= 3.0,
    })
}

/// Single-path simulation for the CLI.
pub fn run_single_path(cfg: &HarnessConfig, path_id: u64) -> Result<(Trajectory, SimConfig)> {
    let lab = Lab::build(cfg.grid.n, cfg.basis.stokes_modes)?;
    let alpha = cfg.sim.alpha;
    let noise = build_noise_model(cfg.noise.kind, cfg.noise.modes, 1.0, &lab.grid, Some(&lab.stokes))?;
    let basis = w_basis(&lab.stokes, cfg.basis.w_modes, alpha)?;
    let sim = SimConfig {
        alpha,
        nu: cfg.nu_at(alpha),
        nu_tilde: cfg.nu_tilde_at(alpha),
        n_modes: cfg.basis.w_modes,
        dt: cfg.sim.dt,
        t_end: cfg.sim.t_end,
        scheme: cfg.sim.scheme,
        seed: cfg.seed,
        save_stride: cfg.sim.save_stride,
        nonlinearity: true,
        check_structure: true,
    };
    let sys = GalerkinSystem::build(&basis, &noise, &lab.solver, &sim)?;
    let psi_bar = reference_stream(cfg.sweep.initial, &lab.grid);
    let u_bar = perp_grad(&psi_bar);
    let u0 = initial_field(cfg, &psi_bar, &u_bar, alpha, &lab.solver)?;
    let init = project_initial(&u0, &basis, &lab.stokes)?;
    let path = BrownianPath::new(cfg.seed, path_id, noise.modes(), sim.dt);
    let traj = simulate_path(&sys, &sim, &init, &path)?;
    Ok((traj, sim))
}
