use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sgf_core::config::HarnessConfig;
use sgf_core::experiments::{
    run_additive_experiment, run_corrector_diagnostics, run_energy_experiment,
    run_initial_scaling_gates, run_inviscid_sweep, run_single_path, Lab,
};
use sgf_core::manifest::emit_results;
use sgf_core::operators::build_noise_model;
use sgf_core::suite::run_invariant_suite;

/// Numerical laboratory for 2D stochastic second-grade fluids.
#[derive(Parser)]
#[command(name = "sgf", version, about)]
struct Cli {
    /// Configuration file (TOML, key = value sections per subsystem).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for tables and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or refresh) the eigenbasis cache for the configured grid.
    Eig,
    /// Run the operator invariant suite and write a JSON report.
    Check {
        /// Negative control: disable the skew symmetrization.
        #[arg(long)]
        sabotage: bool,
    },
    /// Simulate a single path and write its trajectory CSV.
    Simulate {
        #[arg(long, default_value_t = 0)]
        path_id: u64,
    },
    /// Inviscid-limit sweep against the Euler reference.
    Sweep,
    /// Pathwise energy-identity experiment.
    Energy,
    /// Boundary-layer corrector scaling diagnostics.
    Corrector,
    /// Additive-noise equivalence and energy-law checks.
    Additive,
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(path) => HarnessConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => HarnessConfig::defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Eig => {
            let lab = Lab::build(cfg.grid.n, cfg.basis.stokes_modes)?;
            let dest = match std::env::var_os("SGF_CACHE_DIR") {
                Some(_) => "cache directory (SGF_CACHE_DIR)".to_string(),
                None => {
                    let p = cli.out.join(format!(
                        "stokes_{0}x{0}_m{1}.sgb",
                        cfg.grid.n, cfg.basis.stokes_modes
                    ));
                    lab.stokes.save(&p)?;
                    p.display().to_string()
                }
            };
            println!(
                "eigenbasis ready: {} modes on {}^2, lambda_1 = {:.6}, cached in {}",
                lab.stokes.len(),
                cfg.grid.n,
                lab.stokes.lambdas[0],
                dest
            );
        }
        Command::Check { sabotage } => {
            let lab = Lab::build(cfg.grid.n, cfg.basis.stokes_modes)?;
            let noise = build_noise_model(
                cfg.noise.kind,
                cfg.noise.modes,
                1.0,
                &lab.grid,
                Some(&lab.stokes),
            )?;
            let report = run_invariant_suite(&lab.solver, &lab.stokes, &noise, *sabotage)?;
            let path = cli.out.join("check_report.json");
            std::fs::write(&path, report.to_json())?;
            for c in &report.checks {
                println!(
                    "[{}] {}  measured {:.3e}  threshold {:.3e}",
                    if c.pass { "pass" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.threshold
                );
            }
            println!("report written to {}", path.display());
            if !report.all_pass {
                std::process::exit(1);
            }
        }
        Command::Simulate { path_id } => {
            let (traj, sim) = run_single_path(&cfg, *path_id)?;
            let path = cli.out.join(format!("trajectory_path{path_id}.csv"));
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            std::fs::write(&path, buf)?;
            println!(
                "simulated {} steps (scheme {}, alpha {}), blew_up = {}, wrote {}",
                traj.steps_completed,
                sim.scheme.name(),
                sim.alpha,
                traj.blew_up,
                path.display()
            );
        }
        Command::Sweep => {
            let (report, mut manifest) = run_inviscid_sweep(&cfg)?;
            let gates = run_initial_scaling_gates(&cfg)?;
            let extras = vec![
                ("report", serde_json::to_string_pretty(&report)?),
                ("initial_scalings", serde_json::to_string_pretty(&gates)?),
            ];
            let files = emit_results(&report.table, &mut manifest, &extras, &cli.out)?;
            for r in &report.table.rows {
                println!(
                    "alpha {:>6}: E[sup diff^2] = {:.4e} +- {:.1e}  (paths {}, blowups {})",
                    r.alpha, r.sup_diff_mean, r.sup_diff_se, r.paths_used, r.blowups
                );
            }
            println!(
                "decreasing(2se) = {}, last/first = {:.3}, h1 decreasing = {}, h3 within x10 = {}",
                report.diff_decreasing_2se,
                report.last_over_first,
                report.h1_decreasing,
                report.h3_within_factor_10
            );
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Energy => {
            let (report, series) = run_energy_experiment(&cfg)?;
            std::fs::write(cli.out.join("energy_residual_series.csv"), series)?;
            std::fs::write(
                cli.out.join("energy_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "midpoint max |R|/V0 = {:.3e} (tol {:.1e}, pass {})",
                report.midpoint_max_rel_residual, report.midpoint_tolerance, report.midpoint_pass
            );
            println!(
                "em residual {:.3e} -> {:.3e} under dt/2 (factor {:.2}, pass {})",
                report.em_residual_coarse,
                report.em_residual_fine,
                report.em_shrink_factor,
                report.em_pass
            );
            println!(
                "inviscid drift {:.3e} (pass {}), W-growth factor {:.2}",
                report.inviscid_max_rel_drift, report.inviscid_pass, report.w_growth_factor
            );
        }
        Command::Corrector => {
            let report = run_corrector_diagnostics(&cfg)?;
            std::fs::write(
                cli.out.join("corrector_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            for r in &report.rows {
                if r.skipped {
                    println!("delta {:>6}: skipped (under-resolved layer)", r.delta);
                } else {
                    println!(
                        "delta {:>6}: ||v|| = {:.4e}  ||grad v|| = {:.4e}  alpha^2/delta = {}",
                        r.delta, r.v_norm, r.grad_v_norm, r.alpha_sq_over_delta
                    );
                }
            }
            println!(
                "slopes: ||v|| {:.3} (window pass {}), ||grad v|| {:.3} (window pass {})",
                report.v_slope, report.v_in_window, report.grad_slope, report.grad_in_window
            );
        }
        Command::Additive => {
            let report = run_additive_experiment(&cfg)?;
            std::fs::write(
                cli.out.join("additive_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "equivalence: base {:.3e} (tol {:.1e}, pass {}), refined {:.3e} (factor {:.2}, pass {})",
                report.equivalence_base,
                report.equivalence_tolerance,
                report.equivalence_pass,
                report.equivalence_refined,
                report.refinement_factor,
                report.refinement_pass
            );
            println!(
                "vorticity law: {}/{} bins within 3 SE (pass {}); mean energy z = {:.2} (pass {})",
                (report.vorticity_fraction_within_3 * report.vorticity_bins as f64).round(),
                report.vorticity_bins,
                report.vorticity_pass,
                report.mean_energy_z,
                report.mean_energy_pass
            );
        }
    }
    Ok(())
}
