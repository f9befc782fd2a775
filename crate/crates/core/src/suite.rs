//! Invariant suite: every assertable operator property executed against a
//! live lab, each with its measured margin, emitted as a JSON report. The
//! sabotage switch replaces the skew trilinear form by the raw quadrature to
//! prove the checks have teeth.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{
    divergence, grad, grad_norm_sq, interior_max_abs, perp_grad, vec_inner, BcTag, ScalarField,
    VecKind, VectorField,
};
use crate::operators::{
    b_hat_general, ito_corrector_f, kato_corrector_from_stream, reference_corrector_stream,
    trilinear_b, trilinear_q,
};
use crate::scalar::sq;
use crate::stokes::{norm_h, w_basis, StokesSolver, TOL_EIG};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check(name: &str, measured: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

fn rng(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
}

/// Execute the operator invariants on the given lab; `sabotage` swaps the
/// skew trilinear form for the raw quadrature (negative control).
pub fn run_invariant_suite(
    solver: &StokesSolver<f64>,
    stokes: &crate::stokes::StokesEigenbasis<f64>,
    noise: &crate::operators::NoiseModel<f64>,
    sabotage: bool,
) -> Result<SuiteReport> {
    let g = solver.grid.clone();
    let h = g.h;
    let mut checks = Vec::new();
    let mut state = 0x5eed_cafe_u64;
    let m = stokes.len();

    // --- resolvent operator bounds over random spectral fields -------------
    for &alpha in &[0.025, 0.1, 0.4] {
        let mut worst_h = f64::NEG_INFINITY;
        let mut worst_v = f64::NEG_INFINITY;
        let mut worst_a = f64::NEG_INFINITY;
        for _ in 0..200 {
            let a: Vec<f64> = (0..m).map(|_| rng(&mut state)).collect();
            let hn_sq: f64 = {
                let f = stokes.combine(&a);
                vec_inner(&f, &f)?
            };
            let mut rn_sq = 0.0;
            let mut vn_sq = 0.0;
            let mut an_sq = 0.0;
            // diagonal representation; the grid Gram is orthonormal to 1e-12
            for (ai, li) in a.iter().zip(&stokes.lambdas) {
                let r = ai / (1.0 + alpha * alpha * li);
                rn_sq += r * r;
                vn_sq += li * r * r;
                an_sq += li * li * r * r;
            }
            worst_h = worst_h.max(rn_sq.sqrt() - hn_sq.sqrt());
            worst_v = worst_v.max(vn_sq.sqrt() - hn_sq.sqrt() / (2.0 * alpha));
            worst_a = worst_a.max(an_sq.sqrt() - hn_sq.sqrt() / (alpha * alpha));
        }
        checks.push(check(
            &format!("resolvent_contraction_alpha_{alpha}"),
            worst_h,
            1e-10,
            "||R h|| - ||h|| over 200 spectral fields".into(),
        ));
        checks.push(check(
            &format!("resolvent_half_power_alpha_{alpha}"),
            worst_v,
            1e-10,
            "||(-A)^(1/2) R h|| - ||h||/(2 alpha)".into(),
        ));
        checks.push(check(
            &format!("resolvent_full_power_alpha_{alpha}"),
            worst_a,
            1e-10,
            "||A R h|| - ||h||/alpha^2".into(),
        ));
    }

    // --- resolvent positivity ----------------------------------------------
    {
        let mut worst = f64::INFINITY;
        for t in 0..20 {
            let f = VectorField::from_fn(&g, VecKind::Free, |x, y| {
                ((2.0 * x + t as f64).sin(), (3.0 * y - t as f64).cos())
            });
            let r = solver.resolvent_solve(&f, 0.2)?;
            worst = worst.min(vec_inner(&r, &f)?);
        }
        checks.push(check(
            "resolvent_positivity",
            -worst,
            1e-12,
            "-min <R f, f> over random fields".into(),
        ));
    }

    // --- Leray projection ---------------------------------------------------
    {
        let p = ScalarField::from_fn(&g, BcTag::Free, |x, y| (2.0 * x).cos() * (1.5 * y).sin());
        let gp = solver.leray_project(&grad(&p))?;
        checks.push(check(
            "leray_annihilates_gradients",
            norm_h(&gp),
            1e-10,
            "||P grad p||".into(),
        ));
        let psi = ScalarField::from_fn(&g, BcTag::Dirichlet, |x, y| {
            let pi = std::f64::consts::PI;
            (pi * x).sin() * (2.0 * pi * y).sin()
        });
        let f = perp_grad(&psi);
        let pf = solver.leray_project(&f)?;
        let mut d = pf.clone();
        d.axpy(-1.0, &f);
        checks.push(check(
            "leray_fixed_point",
            norm_h(&d) / norm_h(&f),
            1e-10,
            "||P f - f|| / ||f|| on a divergence-free slip field".into(),
        ));
        let ppf = solver.leray_project(&pf)?;
        let mut d2 = ppf.clone();
        d2.axpy(-1.0, &pf);
        checks.push(check(
            "leray_idempotent",
            norm_h(&d2) / norm_h(&pf),
            1e-10,
            "||P P f - P f|| / ||P f||".into(),
        ));
        // orthogonality: quadrature-level, O(h^2) wall closure residue
        let q = VectorField::from_fn(&g, VecKind::Free, |x, y| ((x * y).cos(), (x - y).sin()));
        let pq = solver.leray_project(&q)?;
        let mut fm = f.clone();
        fm.axpy(-1.0, &pf);
        let ortho = vec_inner(&fm, &pq)?.abs();
        checks.push(check(
            "leray_orthogonality_consistency",
            ortho,
            20.0 * h * h * norm_h(&fm).max(1.0) * norm_h(&pq).max(1.0),
            "<f - Pf, Pg>, closure-level threshold 20 h^2".into(),
        ));
    }

    // --- Stokes basis --------------------------------------------------------
    {
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..=i {
                let gram = vec_inner(&stokes.fields[i], &stokes.fields[j])?;
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram - target).abs());
            }
        }
        checks.push(check("stokes_gram_orthonormal", worst, 1e-10, "max |G - I|".into()));
        let worst_res = stokes.residuals.iter().cloned().fold(0.0f64, f64::max);
        checks.push(check(
            "stokes_pencil_residual",
            worst_res,
            TOL_EIG,
            "max relative pencil residual".into(),
        ));
        let sorted = stokes.lambdas.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
        checks.push(CheckResult {
            name: "stokes_eigenvalues_sorted_positive".into(),
            pass: sorted && stokes.lambdas[0] > 0.0,
            measured: stokes.lambdas[0],
            threshold: 0.0,
            detail: "ascending, strictly positive".into(),
        });
        // strong-composition consistency residue, reported at its O(h^2) level
        let lam = stokes.lambdas[0];
        let e0 = &stokes.fields[0];
        let lap = crate::grid::laplacian_vec(e0);
        let mut res = solver.leray_project(&lap)?;
        res.axpy(lam, e0);
        checks.push(check(
            "stokes_strong_composition_residual",
            norm_h(&res) / lam,
            30.0 * h * h,
            "||P lap e_1 + lambda_1 e_1|| / lambda_1, consistency-level threshold".into(),
        ));
    }

    // --- W-basis -------------------------------------------------------------
    {
        let alpha = 0.2;
        let n_w = (m.saturating_sub(4)).min(8);
        let wb = w_basis(stokes, n_w, alpha)?;
        let min_l = wb.lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
        checks.push(CheckResult {
            name: "w_basis_norm_domination".into(),
            pass: min_l >= 1.0 - 1e-9,
            measured: min_l,
            threshold: 1.0,
            detail: "lambda_i >= 1 since the W-norm dominates the V-norm".into(),
        });
        let mut worst = 0.0f64;
        for i in 0..n_w {
            for j in 0..=i {
                let mut w = 0.0;
                for r in 0..m {
                    let lt = stokes.lambdas[r];
                    let kv = 1.0 + alpha * alpha * lt;
                    w += wb.coeffs[i][r] * wb.coeffs[j][r] * (kv + kv * kv * lt);
                }
                let t = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((w - t).abs());
            }
        }
        checks.push(check("w_basis_w_orthonormal", worst, 1e-8, "max |G_W - I|".into()));
    }

    // --- trilinear structure -------------------------------------------------
    {
        let b_form = |f: &VectorField<f64>, u: &VectorField<f64>, w: &VectorField<f64>| {
            if sabotage {
                trilinear_q(f, u, w)
            } else {
                trilinear_b(f, u, w)
            }
        };
        let mk = |s: &mut u64, k: u64| {
            let mut psi = ScalarField::zeros(&g, BcTag::Clamped);
            for iy in 0..g.ny {
                for ix in 0..g.nx {
                    let x = g.x(ix);
                    let y = g.y(iy);
                    let b = 16.0 * x * (1.0 - x) * y * (1.0 - y);
                    psi.values[g.idx(ix, iy)] = b
                        * b
                        * ((1.0 + k as f64) * x + rng(s)).sin()
                        * (2.0 * y - k as f64).cos();
                }
            }
            perp_grad(&psi)
        };
        let f = mk(&mut state, 1);
        let u = mk(&mut state, 2);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            worst = worst.max(b_form(&f, &u, &u)?.abs());
        }
        checks.push(check(
            "trilinear_energy_null",
            worst,
            1e-13,
            "b(f, g, g) over random pairs (exact-zero carrier)".into(),
        ));
        let w = mk(&mut state, 3);
        let anti = (b_hat_general(&u, &f, &w, 0.2)? + b_hat_general(&u, &w, &f, 0.2)?).abs();
        checks.push(check(
            "b_hat_antisymmetry",
            anti,
            1e-10 * b_hat_general(&u, &f, &w, 0.2)?.abs().max(1.0),
            "<B(u,v),w> + <B(u,w),v>".into(),
        ));
    }

    // --- noise maps ----------------------------------------------------------
    if noise.modes() > 0 {
        let mut worst_g = 0.0f64;
        let mut worst_rg = 0.0f64;
        for t in 0..100 {
            let mut psi = ScalarField::zeros(&g, BcTag::Clamped);
            for iy in 0..g.ny {
                for ix in 0..g.nx {
                    let x = g.x(ix);
                    let y = g.y(iy);
                    let b = 16.0 * x * (1.0 - x) * y * (1.0 - y);
                    psi.values[g.idx(ix, iy)] =
                        b * b * ((t % 5) as f64 * x + rng(&mut state)).sin();
                }
            }
            let u = perp_grad(&psi);
            let k = t % noise.modes();
            let gu = crate::operators::g_k(&u, noise, solver, k)?;
            let bound = noise.sup_inf[k] * grad_norm_sq(&u).sqrt();
            worst_g = worst_g.max(norm_h(&gu) / bound.max(1e-300));
            if t < 10 {
                let r = solver.resolvent_solve(&gu, 0.2)?;
                worst_rg = worst_rg.max(norm_h(&r) / bound.max(1e-300));
            }
        }
        checks.push(check(
            "g_k_operator_bound",
            worst_g,
            1.0 + 2.0 * h,
            "||G_k u|| / (|sigma|_inf ||grad u||), slack 2h".into(),
        ));
        checks.push(check(
            "resolvent_g_k_bound",
            worst_rg,
            1.0 + 2.0 * h,
            "||R G_k u|| / (|sigma|_inf ||grad u||)".into(),
        ));
        // corrector bound
        let mut psi = ScalarField::zeros(&g, BcTag::Clamped);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let x = g.x(ix);
                let y = g.y(iy);
                let b = 16.0 * x * (1.0 - x) * y * (1.0 - y);
                psi.values[g.idx(ix, iy)] = b * b * (3.0 * x - y).sin();
            }
        }
        let u = perp_grad(&psi);
        let alpha = 0.25;
        let fu = ito_corrector_f(&u, noise, solver, alpha)?;
        let sum_sq: f64 = noise.sup_inf.iter().map(|v| v * v).sum();
        let fb = sum_sq * grad_norm_sq(&u).sqrt() / (2.0 * alpha);
        checks.push(check(
            "ito_corrector_bound",
            norm_h(&fu) / fb.max(1e-300),
            1.0 + 2.0 * h,
            "||F u|| / ((1/2a) sum |sigma|^2 ||grad u||)".into(),
        ));
        // noise model structural invariants
        let mut worst_div = 0.0f64;
        let mut worst_wall = 0.0f64;
        for s in &noise.sigma {
            worst_div = worst_div.max(interior_max_abs(&divergence(s)));
            worst_wall = worst_wall.max(s.boundary_max());
        }
        checks.push(check("noise_divergence_free", worst_div, 1e-10, "interior max |div sigma|".into()));
        checks.push(check("noise_no_slip", worst_wall, 0.0, "max wall |sigma|".into()));
    }

    // --- boundary-layer corrector ---------------------------------------------
    {
        let psi = reference_corrector_stream(&g);
        let delta = (0.2f64).max(6.0 * h);
        let c = kato_corrector_from_stream(&psi, delta)?;
        let u_bar = perp_grad(&psi);
        let mut d = u_bar.clone();
        d.axpy(-1.0, &c.v);
        checks.push(check(
            "corrector_wall_identity",
            d.boundary_max(),
            0.0,
            "max wall |u_bar - v| (bit-exact)".into(),
        ));
        let mut outside = 0.0f64;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                if g.boundary_distance(ix, iy) > delta {
                    let k = g.idx(ix, iy);
                    outside = outside.max(c.v.x.values[k].abs()).max(c.v.y.values[k].abs());
                }
            }
        }
        checks.push(check(
            "corrector_support",
            outside,
            0.0,
            "max |v| beyond the layer (exact)".into(),
        ));
        checks.push(check(
            "corrector_divergence_free",
            interior_max_abs(&divergence(&c.v)),
            1e-10,
            "interior max |div v|".into(),
        ));
    }

    // --- norm relations ---------------------------------------------------------
    {
        let alpha = 0.17;
        let u = &stokes.fields[1];
        let v2 = sq(crate::stokes::norm_v(u, alpha));
        let s2 = sq(crate::stokes::norm_star(u, alpha));
        let w2 = sq(crate::stokes::norm_w(u, alpha));
        checks.push(check(
            "norm_w_decomposition",
            (w2 - v2 - s2).abs(),
            1e-12 * w2.max(1.0),
            "||u||_W^2 = ||u||_V^2 + ||u||_*^2".into(),
        ));
        let lam1 = stokes.lambdas[0];
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..100 {
            let a: Vec<f64> = (0..m).map(|_| rng(&mut state)).collect();
            let f = stokes.combine(&a);
            let g2 = grad_norm_sq(&f);
            let h2 = vec_inner(&f, &f)?;
            worst = worst.max(h2 - g2 / lam1 - 1e-2 * g2);
        }
        checks.push(check(
            "poincare_consistency",
            worst,
            1e-10,
            "||f||^2 <= ||grad f||^2 / lambda_1 (1% consistency slack)".into(),
        ));
    }

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(SuiteReport { checks, all_pass })
}
