//! Harness configuration: one structured text file with a section per
//! subsystem, every knob overridable, defaults sized for desk-scale runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgfError};
use crate::galerkin::Scheme;
use crate::operators::NoiseKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    SharedPaths,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialData {
    /// Layered gyre (slip-carrying multi-mode stream).
    Gyre,
    /// Interior-concentrated vortex pair.
    VortexPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Mollified-cutoff family with the H^3-critical ripple.
    Cutoff,
    /// Resolvent filtering.
    Resolvent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n: 65 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSection {
    pub stokes_modes: usize,
    pub w_modes: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        BasisSection { stokes_modes: 32, w_modes: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub modes: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { kind: NoiseKind::Bumps, modes: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    pub alpha: f64,
    pub c_nu: f64,
    pub c_nu_tilde: f64,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub save_stride: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            alpha: 0.1,
            c_nu: 1.0,
            c_nu_tilde: 1.0,
            dt: 1e-3,
            t_end: 0.5,
            scheme: Scheme::EmIto,
            save_stride: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub paths: usize,
    pub coupling: Coupling,
    pub initial: InitialData,
    pub family: FamilyKind,
    pub osc_amp: f64,
    /// Grid for the initial-family scaling gates (layer-resolving).
    pub scaling_grid: usize,
    pub max_blowup_fraction: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            alphas: vec![0.2, 0.1, 0.05, 0.025],
            paths: 32,
            coupling: Coupling::SharedPaths,
            initial: InitialData::Gyre,
            family: FamilyKind::Cutoff,
            osc_amp: 70.0,
            scaling_grid: 161,
            max_blowup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergySection {
    pub paths: usize,
    pub midpoint_tolerance: f64,
    pub em_shrink_factor: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection { paths: 8, midpoint_tolerance: 1e-6, em_shrink_factor: 1.3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectorSection {
    pub grid_n: usize,
    /// Layer widths; under-resolved rows are skipped with a warning.
    pub deltas: Vec<f64>,
    pub v_slope_window: (f64, f64),
    pub grad_slope_window: (f64, f64),
}

impl Default for CorrectorSection {
    fn default() -> Self {
        CorrectorSection {
            grid_n: 129,
            deltas: vec![0.4, 0.2, 0.1, 0.05, 0.025],
            v_slope_window: (0.4, 0.6),
            grad_slope_window: (-0.6, -0.4),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdditiveSection {
    pub grid_n: usize,
    pub w_modes: usize,
    pub stokes_modes: usize,
    pub alpha: f64,
    pub nu: f64,
    pub nu_tilde: f64,
    pub dt: f64,
    pub t_end: f64,
    pub save_stride: usize,
    pub energy_paths: usize,
    pub equivalence_tolerance: f64,
    pub refinement_factor: f64,
}

impl Default for AdditiveSection {
    fn default() -> Self {
        AdditiveSection {
            grid_n: 65,
            w_modes: 24,
            stokes_modes: 28,
            alpha: 0.25,
            nu: 0.02,
            nu_tilde: 0.5,
            dt: 5e-4,
            t_end: 0.2,
            save_stride: 40,
            energy_paths: 64,
            equivalence_tolerance: 5e-2,
            refinement_factor: 1.5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub basis: BasisSection,
    pub noise: NoiseSection,
    pub sim: SimSection,
    pub sweep: SweepSection,
    pub energy: EnergySection,
    pub corrector: CorrectorSection,
    pub additive: AdditiveSection,
}

impl HarnessConfig {
    pub fn defaults() -> Self {
        let mut c = HarnessConfig::default();
        c.seed = 20240901;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: HarnessConfig =
            toml::from_str(text).map_err(|e| SgfError::Config(format!("config parse: {e}")))?;
        if cfg.seed == 0 {
            cfg.seed = Self::defaults().seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n < 9 {
            return Err(SgfError::Config("grid.n must be at least 9".into()));
        }
        if self.basis.w_modes + 4 > self.basis.stokes_modes {
            return Err(SgfError::Config(
                "basis.w_modes needs 4 modes of spectral headroom".into(),
            ));
        }
        let a = &self.sweep.alphas;
        if a.is_empty() || a.windows(2).any(|w| w[1] >= w[0]) || a.iter().any(|v| *v <= 0.0) {
            return Err(SgfError::Config(
                "sweep.alphas must be strictly decreasing and positive".into(),
            ));
        }
        if self.sweep.paths == 0 {
            return Err(SgfError::Config("sweep.paths must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-alpha scalings of the inviscid regime.
    pub fn nu_at(&self, alpha: f64) -> f64 {
        self.sim.c_nu * alpha * alpha
    }

    pub fn nu_tilde_at(&self, alpha: f64) -> f64 {
        self.sim.c_nu_tilde * alpha * alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let c = HarnessConfig::defaults();
        c.validate().unwrap();
        let text = c.to_toml();
        let back = HarnessConfig::from_toml(&text).unwrap();
        assert_eq!(back.sweep.alphas, c.sweep.alphas);
        assert_eq!(back.seed, c.seed);
    }

    #[test]
    fn section_overrides_parse() {
        let text = r#"
seed = 7
[grid]
n = 33
[sweep]
alphas = [0.1, 0.05]
paths = 4
coupling = "independent"
"#;
        let c = HarnessConfig::from_toml(text).unwrap();
        assert_eq!(c.grid.n, 33);
        assert_eq!(c.sweep.paths, 4);
        assert_eq!(c.sweep.coupling, Coupling::Independent);
        // untouched sections keep defaults
        assert_eq!(c.basis.stokes_modes, 32);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(HarnessConfig::from_toml("[grid]\nn = 4\n").is_err());
        assert!(HarnessConfig::from_toml("[sweep]\nalphas = [0.1, 0.2]\n").is_err());
        assert!(HarnessConfig::from_toml("[sweep]\npaths = 0\n").is_err());
    }
}
