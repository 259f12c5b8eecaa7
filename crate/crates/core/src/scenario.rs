//! Scenario files: the single declarative artifact a study runs from.
//!
//! TOML with a fixed schema; unknown keys are rejected at parse time, so a
//! typo cannot silently change a run. The parser owns all validation —
//! solvers never see raw text.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! family = "lq"
//! n = 1
//! d = 1
//! sigma = 0.4
//! sigma0 = 0.3
//! q = 0.25
//! f_cost = 1.0
//! rho = 0.5
//! g_cost = 0.5
//! mu0 = [0.6]
//! var0 = 0.25
//!
//! [grid]
//! t = 1.0          # or: r = 1.0, t_max = 8.0 for the discounted mode
//! steps = 100
//!
//! [ensemble]
//! paths = 64
//! particles = 256
//!
//! [study]          # optional: only the study commands read it
//! ns = [8, 16, 32, 64, 128]
//! trials = 32
//! chaos_k = 4
//!
//! [solver]         # optional: defaults shown
//! damping = 0.5
//! picard_tol = 1e-6
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::fbsde::{SolverConfig, TimeGrid};
use crate::linalg::Mat;
use crate::model::{GameSpec, Horizon};
use crate::riccati::LqParams;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub model: ModelBlock,
    pub grid: GridBlock,
    pub ensemble: EnsembleBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyBlock>,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub validate: ValidateBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// "lq" (fully numeric) or "constant_vol" (explicit structural
    /// constants only; solvable families beyond these are programmatic).
    pub family: String,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_one")]
    pub sigma: f64,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub q: f64,
    #[serde(default)]
    pub f_cost: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub g_cost: f64,
    #[serde(default)]
    pub mu0: Vec<f64>,
    #[serde(default = "default_one")]
    pub var0: f64,
    /// Explicit structural constants, overriding the ones derived from the
    /// numeric parameters (used by the condition checkers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConstantsBlock {
    pub c_l: f64,
    pub c_f: f64,
    pub c_g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub paths: usize,
    pub particles: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudyBlock {
    pub ns: Vec<usize>,
    pub trials: usize,
    #[serde(default = "default_chaos_k")]
    pub chaos_k: usize,
    #[serde(default = "default_moment_order")]
    pub moment_order: f64,
    /// Truncation-horizon ladder for the discounted study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max_ladder: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_max_iters")]
    pub picard_max_iters: usize,
    #[serde(default = "default_homotopy_step")]
    pub homotopy_step: f64,
    #[serde(default = "default_psi_max_iters")]
    pub psi_max_iters: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            damping: default_damping(),
            picard_tol: default_picard_tol(),
            picard_max_iters: default_picard_max_iters(),
            homotopy_step: default_homotopy_step(),
            psi_max_iters: default_psi_max_iters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    /// Relative tolerance for oracle comparisons.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Half-width of the acceptance band around slope −1 for the analytic
    /// feedback-gap study.
    #[serde(default = "default_slope_band")]
    pub slope_band: f64,
    /// Trial budget for the finite-player oracle comparison.
    #[serde(default = "default_validate_trials")]
    pub nplayer_trials: usize,
    /// Player counts for the finite-player oracle comparison.
    #[serde(default = "default_validate_ns")]
    pub nplayer_ns: Vec<usize>,
}

impl Default for ValidateBlock {
    fn default() -> Self {
        ValidateBlock {
            rel_tol: default_rel_tol(),
            slope_band: default_slope_band(),
            nplayer_trials: default_validate_trials(),
            nplayer_ns: default_validate_ns(),
        }
    }
}

fn default_one() -> f64 {
    1.0
}
fn default_chaos_k() -> usize {
    4
}
fn default_moment_order() -> f64 {
    4.0
}
fn default_damping() -> f64 {
    0.5
}
fn default_picard_tol() -> f64 {
    1e-6
}
fn default_picard_max_iters() -> usize {
    200
}
fn default_homotopy_step() -> f64 {
    0.1
}
fn default_psi_max_iters() -> usize {
    40
}
fn default_rel_tol() -> f64 {
    0.02
}
fn default_slope_band() -> f64 {
    0.2
}
fn default_validate_trials() -> usize {
    256
}
fn default_validate_ns() -> Vec<usize> {
    vec![2, 8]
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario> {
        let scenario: Scenario = toml::from_str(text)
            .map_err(|e| MfgError::InvalidParams { detail: format!("scenario schema: {e}") })?;
        scenario.validate_semantics()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| MfgError::Serialization { detail: format!("scenario encode: {e}") })
    }

    fn validate_semantics(&self) -> Result<()> {
        match self.model.family.as_str() {
            "lq" | "constant_vol" => {}
            other => {
                return Err(MfgError::InvalidParams {
                    detail: format!("unknown family tag '{other}' (scenario families: lq, constant_vol)"),
                })
            }
        }
        if self.model.n == 0 || self.model.d == 0 {
            return Err(MfgError::InvalidParams { detail: "dimensions must be positive".into() });
        }
        if !self.model.mu0.is_empty() && self.model.mu0.len() != self.model.n {
            return Err(MfgError::InvalidParams { detail: "mu0 dimension mismatch".into() });
        }
        match (self.grid.t, self.grid.r, self.grid.t_max) {
            (Some(t), None, None) if t > 0.0 => {}
            (None, Some(r), Some(tm)) if r >= 0.0 && tm > 0.0 => {}
            _ => {
                return Err(MfgError::InvalidParams {
                    detail: "grid needs either t > 0, or r >= 0 with t_max > 0".into(),
                })
            }
        }
        if self.grid.steps == 0 {
            return Err(MfgError::InvalidParams { detail: "grid needs steps >= 1".into() });
        }
        if self.ensemble.paths == 0 || self.ensemble.particles == 0 {
            return Err(MfgError::InvalidParams { detail: "ensemble must be non-empty".into() });
        }
        if let Some(study) = &self.study {
            if study.trials == 0 {
                return Err(MfgError::InvalidParams { detail: "study needs trials >= 1".into() });
            }
            if study.ns.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MfgError::InvalidParams {
                    detail: "study ladder must be strictly increasing".into(),
                });
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> Horizon<f64> {
        match (self.grid.t, self.grid.r, self.grid.t_max) {
            (Some(t), _, _) => Horizon::Finite { t_end: t },
            (_, Some(r), Some(tm)) => Horizon::Discounted { rate: r, t_max: tm },
            _ => unreachable!("validated"),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>> {
        TimeGrid::new(self.horizon().t_end(), self.grid.steps)
    }

    pub fn solver_config(&self) -> SolverConfig<f64> {
        SolverConfig {
            damping: self.solver.damping,
            picard_tol: self.solver.picard_tol,
            picard_max_iters: self.solver.picard_max_iters,
            homotopy_step: self.solver.homotopy_step,
            psi_max_iters: self.solver.psi_max_iters,
            ..SolverConfig::default()
        }
    }

    /// Numeric benchmark parameters; requires the "lq" family.
    pub fn lq_params(&self) -> Result<LqParams<f64>> {
        self.lq_params_with_horizon(self.horizon())
    }

    pub fn lq_params_with_horizon(&self, horizon: Horizon<f64>) -> Result<LqParams<f64>> {
        if self.model.family != "lq" {
            return Err(MfgError::WrongFamily {
                expected: "lq".into(),
                got: self.model.family.clone(),
            });
        }
        let n = self.model.n;
        let d = self.model.d;
        let mean0 = if self.model.mu0.is_empty() { vec![0.0; n] } else { self.model.mu0.clone() };
        let params = LqParams {
            dims: crate::model::Dimensions { state: n, noise: d, control: n },
            vol: Mat::scaled_identity(n, d, self.model.sigma),
            vol0: Mat::scaled_identity(n, d, self.model.sigma0),
            state_cost: self.model.q,
            coupling_cost: self.model.f_cost,
            anchor: self.model.rho,
            terminal_cost: self.model.g_cost,
            horizon,
            mean0,
            cov0: Mat::scaled_identity(n, n, self.model.var0),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn game_spec(&self) -> Result<GameSpec<f64>> {
        crate::model::make_lq(&self.lq_params()?)
    }

    /// Structural constants (C_L, C_F, C_G): explicit overrides when given,
    /// otherwise derived from the numeric parameters.
    pub fn structural_constants(&self) -> Result<(f64, f64, f64)> {
        if let Some(c) = &self.model.constants {
            return Ok((c.c_l, c.c_f, c.c_g));
        }
        if self.model.family == "lq" {
            let params = self.lq_params()?;
            return Ok(params.monotonicity_constants());
        }
        Err(MfgError::InvalidParams {
            detail: "constant_vol scenarios need an explicit [model.constants] block".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 7

[model]
family = "lq"
n = 1
d = 1
sigma = 0.4
sigma0 = 0.3
q = 0.25
f_cost = 1.0
rho = 0.5
g_cost = 0.5
mu0 = [0.6]
var0 = 0.25

[grid]
t = 1.0
steps = 100

[ensemble]
paths = 8
particles = 64

[study]
ns = [8, 16, 32]
trials = 4
"#;

    #[test]
    fn parses_and_round_trips() {
        let s = Scenario::parse(EXAMPLE).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.model.family, "lq");
        assert_eq!(s.solver.damping, 0.5);
        let text = s.to_toml().unwrap();
        let back = Scenario::parse(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = EXAMPLE.replace("var0 = 0.25", "var0 = 0.25\nmystery_knob = 3");
        assert!(Scenario::parse(&bad).is_err());
    }

    #[test]
    fn rejects_inconsistent_grid() {
        let bad = EXAMPLE.replace("[grid]\nt = 1.0", "[grid]\nt = 1.0\nr = 1.0\nt_max = 8.0");
        assert!(Scenario::parse(&bad).is_err());
        let bad = EXAMPLE.replace("[grid]\nt = 1.0\n", "[grid]\n");
        assert!(Scenario::parse(&bad).is_err());
    }

    #[test]
    fn discounted_grid_accepted() {
        let disc = EXAMPLE
            .replace("[grid]\nt = 1.0", "[grid]\nr = 1.0\nt_max = 8.0")
            .replace("g_cost = 0.5", "g_cost = 0.0");
        let s = Scenario::parse(&disc).unwrap();
        assert!(matches!(s.horizon(), Horizon::Discounted { .. }));
        assert!(s.lq_params().is_ok());
    }

    #[test]
    fn constants_override() {
        let cv = EXAMPLE
            .replace("family = \"lq\"", "family = \"constant_vol\"")
            .replace("var0 = 0.25", "var0 = 0.25\n\n[model.constants]\nc_l = 1.0\nc_f = -8.0\nc_g = 0.0");
        let s = Scenario::parse(&cv).unwrap();
        let (cl, cf, cg) = s.structural_constants().unwrap();
        assert_eq!((cl, cf, cg), (1.0, -8.0, 0.0));
    }

    #[test]
    fn lq_constants_derived() {
        let s = Scenario::parse(EXAMPLE).unwrap();
        let (cl, cf, cg) = s.structural_constants().unwrap();
        assert_eq!(cl, 1.0);
        assert!((cf - 0.5).abs() < 1e-15); // f(1−ρ) = 1·0.5
        assert!((cg - 0.25).abs() < 1e-15); // g(1−ρ) = 0.5·0.5
    }
}
