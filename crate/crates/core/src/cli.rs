//! Command implementations behind the `mfglab` binary: scenario ingestion,
//! condition checking, equilibrium solves with persistence, the coupling
//! study with CSV/SVG emission, the benchmark validation table, and the
//! rate table.
//!
//! Exit-code contract: 0 success, 1 domain failure (a check failed or a
//! tolerance was breached), 2 usage/schema error, 3 solver non-convergence.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::chaos::{
    self, run_chaos_study, run_infinite_horizon_study, summary_csv, trials_csv, StudyPlan,
};
use crate::error::{MfgError, Result};
use crate::fbsde::EnsembleLayout;
use crate::measure::EmpiricalMeasure;
use crate::mkv::{mfe_cost, solve_mkv, write_solution, EnsembleStreams};
use crate::model::Horizon;
use crate::monotone::{
    check_constantvol_tradeoff, check_displacement, check_infinite_horizon, format_report,
    SamplingPlan,
};
use crate::nplayer::solve_nplayer;
use crate::riccati::{oracle_paths, solve_riccati_mfe, solve_riccati_nplayer};
use crate::scenario::Scenario;
use crate::svg::loglog_plot;

/// Map an error to the process exit code.
pub fn exit_code_for(e: &MfgError) -> i32 {
    match e {
        MfgError::InvalidParams { .. }
        | MfgError::WrongFamily { .. }
        | MfgError::SizeMismatch { .. }
        | MfgError::IndexOutOfRange { .. }
        | MfgError::Serialization { .. }
        | MfgError::Io(_) => 2,
        MfgError::ConditionFailed { .. } => 1,
        MfgError::NonConvexMinimization { .. }
        | MfgError::NonFiniteState { .. }
        | MfgError::SingularRegression { .. }
        | MfgError::NoConvergence { .. }
        | MfgError::HomotopyStall { .. }
        | MfgError::FlowNoConvergence { .. }
        | MfgError::StreamExhausted { .. }
        | MfgError::StudyAborted { .. } => 3,
    }
}

pub fn load_scenario(path: &Path, seed_override: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    let mut scenario = Scenario::parse(&text)?;
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    Ok(scenario)
}

/// Run every structural check applicable to the scenario's family; returns
/// (all passed, report text).
pub fn cmd_check_monotone(scenario: &Scenario) -> Result<(bool, String)> {
    let mut lines = Vec::new();
    let mut all_pass = true;
    let (c_l, c_f, c_g) = scenario.structural_constants()?;

    match scenario.horizon() {
        Horizon::Finite { t_end } => {
            let (pass, margin) = check_constantvol_tradeoff(c_l, c_f, c_g, t_end)?;
            lines.push(format!(
                "condition=constant_vol_tradeoff verdict={} margin={margin:.6e} (C_L={c_l}, C_F={c_f}, C_G={c_g}, T={t_end})",
                if pass { "pass" } else { "FAIL" }
            ));
            all_pass &= pass;
        }
        Horizon::Discounted { rate, .. } => {
            let (pass, margin) = check_infinite_horizon(rate, c_l, c_f)?;
            lines.push(format!(
                "condition=infinite_horizon verdict={} margin={margin:.6e} (r={rate}, C_L={c_l}, C_F={c_f})",
                if pass { "pass" } else { "FAIL" }
            ));
            all_pass &= pass;
        }
    }

    if scenario.model.family == "lq" {
        let spec = scenario.game_spec()?;
        let grad = crate::model::gradient_check(&spec, 25, scenario.seed)?;
        lines.push(format!(
            "condition=gradient_check verdict={} max_rel_err={:.3e} tol={:.1e}",
            if grad.pass { "pass" } else { "FAIL" },
            grad.worst(),
            grad.tolerance
        ));
        all_pass &= grad.pass;

        let plan = SamplingPlan { seed: scenario.seed, ..SamplingPlan::default() };
        let cv = spec.constant_vol.as_ref().expect("lq family carries the structure");
        let dx_f = cv.dx_coupling.clone();
        let du_f = move |x: &[f64], m: &EmpiricalMeasure<f64>| dx_f(x, m);
        let report = check_displacement(&du_f, spec.dims.state, c_f, &plan);
        all_pass &= report.verdict;
        lines.push(format!("coupling {}", format_report(&report)));

        let dx_g = spec.coeffs.dx_terminal.clone();
        let du_g = move |x: &[f64], m: &EmpiricalMeasure<f64>| dx_g(x, m);
        let report = check_displacement(&du_g, spec.dims.state, c_g, &plan);
        all_pass &= report.verdict;
        lines.push(format!("terminal {}", format_report(&report)));
    }

    lines.push(format!("overall={}", if all_pass { "pass" } else { "FAIL" }));
    Ok((all_pass, lines.join("\n") + "\n"))
}

/// Solve the mean-field system, persist it, and return a summary.
pub fn cmd_solve_mkv(scenario: &Scenario, out: &Path) -> Result<String> {
    if let Horizon::Discounted { rate, .. } = scenario.horizon() {
        let (c_l, c_f, _) = scenario.structural_constants()?;
        let (pass, margin) = check_infinite_horizon(rate, c_l, c_f)?;
        if !pass {
            return Err(MfgError::ConditionFailed {
                detail: format!("discount condition margin {margin:.6e} is not positive"),
            });
        }
    }
    let spec = Arc::new(scenario.game_spec()?);
    let grid = scenario.time_grid()?;
    let layout =
        EnsembleLayout { paths: scenario.ensemble.paths, particles: scenario.ensemble.particles };
    let config = scenario.solver_config();
    let sol = solve_mkv(&spec, grid, layout, &config, &EnsembleStreams::field(scenario.seed))?;
    let mut file = fs::File::create(out)?;
    write_solution(&sol, &mut file)?;
    let y0 = sol.y0_mean();
    let cost = mfe_cost(&spec, &sol);
    Ok(format!(
        "y0_mean={:.6e} cost={:.6e} outer_iters={} continuation={}\n",
        y0[0],
        cost,
        sol.outer_iters,
        sol.used_continuation
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Svg,
    Both,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "svg" => Ok(OutputFormat::Svg),
            "both" => Ok(OutputFormat::Both),
            other => Err(MfgError::InvalidParams { detail: format!("unknown format '{other}'") }),
        }
    }
    fn csv(&self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
    fn svg(&self) -> bool {
        matches!(self, OutputFormat::Svg | OutputFormat::Both)
    }
}

/// Run the coupling study and write per-trial/summary CSVs and the log-log
/// plot into `out_dir`. Completion is success regardless of slope: the
/// study is analysis, not a gate.
pub fn cmd_chaos_study(scenario: &Scenario, out_dir: &Path, format: OutputFormat) -> Result<String> {
    let study = scenario.study.as_ref().ok_or_else(|| MfgError::InvalidParams {
        detail: "scenario has no [study] block".into(),
    })?;
    fs::create_dir_all(out_dir)?;
    let config = scenario.solver_config();

    if let Horizon::Discounted { rate, t_max } = scenario.horizon() {
        let (c_l, c_f, _) = scenario.structural_constants()?;
        let dt = t_max / scenario.grid.steps as f64;
        let ladder = study.t_max_ladder.clone().unwrap_or_else(|| vec![t_max]);
        let scenario_c = scenario.clone();
        let result = run_infinite_horizon_study(
            &move |tm: f64| {
                let params = scenario_c
                    .lq_params_with_horizon(Horizon::Discounted { rate, t_max: tm })?;
                Ok(Arc::new(crate::model::make_lq(&params)?))
            },
            c_l,
            c_f,
            rate,
            &ladder,
            dt,
            &study.ns,
            study.trials,
            scenario.ensemble.particles,
            study.chaos_k,
            scenario.seed,
            &config,
        )?;
        let mut summary_lines = Vec::new();
        for (t_max, study_result) in &result.truncations {
            let tag = format!("tmax{t_max:.2}");
            if format.csv() {
                fs::write(out_dir.join(format!("trials_{tag}.csv")), trials_csv(study_result))?;
                fs::write(out_dir.join(format!("summary_{tag}.csv")), summary_csv(study_result))?;
            }
            if format.svg() {
                fs::write(
                    out_dir.join(format!("plot_{tag}.svg")),
                    study_svg(study_result, &format!("discounted state-gap decay, T={t_max}")),
                )?;
            }
            summary_lines.push(format!(
                "t_max={t_max} slope={:?}",
                study_result.fitted_slope.map(|(s, _)| s)
            ));
        }
        summary_lines.push(format!("truncation_sensitivity={:?}", result.truncation_sensitivity));
        return Ok(summary_lines.join("\n") + "\n");
    }

    let spec = Arc::new(scenario.game_spec()?);
    let plan = StudyPlan {
        ns: study.ns.clone(),
        trials: study.trials,
        grid: scenario.time_grid()?,
        mkv_particles: scenario.ensemble.particles,
        chaos_k: study.chaos_k,
        moment_order: study.moment_order,
        seed: scenario.seed,
    };
    let result = run_chaos_study(&spec, &plan, &config)?;
    if format.csv() {
        fs::write(out_dir.join("trials.csv"), trials_csv(&result))?;
        fs::write(out_dir.join("summary.csv"), summary_csv(&result))?;
    }
    if format.svg() {
        fs::write(out_dir.join("plot.svg"), study_svg(&result, "state-gap decay"))?;
    }
    Ok(format!(
        "ns={:?} fitted_slope={:?} observed_M{}={:.4e} aborted={:?}\n",
        result.ns,
        result.fitted_slope,
        result.moment_order,
        result.observed_moment,
        result.aborted
    ))
}

fn study_svg<T>(result: &chaos::ChaosStudyResult<T>, title: &str) -> String {
    let points: Vec<(f64, f64)> = result
        .entries
        .iter()
        .map(|e| (e.n_players as f64, e.mean_sup_state_err))
        .collect();
    let fit = result.fitted_slope.map(|(slope, _)| {
        // least-squares intercept in log10 coordinates
        let n = points.len() as f64;
        let mx = points.iter().map(|(x, _)| x.log10()).sum::<f64>() / n;
        let my = points.iter().map(|(_, y)| y.log10()).sum::<f64>() / n;
        (slope, my - slope * mx)
    });
    loglog_plot(&points, fit, title, "players N", "mean sup state gap^2")
}

/// Oracle-versus-solver validation table; pass iff every row is within its
/// tolerance.
pub fn cmd_lq_validate(scenario: &Scenario) -> Result<(bool, String)> {
    let spec = Arc::new(scenario.game_spec()?);
    let params = scenario.lq_params()?;
    let grid = scenario.time_grid()?;
    let config = scenario.solver_config();
    let tol = scenario.validate.rel_tol;
    let mut rows = Vec::new();
    let mut all_pass = true;

    // mean-field solve against the closed-form feedback
    let layout =
        EnsembleLayout { paths: scenario.ensemble.paths, particles: scenario.ensemble.particles };
    let sol = solve_mkv(&spec, grid, layout, &config, &EnsembleStreams::field(scenario.seed))?;
    let oracle = solve_riccati_mfe(&params)?;
    let y0 = sol.y0_mean()[0];
    let y0_ref = oracle.y0_mean[0];
    let y0_err = rel_err(y0, y0_ref);
    all_pass &= y0_err <= tol;
    rows.push(row("mkv_y0_mean", y0, y0_ref, y0_err, tol));

    let cost = mfe_cost(&spec, &sol);
    let cost_err = rel_err(cost, oracle.cost);
    all_pass &= cost_err <= tol;
    rows.push(row("mkv_cost", cost, oracle.cost, cost_err, tol));

    // finite-player solves against the exact feedback on shared noise
    for &n_players in &scenario.validate.nplayer_ns {
        let nsol =
            solve_nplayer(&spec, n_players, grid, scenario.validate.nplayer_trials, &config, scenario.seed)?;
        let fb = solve_riccati_nplayer(&params, n_players)?;
        let oracle_ens = oracle_paths(&fb, &params, &nsol.ensemble);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for p in 0..nsol.ensemble.layout.paths {
            for m in 0..n_players {
                let mut sup: f64 = 0.0;
                let mut sup_ref: f64 = 0.0;
                for j in 0..grid.n_nodes() {
                    for c in 0..spec.dims.state {
                        sup = sup
                            .max((nsol.ensemble.x_at(p, m, j)[c] - oracle_ens.x_at(p, m, j)[c]).abs());
                        sup_ref = sup_ref.max(oracle_ens.x_at(p, m, j)[c].abs());
                    }
                }
                num += sup;
                den += sup_ref;
            }
        }
        let err = num / den.max(1e-300);
        all_pass &= err <= tol;
        rows.push(format!(
            "{:<22} rel_sup_err={:.4e} tol={:.1e} [{}]",
            format!("nplayer_x_sup (N={n_players})"),
            err,
            tol,
            if err <= tol { "pass" } else { "FAIL" }
        ));
    }

    // analytic feedback gap decays at first order
    let mut lns = Vec::new();
    let mut lgaps = Vec::new();
    for n_players in [8usize, 16, 32, 64] {
        let fb = solve_riccati_nplayer(&params, n_players)?;
        let mut gap = 0.0f64;
        for frac in [0.0, 0.25, 0.5, 0.75] {
            let t = grid.horizon * frac;
            gap = gap.max((fb.p_at(t) - oracle.p_at(t)).abs());
            gap = gap.max((fb.s_at(t) - oracle.s_at(t)).abs());
        }
        if gap > 0.0 {
            lns.push((n_players as f64).ln());
            lgaps.push(gap.ln());
        }
    }
    if lns.len() >= 2 {
        let (slope, _) = chaos::fit_slope(&lns, &lgaps)?;
        let band = scenario.validate.slope_band;
        let pass = (slope + 1.0).abs() <= band;
        all_pass &= pass;
        rows.push(format!(
            "{:<22} slope={:.4} band=-1±{:.2} [{}]",
            "riccati_gap_slope",
            slope,
            band,
            if pass { "pass" } else { "FAIL" }
        ));
    } else {
        rows.push(format!("{:<22} skipped (no finite gap; anchor is zero?)", "riccati_gap_slope"));
    }

    rows.push(format!("overall={}", if all_pass { "pass" } else { "FAIL" }));
    Ok((all_pass, rows.join("\n") + "\n"))
}

fn rel_err(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-12)
}

fn row(name: &str, value: f64, reference: f64, err: f64, tol: f64) -> String {
    format!(
        "{name:<22} value={value:.6e} oracle={reference:.6e} rel_err={err:.4e} tol={tol:.1e} [{}]",
        if err <= tol { "pass" } else { "FAIL" }
    )
}

/// Tabulate the moment-dependent rate over a ladder as CSV.
pub fn cmd_rate_table(state_dim: usize, q: f64, ns: &[usize]) -> Result<String> {
    let mut out = String::from("N,r_nq\n");
    for &n in ns {
        let v = chaos::rnq(state_dim, q, n)?;
        out.push_str(&format!("{n},{v:.6}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> Scenario {
        Scenario::parse(text).unwrap()
    }

    const SMALL: &str = r#"
seed = 11
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
t = 0.25
steps = 10
[ensemble]
paths = 4
particles = 48
"#;

    #[test]
    fn check_monotone_passes_default_lq() {
        let (pass, report) = cmd_check_monotone(&scenario(SMALL)).unwrap();
        assert!(pass, "{report}");
        assert!(report.contains("constant_vol_tradeoff"));
        assert!(report.contains("gradient_check"));
    }

    #[test]
    fn check_monotone_flags_bad_tradeoff() {
        let text = SMALL
            .replace("family = \"lq\"", "family = \"constant_vol\"")
            .replace("var0 = 0.25", "var0 = 0.25\n[model.constants]\nc_l = 1.0\nc_f = -8.0\nc_g = 0.0")
            .replace("t = 0.25", "t = 1.0");
        let (pass, report) = cmd_check_monotone(&scenario(&text)).unwrap();
        assert!(!pass, "{report}");
        assert!(report.contains("FAIL"));
    }

    #[test]
    fn rate_table_formats() {
        let csv = cmd_rate_table(3, 3.0, &[100]).unwrap();
        assert_eq!(csv, "N,r_nq\n100,0.315443\n");
        let empty = cmd_rate_table(3, 3.0, &[]).unwrap();
        assert_eq!(empty, "N,r_nq\n");
        assert!(cmd_rate_table(3, 2.0, &[10]).is_err());
    }

    #[test]
    fn exit_codes_map_by_error_class() {
        assert_eq!(exit_code_for(&MfgError::InvalidParams { detail: "x".into() }), 2);
        assert_eq!(exit_code_for(&MfgError::ConditionFailed { detail: "x".into() }), 1);
        assert_eq!(exit_code_for(&MfgError::NoConvergence { iters: 1, residual: 1.0 }), 3);
    }
}
