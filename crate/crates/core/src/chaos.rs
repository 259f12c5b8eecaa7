//! Convergence laboratory: synchronous coupling of finite-player solutions
//! to conditionally independent mean-field copies, the error metrics the
//! convergence theory controls, empirical decay rates over a player ladder,
//! the moment-dependent rate formula, and the discounted-horizon study.
//!
//! The coupling contract: for trial t, the shared-noise stream is keyed by
//! t, and player i draws (ξⁱ, Wⁱ) from streams keyed by (t, i) — the same
//! keys whether i lives inside the N-player system or indexes a mean-field
//! copy. Initial states therefore coincide exactly, and state gaps measure
//! only the finite-population interaction plus solver noise.
//!
//! Per (ladder entry N, trial) the study records
//!
//! ```text
//!   sup_state_err = mean_i sup_t |Xᴺⁱ_t − Xⁱ_t|²
//!   control_err   = mean_i ∫ |αᴺⁱ_t − αⁱ_t|² dt
//!   chaos_w2      = (1/k)·Σ_{i<k} |Xᴺⁱ_T − Xⁱ_T|²   (matched coupling)
//! ```
//!
//! plus the mean squares of the measure-approximation error terms, e.g. in
//! the constant-volatility case
//!
//! ```text
//!   E^{F,i}_t = (1/N)·D_mF(Xⁱ, m̄ᴺ_t, Xⁱ) + D_xF(Xⁱ, m̄ᴺ_t) − D_xF(Xⁱ, m̄_t)
//! ```
//!
//! with m̄ᴺ the empirical measure of the copies and m̄ the mean-field flow.
//! Decay rates are least-squares slopes on (log N, log mean metric).

use std::marker::PhantomData;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::fbsde::{EnsembleLayout, SolverConfig, TimeGrid};
use crate::measure::EmpiricalMeasure;
use crate::mkv::{
    conditionally_independent_copies, solve_mkv, CopiesOutput, EnsembleStreams, MfeSolution,
};
use crate::model::{FamilyTag, GameSpec, HamiltonianPoint};
use crate::monotone::check_infinite_horizon;
use crate::nplayer::{pairwise_metrics, solve_nplayer, NPlayerSolution};
use crate::num::Scalar;
use crate::rng::{StreamFactory, StreamRole};

// ---------------------------------------------------------------------------
// Rate formula
// ---------------------------------------------------------------------------

/// Moment-dependent convergence rate for states in ℝⁿ with q-th moments,
/// three branches in the dimension:
///
/// ```text
///   n < 4:  N^{−1/2} + N^{−(q−2)/q}
///   n = 4:  N^{−1/2}·log(1+N) + N^{−(q−2)/q}
///   n > 4:  N^{−2/n} + N^{−(q−2)/2}
/// ```
///
/// Requires q > 2. For n ≤ 4 the value q = 4 is excluded by the branch
/// hypotheses and falls back to a representative exponent from (2, 4)
/// (q = 3).
pub fn rnq(state_dim: usize, q: f64, n_players: usize) -> Result<f64> {
    if q <= 2.0 {
        return Err(MfgError::InvalidParams {
            detail: format!("rate formula needs q > 2, got {q}"),
        });
    }
    if state_dim == 0 || n_players == 0 {
        return Err(MfgError::InvalidParams { detail: "need positive dimension and count".into() });
    }
    let nf = n_players as f64;
    let q_small = if q == 4.0 { 3.0 } else { q };
    Ok(match state_dim {
        1..=3 => nf.powf(-0.5) + nf.powf(-(q_small - 2.0) / q_small),
        4 => nf.powf(-0.5) * (1.0 + nf).ln() + nf.powf(-(q_small - 2.0) / q_small),
        _ => nf.powf(-2.0 / state_dim as f64) + nf.powf(-(q - 2.0) / 2.0),
    })
}

/// Least-squares slope of ys on xs; returns (slope, standard error).
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MfgError::InvalidParams { detail: "need at least two points".into() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(MfgError::InvalidParams { detail: "degenerate abscissae".into() });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let stderr = (ssr / dof / sxx).sqrt();
    Ok((slope, stderr))
}

// ---------------------------------------------------------------------------
// Error terms
// ---------------------------------------------------------------------------

/// Mean squares of the measure-approximation error terms over one trial's
/// copies, populated by family: constant-volatility instances report the
/// coupling/terminal terms, other families the Hamiltonian-derivative terms
/// plus the terminal one.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorTermStats {
    pub e_f_sq: Option<f64>,
    pub e_g_sq: Option<f64>,
    pub e_l_sq: Option<f64>,
    pub e_b_sq: Option<f64>,
    pub e_sigma_sq: Option<f64>,
    pub e_sigma0_sq: Option<f64>,
}

/// Evaluate the error terms for one trial: `copies` carries (Xⁱ, Yⁱ, Zⁱ,
/// Z⁰ⁱ), `flow_of_trial(j)` is the mean-field conditional law at node j
/// along the trial's shared noise.
pub fn error_terms<T: Scalar>(
    spec: &GameSpec<T>,
    copies: &CopiesOutput<T>,
    flow_of_trial: &dyn Fn(usize) -> Arc<EmpiricalMeasure<T>>,
) -> Result<ErrorTermStats> {
    let ens = &copies.ensemble;
    let n = ens.state_dim;
    let n_copies = ens.layout.particles;
    let nodes = ens.grid.n_nodes();
    let inv_n = T::one() / T::of_usize(n_copies);
    let constant_vol = matches!(spec.family, FamilyTag::Lq | FamilyTag::ConstantVol);

    let copy_measure = |j: usize| -> EmpiricalMeasure<T> {
        let mut atoms = Vec::with_capacity(n_copies * n);
        for m in 0..n_copies {
            atoms.extend_from_slice(ens.x_at(0, m, j));
        }
        EmpiricalMeasure::new(n, atoms)
    };

    let terminal_term = |stats_g: &mut f64| -> Result<()> {
        let j = nodes - 1;
        let m_n = copy_measure(j);
        let m_bar = flow_of_trial(j);
        for i in 0..n_copies {
            let x = ens.x_at(0, i, j);
            let dm = (spec.coeffs.dm_terminal)(x, &m_n, x);
            let dx_n = (spec.coeffs.dx_terminal)(x, &m_n);
            let dx_bar = (spec.coeffs.dx_terminal)(x, &m_bar);
            let mut sq = 0.0f64;
            for c in 0..n {
                let v = (inv_n * dm[c] + dx_n[c] - dx_bar[c]).to_f64x();
                sq += v * v;
            }
            *stats_g += sq;
        }
        *stats_g /= n_copies as f64;
        Ok(())
    };

    if constant_vol {
        let cv = spec.constant_vol.as_ref().ok_or_else(|| MfgError::WrongFamily {
            expected: "constant_vol".into(),
            got: spec.family.name().into(),
        })?;
        let mut ef_acc = 0.0f64;
        let mut ef_cnt = 0usize;
        for j in 0..nodes - 1 {
            let m_n = copy_measure(j);
            let m_bar = flow_of_trial(j);
            for i in 0..n_copies {
                let x = ens.x_at(0, i, j);
                let dm = (cv.dm_coupling)(x, &m_n, x);
                let dx_n = (cv.dx_coupling)(x, &m_n);
                let dx_bar = (cv.dx_coupling)(x, &m_bar);
                let mut sq = 0.0f64;
                for c in 0..n {
                    let v = (inv_n * dm[c] + dx_n[c] - dx_bar[c]).to_f64x();
                    sq += v * v;
                }
                ef_acc += sq;
                ef_cnt += 1;
            }
        }
        let mut eg = 0.0f64;
        terminal_term(&mut eg)?;
        return Ok(ErrorTermStats {
            e_f_sq: Some(ef_acc / ef_cnt.max(1) as f64),
            e_g_sq: Some(eg),
            ..ErrorTermStats::default()
        });
    }

    let mut el = 0.0f64;
    let mut eb = 0.0f64;
    let mut es = 0.0f64;
    let mut es0 = 0.0f64;
    let mut cnt = 0usize;
    for j in 0..nodes - 1 {
        let m_n = copy_measure(j);
        let m_bar = flow_of_trial(j);
        for i in 0..n_copies {
            let x = ens.x_at(0, i, j);
            let y = ens.y_at(0, i, j);
            let z = ens.z_at(0, i, j);
            let z0 = ens.z0_at(0, i, j);
            let p_n = HamiltonianPoint { x, y, z, z0, measure: &m_n };
            let p_bar = HamiltonianPoint { x, y, z, z0, measure: &m_bar };
            let d_n = crate::model::hamiltonian_derivatives(spec, &p_n)?;
            let d_bar = crate::model::hamiltonian_derivatives(spec, &p_bar)?;
            let dm = (spec.coeffs.dm_running)(x, &d_n.alpha, &m_n, x);
            let mut sl = 0.0;
            let mut sb = 0.0;
            for c in 0..n {
                let vl = (inv_n * dm[c] + d_n.dx[c] - d_bar.dx[c]).to_f64x();
                sl += vl * vl;
                let vb = (d_n.dy[c] - d_bar.dy[c]).to_f64x();
                sb += vb * vb;
            }
            let mut ss = 0.0;
            let mut ss0 = 0.0;
            for c in 0..d_n.dz.data.len() {
                let vs = (d_n.dz.data[c] - d_bar.dz.data[c]).to_f64x();
                ss += vs * vs;
                let vs0 = (d_n.dz0.data[c] - d_bar.dz0.data[c]).to_f64x();
                ss0 += vs0 * vs0;
            }
            el += sl;
            eb += sb;
            es += ss;
            es0 += ss0;
            cnt += 1;
        }
    }
    let mut eg = 0.0f64;
    terminal_term(&mut eg)?;
    let cf = cnt.max(1) as f64;
    Ok(ErrorTermStats {
        e_f_sq: None,
        e_g_sq: Some(eg),
        e_l_sq: Some(el / cf),
        e_b_sq: Some(eb / cf),
        e_sigma_sq: Some(es / cf),
        e_sigma0_sq: Some(es0 / cf),
    })
}

// ---------------------------------------------------------------------------
// Coupled adjoint diagnostic
// ---------------------------------------------------------------------------

/// Per-node mean over trials of Σᵢ ΔXᵢ·ΔYᵢ between the finite-player system
/// and its copies — the pairing whose time evolution the monotonicity
/// argument controls. Zero at the initial node because the coupling shares
/// the initial draws.
pub fn coupled_lyapunov<T: Scalar>(
    sol: &NPlayerSolution<T>,
    copies: &[CopiesOutput<T>],
) -> Result<Vec<f64>> {
    let ens = &sol.ensemble;
    let trials = ens.layout.paths;
    if copies.len() != trials {
        return Err(MfgError::SizeMismatch { left: copies.len(), right: trials });
    }
    let n = ens.state_dim;
    let nodes = ens.grid.n_nodes();
    let mut trace = vec![0.0f64; nodes];
    for (trial, copy) in copies.iter().enumerate() {
        if copy.ensemble.layout.particles != sol.n_players {
            return Err(MfgError::SizeMismatch {
                left: copy.ensemble.layout.particles,
                right: sol.n_players,
            });
        }
        for (j, slot) in trace.iter_mut().enumerate() {
            let mut pair = 0.0f64;
            for i in 0..sol.n_players {
                for c in 0..n {
                    let dx = (ens.x_at(trial, i, j)[c] - copy.ensemble.x_at(0, i, j)[c]).to_f64x();
                    let dy = (ens.y_at(trial, i, j)[c] - copy.ensemble.y_at(0, i, j)[c]).to_f64x();
                    pair += dx * dy;
                }
            }
            *slot += pair;
        }
    }
    for v in trace.iter_mut() {
        *v /= trials as f64;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// The study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrialMetrics {
    pub sup_state_err: f64,
    pub control_err: f64,
    pub chaos_w2: f64,
    pub errors: ErrorTermStats,
}

#[derive(Debug, Clone)]
pub struct LadderEntry {
    pub n_players: usize,
    pub per_trial: Vec<TrialMetrics>,
    pub mean_sup_state_err: f64,
    pub stderr_sup_state_err: f64,
    pub mean_control_err: f64,
    pub used_continuation: bool,
}

#[derive(Debug, Clone)]
pub struct ChaosStudyResult<T> {
    pub ns: Vec<usize>,
    pub entries: Vec<LadderEntry>,
    /// (slope, stderr) of log mean sup_state_err against log N; absent for
    /// degenerate ladders.
    pub fitted_slope: Option<(f64, f64)>,
    pub control_slope: Option<(f64, f64)>,
    pub error_slopes: ErrorSlopes,
    /// Observed q-th moment of the mean-field flow: max over nodes of the
    /// mean over paths. The rate formula presumes this is finite, which is
    /// not verifiable a priori, so the study reports it.
    pub observed_moment: f64,
    pub moment_order: f64,
    pub seed: u64,
    pub aborted: Option<String>,
    _scalar: PhantomData<T>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorSlopes {
    pub e_f: Option<(f64, f64)>,
    pub e_g: Option<(f64, f64)>,
    pub e_l: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct StudyPlan<T> {
    pub ns: Vec<usize>,
    pub trials: usize,
    pub grid: TimeGrid<T>,
    /// Mean-field ensemble budget per shared-noise path (N-independent).
    pub mkv_particles: usize,
    /// Leading particles entering the matched-coupling distance.
    pub chaos_k: usize,
    /// Moment order reported along the flow.
    pub moment_order: f64,
    pub seed: u64,
}

/// Run the coupling study over a player ladder: one mean-field solve whose
/// paths carry the trial shared-noise streams, then per ladder entry one
/// finite-player solve on the same streams, copies per trial, and metrics.
/// Ladder entries run concurrently; all randomness is keyed, so results are
/// independent of the worker count.
pub fn run_chaos_study<T: Scalar>(
    spec: &Arc<GameSpec<T>>,
    plan: &StudyPlan<T>,
    config: &SolverConfig<T>,
) -> Result<ChaosStudyResult<T>> {
    if plan.ns.is_empty() || plan.trials == 0 {
        return Err(MfgError::InvalidParams { detail: "empty study plan".into() });
    }
    if plan.ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MfgError::InvalidParams {
            detail: "ladder must be strictly increasing".into(),
        });
    }
    let mfe = solve_mkv(
        spec,
        plan.grid,
        EnsembleLayout { paths: plan.trials, particles: plan.mkv_particles },
        config,
        &EnsembleStreams::trial_block(plan.seed),
    )?;

    let observed_moment = observed_flow_moment(&mfe, plan.moment_order);

    let results: Vec<Result<LadderEntry>> = plan
        .ns
        .par_iter()
        .map(|&n_players| ladder_entry(spec, &mfe, n_players, plan, config))
        .collect();

    let mut entries = Vec::new();
    let mut aborted = None;
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
    }
    if entries.is_empty() {
        return Err(MfgError::StudyAborted {
            detail: aborted.unwrap_or_else(|| "no ladder entry completed".into()),
        });
    }

    Ok(summarize(plan, entries, observed_moment, aborted))
}

fn summarize<T>(
    plan: &StudyPlan<T>,
    entries: Vec<LadderEntry>,
    observed_moment: f64,
    aborted: Option<String>,
) -> ChaosStudyResult<T> {
    let fitted_slope = slope_of(&entries, |e| e.mean_sup_state_err);
    let control_slope = slope_of(&entries, |e| e.mean_control_err);
    let error_slopes = ErrorSlopes {
        e_f: slope_of(&entries, |e| mean_opt(&e.per_trial, |t| t.errors.e_f_sq)),
        e_g: slope_of(&entries, |e| mean_opt(&e.per_trial, |t| t.errors.e_g_sq)),
        e_l: slope_of(&entries, |e| mean_opt(&e.per_trial, |t| t.errors.e_l_sq)),
    };
    ChaosStudyResult {
        ns: entries.iter().map(|e| e.n_players).collect(),
        entries,
        fitted_slope,
        control_slope,
        error_slopes,
        observed_moment,
        moment_order: plan.moment_order,
        seed: plan.seed,
        aborted,
        _scalar: PhantomData,
    }
}

fn mean_opt(trials: &[TrialMetrics], f: impl Fn(&TrialMetrics) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = trials.iter().filter_map(f).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn slope_of(entries: &[LadderEntry], metric: impl Fn(&LadderEntry) -> f64) -> Option<(f64, f64)> {
    if entries.len() < 2 {
        return None;
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in entries {
        let v = metric(e);
        if v.is_finite() && v > 0.0 {
            xs.push((e.n_players as f64).ln());
            ys.push(v.ln());
        }
    }
    if xs.len() < 2 {
        return None;
    }
    fit_slope(&xs, &ys).ok()
}

fn observed_flow_moment<T: Scalar>(mfe: &MfeSolution<T>, order: f64) -> f64 {
    let nodes = mfe.ensemble.grid.n_nodes();
    let paths = mfe.ensemble.layout.paths;
    let q = T::of(order);
    let mut worst = 0.0f64;
    for j in 0..nodes {
        let mut acc = 0.0f64;
        for p in 0..paths {
            acc += mfe.flow.at(p, j).moment(q).map(|v| v.to_f64x()).unwrap_or(f64::NAN);
        }
        worst = worst.max(acc / paths as f64);
    }
    worst
}

fn ladder_entry<T: Scalar>(
    spec: &Arc<GameSpec<T>>,
    mfe: &MfeSolution<T>,
    n_players: usize,
    plan: &StudyPlan<T>,
    config: &SolverConfig<T>,
) -> Result<LadderEntry> {
    let nsol = solve_nplayer(spec, n_players, plan.grid, plan.trials, config, plan.seed)?;
    let copies = build_copies(spec, mfe, n_players, plan.trials, plan.seed)?;
    let rate = spec.horizon.rate();
    let (state, control) = pairwise_metrics(&nsol, &copies, rate)?;

    let nodes = plan.grid.n_nodes();
    let k = plan.chaos_k.min(n_players);
    let mut per_trial = Vec::with_capacity(plan.trials);
    for trial in 0..plan.trials {
        let sup_state_err =
            (0..n_players).map(|i| state[i][trial]).sum::<f64>() / n_players as f64;
        let control_err =
            (0..n_players).map(|i| control[i][trial]).sum::<f64>() / n_players as f64;
        let mut a = Vec::with_capacity(n_players * nsol.ensemble.state_dim);
        let mut b = Vec::with_capacity(n_players * nsol.ensemble.state_dim);
        for i in 0..n_players {
            a.extend_from_slice(nsol.ensemble.x_at(trial, i, nodes - 1));
            b.extend_from_slice(copies[trial].ensemble.x_at(0, i, nodes - 1));
        }
        let chaos_w2 =
            crate::measure::chaos_wasserstein(&[(&a[..], &b[..])], nsol.ensemble.state_dim, k)?
                .to_f64x();
        let flow = &mfe.flow;
        let errors = error_terms(spec, &copies[trial], &|j| flow.at(trial, j).clone())?;
        per_trial.push(TrialMetrics { sup_state_err, control_err, chaos_w2, errors });
    }
    let mean = per_trial.iter().map(|t| t.sup_state_err).sum::<f64>() / plan.trials as f64;
    let var = per_trial
        .iter()
        .map(|t| (t.sup_state_err - mean) * (t.sup_state_err - mean))
        .sum::<f64>()
        / (plan.trials.max(2) - 1) as f64;
    let mean_control = per_trial.iter().map(|t| t.control_err).sum::<f64>() / plan.trials as f64;
    Ok(LadderEntry {
        n_players,
        per_trial,
        mean_sup_state_err: mean,
        stderr_sup_state_err: (var / plan.trials as f64).sqrt(),
        mean_control_err: mean_control,
        used_continuation: nsol.used_continuation,
    })
}

/// Copies for every trial with the coupling-contract stream keys.
pub fn build_copies<T: Scalar>(
    spec: &Arc<GameSpec<T>>,
    mfe: &MfeSolution<T>,
    n_players: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<CopiesOutput<T>>> {
    (0..trials)
        .map(|t| {
            let f = StreamFactory::new(seed);
            conditionally_independent_copies(
                spec,
                mfe,
                n_players,
                t,
                &move |m| f.stream(StreamRole::PlayerNoise, t as u64, m as u64),
                &move |m| f.stream(StreamRole::PlayerInit, t as u64, m as u64),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Discounted-horizon study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InfiniteHorizonStudy<T> {
    /// One study per truncation horizon, ascending.
    pub truncations: Vec<(f64, ChaosStudyResult<T>)>,
    /// Relative change of the ladder-averaged state metric between
    /// consecutive truncation horizons.
    pub truncation_sensitivity: Vec<f64>,
}

/// Run the coupling study on the discounted system truncated at each of the
/// given horizons (the time step is preserved across truncations). The
/// discount condition r² > 4·C_F⁻/C_L is enforced before any computation;
/// metrics carry e^{−rt} weights.
#[allow(clippy::too_many_arguments)]
pub fn run_infinite_horizon_study<T: Scalar>(
    spec_for_tmax: &dyn Fn(T) -> Result<Arc<GameSpec<T>>>,
    c_l: T,
    c_f: T,
    rate: T,
    t_maxes: &[T],
    dt: T,
    ns: &[usize],
    trials: usize,
    mkv_particles: usize,
    chaos_k: usize,
    seed: u64,
    config: &SolverConfig<T>,
) -> Result<InfiniteHorizonStudy<T>> {
    let (pass, margin) = check_infinite_horizon(rate, c_l, c_f)?;
    if !pass {
        return Err(MfgError::ConditionFailed {
            detail: format!("discount condition margin {margin} is not positive"),
        });
    }
    let mut truncations = Vec::new();
    for &t_max in t_maxes {
        let steps = (t_max / dt).to_f64x().round() as usize;
        let grid = TimeGrid::new(t_max, steps.max(1))?;
        let spec = spec_for_tmax(t_max)?;
        let plan = StudyPlan {
            ns: ns.to_vec(),
            trials,
            grid,
            mkv_particles,
            chaos_k,
            moment_order: 4.0,
            seed,
        };
        let result = run_chaos_study(&spec, &plan, config)?;
        truncations.push((t_max.to_f64x(), result));
    }
    let mut sensitivity = Vec::new();
    for w in truncations.windows(2) {
        let a = ladder_average(&w[0].1);
        let b = ladder_average(&w[1].1);
        sensitivity.push(if a > 0.0 { (b - a).abs() / a } else { 0.0 });
    }
    Ok(InfiniteHorizonStudy { truncations, truncation_sensitivity: sensitivity })
}

fn ladder_average<T>(result: &ChaosStudyResult<T>) -> f64 {
    let vals: Vec<f64> = result.entries.iter().map(|e| e.mean_sup_state_err).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(fmt).unwrap_or_default()
}

/// Per-trial CSV with the fixed column contract; absent terms are empty.
pub fn trials_csv<T>(result: &ChaosStudyResult<T>) -> String {
    let mut out = String::from(
        "N,trial,sup_state_err,control_err,chaos_w2,eF_sq,eG_sq,eL_sq,eb_sq,esigma_sq,esigma0_sq,seed\n",
    );
    for entry in &result.entries {
        for (trial, m) in entry.per_trial.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                entry.n_players,
                trial,
                fmt(m.sup_state_err),
                fmt(m.control_err),
                fmt(m.chaos_w2),
                fmt_opt(m.errors.e_f_sq),
                fmt_opt(m.errors.e_g_sq),
                fmt_opt(m.errors.e_l_sq),
                fmt_opt(m.errors.e_b_sq),
                fmt_opt(m.errors.e_sigma_sq),
                fmt_opt(m.errors.e_sigma0_sq),
                result.seed,
            ));
        }
    }
    out
}

/// Summary CSV: one row per ladder entry; the fitted slope is repeated on
/// every row.
pub fn summary_csv<T>(result: &ChaosStudyResult<T>) -> String {
    let mut out = String::from("N,mean_sup_state_err,stderr,fitted_slope,slope_stderr\n");
    let (slope, sl_err) = result.fitted_slope.unwrap_or((f64::NAN, f64::NAN));
    for entry in &result.entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            entry.n_players,
            fmt(entry.mean_sup_state_err),
            fmt(entry.stderr_sup_state_err),
            fmt_opt(Some(slope)),
            fmt_opt(Some(sl_err)),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::PathEnsemble;
    use crate::model::make_lq;
    use crate::riccati::LqParams;

    #[test]
    fn rate_formula_reference_values() {
        let v = rnq(3, 3.0, 100).unwrap();
        assert!((v - 0.315443).abs() < 1e-6, "{v}");
        let v = rnq(4, 3.0, 1).unwrap();
        assert!((v - (2.0f64.ln() + 1.0)).abs() < 1e-12, "{v}");
        let v = rnq(5, 3.0, 32).unwrap();
        assert!((v - (0.25 + 32.0f64.powf(-0.5))).abs() < 1e-12, "{v}");
        assert!(rnq(3, 2.0, 10).is_err());
        assert!(rnq(3, 1.5, 10).is_err());
    }

    #[test]
    fn rate_formula_decreasing_in_population() {
        for state_dim in 1..=6 {
            for q in [2.5, 3.0, 4.0, 4.5, 6.0] {
                let mut prev = f64::INFINITY;
                for n in [2usize, 4, 8, 16, 64, 256, 1024] {
                    let v = rnq(state_dim, q, n).unwrap();
                    assert!(v < prev, "n={state_dim} q={q} N={n}: {v} !< {prev}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let xs: Vec<f64> = [8.0f64, 16.0, 32.0, 64.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = [8.0f64, 16.0, 32.0, 64.0].iter().map(|v| (3.0 / v).ln()).collect();
        let (slope, stderr) = fit_slope(&xs, &ys).unwrap();
        assert!((slope + 1.0).abs() < 1e-12);
        assert!(stderr < 1e-12);
        assert!(fit_slope(&xs[..1], &ys[..1]).is_err());
    }

    #[test]
    fn error_term_closed_form_linear_mean_coupling() {
        // F(x, m) = x·mean(m): D_xF = mean, D_mF = x. The term reduces to
        //   E^{F,i} = x/N + mean(mᴺ) − mean(m̄),
        // computable directly from atom means.
        use crate::linalg::Mat;
        use crate::model::{CoefficientSet, Dimensions, GameSpec, Horizon, InitialLaw};
        let dims = Dimensions { state: 1, noise: 1, control: 1 };
        let spec = GameSpec::<f64> {
            dims,
            horizon: Horizon::Finite { t_end: 1.0 },
            family: FamilyTag::ConstantVol,
            initial: InitialLaw::deterministic(vec![0.0]),
            coeffs: CoefficientSet {
                drift: Arc::new(|_x, a, _m| a.to_vec()),
                vol: Arc::new(|_x, _a, _m| Mat::zeros(1, 1)),
                vol0: Arc::new(|_x, _a, _m| Mat::zeros(1, 1)),
                running: Arc::new(|x, a, m| 0.5 * a[0] * a[0] + x[0] * m.mean()[0]),
                terminal: Arc::new(|x, m| x[0] * m.mean()[0]),
                dx_running: Arc::new(|_x, _a, m| vec![m.mean()[0]]),
                da_running: Arc::new(|_x, a, _m| a.to_vec()),
                dm_running: Arc::new(|x, _a, _m, _y| vec![x[0]]),
                dx_terminal: Arc::new(|_x, m| vec![m.mean()[0]]),
                dm_terminal: Arc::new(|x, _m, _y| vec![x[0]]),
            },
            constant_vol: Some(crate::model::ConstantVolStructure {
                vol: Mat::zeros(1, 1),
                vol0: Mat::zeros(1, 1),
                l0: Arc::new(|_x, a| 0.5 * a[0] * a[0]),
                dx_l0: Arc::new(|_x, _a| vec![0.0]),
                da_l0: Arc::new(|_x, a| a.to_vec()),
                coupling: Arc::new(|x, m| x[0] * m.mean()[0]),
                dx_coupling: Arc::new(|_x, m| vec![m.mean()[0]]),
                dm_coupling: Arc::new(|x, _m, _y| vec![x[0]]),
                reduced_minimizer: Some(Arc::new(|_x, y| vec![-y[0]])),
            }),
            affine: None,
            lq: None,
        };

        // Hand-built "copies": 2 copies, 1 step.
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let layout = EnsembleLayout { paths: 1, particles: 2 };
        let mut ens = PathEnsemble::<f64> {
            grid,
            layout,
            state_dim: 1,
            noise_dim: 1,
            x: vec![0.0; 4],
            y: vec![0.0; 4],
            z: vec![0.0; 4],
            z0: vec![0.0; 4],
            dw: vec![0.0; 2],
            dw0: vec![0.0; 1],
        };
        ens.x_at_mut(0, 0, 0)[0] = 1.0;
        ens.x_at_mut(0, 1, 0)[0] = 3.0;
        ens.x_at_mut(0, 0, 1)[0] = 2.0;
        ens.x_at_mut(0, 1, 1)[0] = 4.0;
        let copies =
            CopiesOutput { ensemble: ens, control: vec![0.0; 4], control_dim: 1, path_index: 0 };
        let flows = [
            Arc::new(EmpiricalMeasure::new(1, vec![1.0, 2.0])),
            Arc::new(EmpiricalMeasure::new(1, vec![2.0, 3.0])),
        ];
        let stats = error_terms(&spec, &copies, &|j| flows[j].clone()).unwrap();
        // node 0: copy mean 2.0, flow mean 1.5:
        //   i=0: 1/2·1 + 2 − 1.5 = 1.0; i=1: 3/2 + 0.5 = 2.0
        let expect_f = (1.0f64.powi(2) + 2.0f64.powi(2)) / 2.0;
        assert!((stats.e_f_sq.unwrap() - expect_f).abs() < 1e-12);
        // terminal node: copy mean 3.0, flow mean 2.5:
        //   i=0: 2/2 + 0.5 = 1.5; i=1: 4/2 + 0.5 = 2.5
        let expect_g = (1.5f64.powi(2) + 2.5f64.powi(2)) / 2.0;
        assert!((stats.e_g_sq.unwrap() - expect_g).abs() < 1e-12);
    }

    #[test]
    fn interaction_free_study_has_vanishing_errors() {
        // f = 0, ρ = 0: the systems coincide up to solver noise.
        let params = LqParams::<f64>::scalar(0.5, 0.0, 0.0, 0.5, 0.5, 0.4, 0.3, 0.6, 0.25);
        let spec = Arc::new(make_lq(&params).unwrap());
        let plan = StudyPlan {
            ns: vec![2, 4],
            trials: 8,
            grid: TimeGrid::new(0.5, 20).unwrap(),
            mkv_particles: 64,
            chaos_k: 2,
            moment_order: 4.0,
            seed: 5,
        };
        let config = SolverConfig { picard_tol: 1e-7, ..SolverConfig::default() };
        let result = run_chaos_study(&spec, &plan, &config).unwrap();
        for entry in &result.entries {
            for t in &entry.per_trial {
                assert!(t.errors.e_f_sq.unwrap() < 1e-25, "E^F must vanish without coupling");
                assert!(t.errors.e_g_sq.unwrap() < 1e-25);
                assert!(t.sup_state_err < 5e-3, "state gap {}", t.sup_state_err);
            }
        }
    }

    #[test]
    fn single_entry_ladder_has_no_slope() {
        let params = LqParams::<f64>::scalar(0.5, 1.0, 0.5, 0.5, 0.25, 0.4, 0.3, 0.6, 0.25);
        let spec = Arc::new(make_lq(&params).unwrap());
        let plan = StudyPlan {
            ns: vec![4],
            trials: 4,
            grid: TimeGrid::new(0.25, 10).unwrap(),
            mkv_particles: 32,
            chaos_k: 2,
            moment_order: 4.0,
            seed: 5,
        };
        let config = SolverConfig { picard_tol: 1e-6, ..SolverConfig::default() };
        let result = run_chaos_study(&spec, &plan, &config).unwrap();
        assert!(result.fitted_slope.is_none());
        assert!(result.observed_moment.is_finite());
    }

    #[test]
    fn coupled_pairing_pinned_at_start() {
        let params = LqParams::<f64>::scalar(0.5, 1.0, 0.5, 0.5, 0.25, 0.4, 0.3, 0.6, 0.25);
        let spec = Arc::new(make_lq(&params).unwrap());
        let grid = TimeGrid::new(0.25, 10).unwrap();
        let config = SolverConfig { picard_tol: 1e-6, ..SolverConfig::default() };
        let seed = 9;
        let trials = 6;
        let mfe = solve_mkv(
            &spec,
            grid,
            EnsembleLayout { paths: trials, particles: 48 },
            &config,
            &EnsembleStreams::trial_block(seed),
        )
        .unwrap();
        let nsol = solve_nplayer(&spec, 3, grid, trials, &config, seed).unwrap();
        let copies = build_copies(&spec, &mfe, 3, trials, seed).unwrap();
        let trace = coupled_lyapunov(&nsol, &copies).unwrap();
        assert_eq!(trace[0], 0.0, "shared initial draws pin the pairing at t = 0");
        let mut direct = 0.0;
        for (t, copy) in copies.iter().enumerate() {
            for i in 0..3 {
                let dx = nsol.ensemble.x_at(t, i, 10)[0] - copy.ensemble.x_at(0, i, 10)[0];
                let dy = nsol.ensemble.y_at(t, i, 10)[0] - copy.ensemble.y_at(0, i, 10)[0];
                direct += dx * dy;
            }
        }
        direct /= trials as f64;
        assert!((trace[10] - direct).abs() < 1e-14);
    }

    #[test]
    fn csv_shapes_and_determinism() {
        let params = LqParams::<f64>::scalar(0.5, 1.0, 0.5, 0.5, 0.25, 0.4, 0.3, 0.6, 0.25);
        let spec = Arc::new(make_lq(&params).unwrap());
        let plan = StudyPlan {
            ns: vec![2, 4, 8],
            trials: 4,
            grid: TimeGrid::new(0.25, 10).unwrap(),
            mkv_particles: 32,
            chaos_k: 2,
            moment_order: 4.0,
            seed: 21,
        };
        let config = SolverConfig { picard_tol: 1e-6, ..SolverConfig::default() };
        let a = run_chaos_study(&spec, &plan, &config).unwrap();
        let b = run_chaos_study(&spec, &plan, &config).unwrap();
        assert_eq!(trials_csv(&a), trials_csv(&b), "reruns must be byte-identical");
        let summary = summary_csv(&a);
        assert_eq!(summary.lines().count(), 4, "3 ladder rows plus header");
        let trials = trials_csv(&a);
        assert_eq!(trials.lines().count(), 1 + 3 * 4);
        let header = trials.lines().next().unwrap();
        assert_eq!(
            header,
            "N,trial,sup_state_err,control_err,chaos_w2,eF_sq,eG_sq,eL_sq,eb_sq,esigma_sq,esigma0_sq,seed"
        );
        let first = trials.lines().nth(1).unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        assert_eq!(fields.len(), 12);
        assert!(!fields[5].is_empty() && fields[7].is_empty());
    }
}
