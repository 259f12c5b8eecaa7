//! Closed-form linear-quadratic benchmark: backward Riccati systems for the
//! mean-field equilibrium with shared noise and for the exchangeable
//! N-player equilibrium, plus exact-feedback path generation.
//!
//! The model is isotropic — running cost |a|²/2 + (q/2)|x|², coupling
//! (f/2)|x − ρ·mean|², terminal (g/2)|x − ρ·mean|², drift equal to the
//! control — so the feedback matrices are scalar multiples of the identity
//! and the scalar pair (p, s) carries everything:
//!
//! ```text
//!   mean-field:   Y_t = p(t)·X_t + s(t)·m̄_t,   m̄_t the conditional mean
//!       ṗ = p² + r·p − (q + f),           p(T) = g
//!       ṡ = s² + 2ps + r·s + fρ,          s(T) = −gρ
//!
//!   N players:    Yⁱ_t = p_N(t)·Xⁱ_t + s_N(t)·m̄ᴺ_t,  c_N = f(1 − ρ/N)
//!       ṗ_N = p_N² + r·p_N − (q + c_N),   p_N(T) = g(1 − ρ/N)
//!       ṡ_N = s_N² + 2p_N s_N + r·s_N + c_N ρ,  s_N(T) = −g(1 − ρ/N)ρ
//! ```
//!
//! These are derived by substituting the linear ansatz into the adjoint
//! equations; they are validated against a dynamic-programming oracle on a
//! 1-d grid before being used as ground truth elsewhere. As N grows the
//! N-player pair converges to (p, s) with an O(1/N) gap, which is the
//! analytic convergence-rate benchmark.
//!
//! The equilibrium cost follows from the second-moment flow: with
//! a(t) = E|X−m̄|² and c(t) = E|m̄|²,
//!
//! ```text
//!   ȧ = −2p·a + tr(ΣΣᵀ),      a(0) = tr(Λ₀)
//!   ċ = −2(p+s)·c + tr(Σ⁰Σ⁰ᵀ), c(0) = |μ₀|²
//!   cost = ∫ e^{−rt} [ (p²a + (p+s)²c)/2 + q(a+c)/2 + f(a + (1−ρ)²c)/2 ] dt
//!          + e^{−rT} g(a_T + (1−ρ)²c_T)/2
//! ```

use crate::error::{MfgError, Result};
use crate::fbsde::PathEnsemble;
use crate::linalg::{self, Mat};
use crate::model::{Dimensions, Horizon};
use crate::num::Scalar;

/// Parameters of the linear-quadratic benchmark family.
#[derive(Debug, Clone)]
pub struct LqParams<T> {
    pub dims: Dimensions,
    pub vol: Mat<T>,
    pub vol0: Mat<T>,
    /// Weight q of the |x|²/2 state cost.
    pub state_cost: T,
    /// Weight f of the |x − ρ·mean|²/2 coupling cost.
    pub coupling_cost: T,
    /// Anchor ρ ∈ [0, 1] toward the population mean.
    pub anchor: T,
    /// Weight g of the terminal |x − ρ·mean|²/2 cost.
    pub terminal_cost: T,
    pub horizon: Horizon<T>,
    pub mean0: Vec<T>,
    pub cov0: Mat<T>,
}

impl<T: Scalar> LqParams<T> {
    /// One-dimensional instance: state, noise, and control dimensions all 1.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        q: f64,
        f: f64,
        rho: f64,
        g: f64,
        t_end: f64,
        sigma: f64,
        sigma0: f64,
        mean0: f64,
        var0: f64,
    ) -> Self {
        LqParams {
            dims: Dimensions { state: 1, noise: 1, control: 1 },
            vol: Mat::from_rows(1, 1, vec![T::of(sigma)]),
            vol0: Mat::from_rows(1, 1, vec![T::of(sigma0)]),
            state_cost: T::of(q),
            coupling_cost: T::of(f),
            anchor: T::of(rho),
            terminal_cost: T::of(g),
            horizon: Horizon::Finite { t_end: T::of(t_end) },
            mean0: vec![T::of(mean0)],
            cov0: Mat::from_rows(1, 1, vec![T::of(var0)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.dims.control != self.dims.state {
            return Err(MfgError::InvalidParams {
                detail: "constant-volatility family requires control dim == state dim".into(),
            });
        }
        if self.state_cost < T::zero()
            || self.coupling_cost < T::zero()
            || self.terminal_cost < T::zero()
        {
            return Err(MfgError::InvalidParams { detail: "cost weights must be nonnegative".into() });
        }
        if self.anchor < T::zero() || self.anchor > T::one() {
            return Err(MfgError::InvalidParams { detail: "anchor must lie in [0, 1]".into() });
        }
        if self.mean0.len() != self.dims.state {
            return Err(MfgError::InvalidParams { detail: "mean0 dimension mismatch".into() });
        }
        if self.horizon.is_discounted() && self.terminal_cost != T::zero() {
            return Err(MfgError::InvalidParams {
                detail: "discounted mode carries no terminal cost".into(),
            });
        }
        if self.horizon.t_end() <= T::zero() {
            return Err(MfgError::InvalidParams { detail: "horizon must be positive".into() });
        }
        Ok(())
    }

    /// Convexity/monotonicity constants (C_L, C_F, C_G) of this instance:
    /// C_L = 1 by the |a|²/2 normalization, C_F = f(1−ρ), C_G = g(1−ρ).
    pub fn monotonicity_constants(&self) -> (T, T, T) {
        let one = T::one();
        (
            one,
            self.coupling_cost * (one - self.anchor),
            self.terminal_cost * (one - self.anchor),
        )
    }
}

/// Time-gridded scalar feedback pair plus moment flow and equilibrium cost.
#[derive(Debug, Clone)]
pub struct RiccatiSolution<T> {
    pub t_end: T,
    pub rate: T,
    /// `None` for the mean-field solution, `Some(N)` for the N-player one.
    pub n_players: Option<usize>,
    ts: Vec<T>,
    p: Vec<T>,
    s: Vec<T>,
    /// E|X − m̄|² along the equilibrium.
    pub deviation_m2: Vec<T>,
    /// E|m̄|² along the equilibrium.
    pub mean_sq: Vec<T>,
    /// E[X] along the equilibrium (flattened, state-dim per node).
    means: Vec<T>,
    pub y0_mean: Vec<T>,
    pub cost: T,
    state_dim: usize,
}

impl<T: Scalar> RiccatiSolution<T> {
    fn locate(&self, t: T) -> (usize, T) {
        let m = self.ts.len() - 1;
        let dt = self.ts[1] - self.ts[0];
        let pos = (t / dt).to_f64x().floor() as usize;
        let i = pos.min(m - 1);
        let w = (t - self.ts[i]) / dt;
        (i, w.max(T::zero()).min(T::one()))
    }

    pub fn p_at(&self, t: T) -> T {
        let (i, w) = self.locate(t);
        self.p[i] + w * (self.p[i + 1] - self.p[i])
    }

    pub fn s_at(&self, t: T) -> T {
        let (i, w) = self.locate(t);
        self.s[i] + w * (self.s[i + 1] - self.s[i])
    }

    pub fn mean_at(&self, t: T) -> Vec<T> {
        let (i, w) = self.locate(t);
        let n = self.state_dim;
        (0..n)
            .map(|c| {
                let lo = self.means[i * n + c];
                let hi = self.means[(i + 1) * n + c];
                lo + w * (hi - lo)
            })
            .collect()
    }

    pub fn terminal_p(&self) -> T {
        *self.p.last().expect("non-empty grid")
    }
}

const FINE_STEPS: usize = 10_000;
const BLOWUP_LIMIT: f64 = 1e7;

fn rk4_backward<T: Scalar>(
    t_end: T,
    steps: usize,
    terminal: [T; 2],
    f: impl Fn(T, [T; 2]) -> [T; 2],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let dt = t_end / T::of_usize(steps);
    let mut ts = vec![T::zero(); steps + 1];
    let mut p = vec![T::zero(); steps + 1];
    let mut s = vec![T::zero(); steps + 1];
    for (i, t) in ts.iter_mut().enumerate() {
        *t = dt * T::of_usize(i);
    }
    p[steps] = terminal[0];
    s[steps] = terminal[1];
    let half = T::of(0.5);
    let sixth = T::of(1.0 / 6.0);
    for i in (0..steps).rev() {
        let t1 = ts[i + 1];
        let v = [p[i + 1], s[i + 1]];
        let k1 = f(t1, v);
        let k2 = f(t1 - half * dt, [v[0] - half * dt * k1[0], v[1] - half * dt * k1[1]]);
        let k3 = f(t1 - half * dt, [v[0] - half * dt * k2[0], v[1] - half * dt * k2[1]]);
        let k4 = f(t1 - dt, [v[0] - dt * k3[0], v[1] - dt * k3[1]]);
        p[i] = v[0] - dt * sixth * (k1[0] + T::of(2.0) * (k2[0] + k3[0]) + k4[0]);
        s[i] = v[1] - dt * sixth * (k1[1] + T::of(2.0) * (k2[1] + k3[1]) + k4[1]);
        if p[i].abs().to_f64x() > BLOWUP_LIMIT || s[i].abs().to_f64x() > BLOWUP_LIMIT {
            return Err(MfgError::NonFiniteState {
                detail: format!("feedback blow-up at t={} (non-monotone parameters)", ts[i]),
            });
        }
    }
    Ok((ts, p, s))
}

fn solve_feedback<T: Scalar>(
    params: &LqParams<T>,
    n_players: Option<usize>,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let q = params.state_cost;
    let g = params.terminal_cost;
    let rho = params.anchor;
    let rate = params.horizon.rate();
    let t_end = params.horizon.t_end();
    // Effective coupling: the N-player system sees f(1 − ρ/N) through the
    // 1/N measure-derivative contributions; N → ∞ recovers f.
    let (coupling, g_eff) = match n_players {
        Some(n) => {
            let shrink = T::one() - rho / T::of_usize(n);
            (params.coupling_cost * shrink, g * shrink)
        }
        None => (params.coupling_cost, g),
    };
    let terminal = match params.horizon {
        Horizon::Finite { .. } => [g_eff, -g_eff * rho],
        Horizon::Discounted { .. } => [T::zero(), T::zero()],
    };
    let discounted = params.horizon.is_discounted();
    rk4_backward(t_end, FINE_STEPS, terminal, move |_t, v| {
        let [p, s] = v;
        let mut dp = p * p - (q + coupling);
        let mut ds = s * s + T::of(2.0) * p * s + coupling * rho;
        if discounted {
            dp += rate * p;
            ds += rate * s;
        }
        [dp, ds]
    })
}

fn finish_solution<T: Scalar>(
    params: &LqParams<T>,
    n_players: Option<usize>,
    ts: Vec<T>,
    p: Vec<T>,
    s: Vec<T>,
) -> RiccatiSolution<T> {
    let n = params.dims.state;
    let steps = ts.len() - 1;
    let dt = ts[1] - ts[0];
    let rate = params.horizon.rate();
    let discounted = params.horizon.is_discounted();
    let q = params.state_cost;
    let f = params.coupling_cost;
    let rho = params.anchor;
    let g = params.terminal_cost;

    let tr = |m: &Mat<T>| -> T {
        let mut acc = T::zero();
        for v in &m.data {
            acc += *v * *v;
        }
        acc
    };
    let vol_tr = tr(&params.vol);
    let vol0_tr = tr(&params.vol0);

    let mut a = vec![T::zero(); steps + 1];
    let mut c = vec![T::zero(); steps + 1];
    let mut means = vec![T::zero(); (steps + 1) * n];
    a[0] = {
        let mut acc = T::zero();
        for i in 0..n {
            acc += params.cov0.at(i, i);
        }
        acc
    };
    c[0] = linalg::norm2_sq(&params.mean0);
    means[..n].copy_from_slice(&params.mean0);

    // Heun steps for the forward moment flow; the feedback is already on
    // this grid.
    let half = T::of(0.5);
    for i in 0..steps {
        let da = |a: T, p: T| -(p + p) * a + vol_tr;
        let dc = |c: T, ps: T| -(ps + ps) * c + vol0_tr;
        let ps0 = p[i] + s[i];
        let ps1 = p[i + 1] + s[i + 1];
        let a_pred = a[i] + dt * da(a[i], p[i]);
        a[i + 1] = a[i] + half * dt * (da(a[i], p[i]) + da(a_pred, p[i + 1]));
        let c_pred = c[i] + dt * dc(c[i], ps0);
        c[i + 1] = c[i] + half * dt * (dc(c[i], ps0) + dc(c_pred, ps1));
        for comp in 0..n {
            let mu = means[i * n + comp];
            let mu_pred = mu - dt * ps0 * mu;
            means[(i + 1) * n + comp] = mu - half * dt * (ps0 * mu + ps1 * mu_pred);
        }
    }

    // Left-endpoint cost quadrature on the fine grid.
    let one = T::one();
    let mut cost = T::zero();
    for i in 0..steps {
        let w = if discounted { (-rate * ts[i]).exp() } else { one };
        let ps = p[i] + s[i];
        let control_sq = p[i] * p[i] * a[i] + ps * ps * c[i];
        let anchor_sq = a[i] + (one - rho) * (one - rho) * c[i];
        let integrand =
            half * control_sq + half * q * (a[i] + c[i]) + half * f * anchor_sq;
        cost += w * integrand * dt;
    }
    if !discounted {
        let anchor_sq = a[steps] + (one - rho) * (one - rho) * c[steps];
        cost += half * g * anchor_sq;
    }

    let y0 = p[0] + s[0];
    let y0_mean: Vec<T> = params.mean0.iter().map(|&m| y0 * m).collect();

    RiccatiSolution {
        t_end: params.horizon.t_end(),
        rate,
        n_players,
        ts,
        p,
        s,
        deviation_m2: a,
        mean_sq: c,
        means,
        y0_mean,
        cost,
        state_dim: n,
    }
}

/// Mean-field feedback, moment flow, and equilibrium cost.
pub fn solve_riccati_mfe<T: Scalar>(params: &LqParams<T>) -> Result<RiccatiSolution<T>> {
    params.validate()?;
    let (ts, p, s) = solve_feedback(params, None)?;
    Ok(finish_solution(params, None, ts, p, s))
}

/// Exact N-player feedback including the 1/N measure-derivative
/// contributions to driver and terminal condition.
pub fn solve_riccati_nplayer<T: Scalar>(
    params: &LqParams<T>,
    n_players: usize,
) -> Result<RiccatiSolution<T>> {
    params.validate()?;
    if n_players == 0 {
        return Err(MfgError::InvalidParams { detail: "need at least one player".into() });
    }
    let (ts, p, s) = solve_feedback(params, Some(n_players))?;
    Ok(finish_solution(params, Some(n_players), ts, p, s))
}

/// Stationary feedback of the discounted problem, found by integrating
/// backward until the relative change per unit time drops below 1e-12.
pub fn stationary_feedback<T: Scalar>(params: &LqParams<T>) -> Result<(T, T)> {
    if !params.horizon.is_discounted() {
        return Err(MfgError::InvalidParams { detail: "stationary feedback needs discounted mode".into() });
    }
    let rate = params.horizon.rate();
    let q = params.state_cost;
    let f = params.coupling_cost;
    let rho = params.anchor;
    let mut p = T::zero();
    let mut s = T::zero();
    for _ in 0..10_000 {
        let (_, pv, sv) = rk4_backward(T::one(), 64, [p, s], move |_t, v| {
            let [p, s] = v;
            [p * p + rate * p - (q + f), s * s + T::of(2.0) * p * s + rate * s + f * rho]
        })?;
        let (np, ns) = (pv[0], sv[0]);
        let change = (np - p).abs().max((ns - s).abs());
        p = np;
        s = ns;
        if change <= T::of(1e-12) {
            return Ok((p, s));
        }
    }
    Err(MfgError::NoConvergence { iters: 10_000, residual: f64::NAN })
}

/// Simulate exact-feedback trajectories with the noise of `template`,
/// producing ground-truth (X, Y, Z, Z⁰) for comparison against solver
/// output. The mean-field variant drives the conditional mean by its own
/// shared-noise equation; the N-player variant closes it with the empirical
/// mean of the particles in each path.
pub fn oracle_paths<T: Scalar>(
    sol: &RiccatiSolution<T>,
    params: &LqParams<T>,
    template: &PathEnsemble<T>,
) -> PathEnsemble<T> {
    let mut ens = template.clone_noise_only();
    let n = params.dims.state;
    let d = params.dims.noise;
    let nodes = ens.grid.n_nodes();
    let dt = ens.grid.dt();
    let paths = ens.layout.paths;
    let particles = ens.layout.particles;

    for path in 0..paths {
        // Conditional mean driven by the shared noise only (mean-field) or
        // computed from the particle block (N players).
        let mut mean: Vec<T> = params.mean0.clone();
        for j in 0..nodes {
            let t = ens.grid.node_time(j);
            let p = sol.p_at(t);
            let s = sol.s_at(t);
            if sol.n_players.is_some() {
                // empirical mean of this path's particles
                for c in 0..n {
                    mean[c] = T::zero();
                }
                for m in 0..particles {
                    let x = ens.x_at(path, m, j);
                    for c in 0..n {
                        mean[c] += x[c];
                    }
                }
                let inv = T::one() / T::of_usize(particles);
                for c in 0..n {
                    mean[c] *= inv;
                }
            }
            for m in 0..particles {
                let x: Vec<T> = ens.x_at(path, m, j).to_vec();
                // Y = pX + s·mean, Z = pΣ, Z0 = (p+s)Σ⁰
                for c in 0..n {
                    ens.y_at_mut(path, m, j)[c] = p * x[c] + s * mean[c];
                }
                {
                    let z = ens.z_at_mut(path, m, j);
                    for (zi, &v) in z.iter_mut().zip(params.vol.data.iter()) {
                        *zi = p * v;
                    }
                }
                {
                    let z0 = ens.z0_at_mut(path, m, j);
                    for (zi, &v) in z0.iter_mut().zip(params.vol0.data.iter()) {
                        *zi = (p + s) * v;
                    }
                }
                if j + 1 < nodes {
                    let mut next = vec![T::zero(); n];
                    let dw: Vec<T> = ens.dw_at(path, m, j).to_vec();
                    let dw0: Vec<T> = ens.dw0_at(path, j).to_vec();
                    for c in 0..n {
                        let mut v = x[c] - dt * (p * x[c] + s * mean[c]);
                        for e in 0..d {
                            v += params.vol.at(c, e) * dw[e];
                            v += params.vol0.at(c, e) * dw0[e];
                        }
                        next[c] = v;
                    }
                    ens.x_at_mut(path, m, j + 1).copy_from_slice(&next);
                }
            }
            if sol.n_players.is_none() && j + 1 < nodes {
                let p_s = p + s;
                let dw0: Vec<T> = ens.dw0_at(path, j).to_vec();
                for c in 0..n {
                    let mut v = mean[c] - dt * p_s * mean[c];
                    for e in 0..d {
                        v += params.vol0.at(c, e) * dw0[e];
                    }
                    mean[c] = v;
                }
            }
        }
    }
    ens
}
