//! Time-discretized solver for fully coupled forward-backward SDE systems on
//! a path ensemble: Euler forward pass, least-squares Monte Carlo backward
//! pass, damped Picard iteration, and a homotopy continuation wrapper for
//! strongly coupled long-horizon instances.
//!
//! Conventions fixed here and used everywhere else:
//!
//! * the forward step is Euler-Maruyama,
//!   `X_{j+1} = X_j + B·dt + S·(ΔW_j, ΔW⁰_j)`, with `S` an n×2d block
//!   `[idiosyncratic | common]`;
//! * the driver enters the backward recursion as
//!   `Y_j = E[ Y_{j+1} + f(t_j, X_j, Y_{j+1}, Z_j, Z⁰_j, m_j)·dt | X_j, m_j ]`,
//!   i.e. `f` is the negative of the drift of `Y`;
//! * conditional expectations are least-squares regressions on a per-node
//!   basis of polynomials in the own state up to degree two plus the
//!   conditional-law features (the mean of the particles sharing the
//!   common-noise path, and its squared norm);
//! * `Z_j` and `Z⁰_j` are regressions of `(Y_{j+1} − Ê[Y_{j+1}|·])·ΔW/dt`;
//!   the conditional-mean control variate leaves the projection unchanged
//!   and removes the O(|X|²/dt) variance of the raw product estimator.
//!
//! Noise is generated once per ensemble from counter-based streams keyed by
//! (seed, role, path, particle), consumed node-major, so enlarging a
//! population preserves the noise of earlier particles.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{MfgError, Result};
use crate::linalg::{self, Mat};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::num::Scalar;
use crate::rng::CounterStream;

// ---------------------------------------------------------------------------
// Grid, layout, ensemble
// ---------------------------------------------------------------------------

/// Uniform grid on [0, horizon] with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    pub horizon: T,
    pub steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 || horizon <= T::zero() {
            return Err(MfgError::InvalidParams { detail: "grid needs steps ≥ 1, horizon > 0".into() });
        }
        Ok(TimeGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.horizon / T::of_usize(self.steps)
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn node_time(&self, j: usize) -> T {
        self.dt() * T::of_usize(j)
    }
}

/// Common-noise paths × particles per path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleLayout {
    pub paths: usize,
    pub particles: usize,
}

/// Time-gridded state of a forward-backward system across Monte Carlo
/// particles, together with the Brownian increments that drive it. The
/// common-noise increments are shared by all particles of a path.
///
/// Flat layouts (row-major, slow to fast):
/// `x, y`: path, particle, node, state component;
/// `z, z0`: path, particle, node, state×noise component;
/// `dw`: path, particle, step, noise component;
/// `dw0`: path, step, noise component.
#[derive(Debug, Clone)]
pub struct PathEnsemble<T> {
    pub grid: TimeGrid<T>,
    pub layout: EnsembleLayout,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub z0: Vec<T>,
    pub dw: Vec<T>,
    pub dw0: Vec<T>,
}

macro_rules! vec_idx {
    ($self:ident, $p:expr, $m:expr, $j:expr) => {
        (($p * $self.layout.particles + $m) * $self.grid.n_nodes() + $j) * $self.state_dim
    };
}

macro_rules! matz_idx {
    ($self:ident, $p:expr, $m:expr, $j:expr) => {
        (($p * $self.layout.particles + $m) * $self.grid.n_nodes() + $j)
            * $self.state_dim
            * $self.noise_dim
    };
}

impl<T: Scalar> PathEnsemble<T> {
    /// Allocate an ensemble and draw its initial states and Brownian
    /// increments. Each macro increment is the aggregate of `substeps`
    /// fine-grid draws, so ensembles on refined grids built with matching
    /// substep counts share the same underlying Brownian paths.
    pub fn generate(
        grid: TimeGrid<T>,
        layout: EnsembleLayout,
        state_dim: usize,
        noise_dim: usize,
        substeps: usize,
        sampler: &dyn Fn(&mut CounterStream, &mut [T]),
        common_stream: &dyn Fn(usize) -> CounterStream,
        idio_stream: &dyn Fn(usize, usize) -> CounterStream,
        init_stream: &dyn Fn(usize, usize) -> CounterStream,
    ) -> Self {
        assert!(substeps >= 1);
        let nodes = grid.n_nodes();
        let pm = layout.paths * layout.particles;
        let mut ens = PathEnsemble {
            grid,
            layout,
            state_dim,
            noise_dim,
            x: vec![T::zero(); pm * nodes * state_dim],
            y: vec![T::zero(); pm * nodes * state_dim],
            z: vec![T::zero(); pm * nodes * state_dim * noise_dim],
            z0: vec![T::zero(); pm * nodes * state_dim * noise_dim],
            dw: vec![T::zero(); pm * grid.steps * noise_dim],
            dw0: vec![T::zero(); layout.paths * grid.steps * noise_dim],
        };
        let root_sub_dt = (grid.dt() / T::of_usize(substeps)).sqrt();
        for p in 0..layout.paths {
            let mut cs = common_stream(p);
            for j in 0..grid.steps {
                for c in 0..noise_dim {
                    let mut acc = T::zero();
                    for _ in 0..substeps {
                        acc += T::of(cs.normal()) * root_sub_dt;
                    }
                    ens.dw0[(p * grid.steps + j) * noise_dim + c] = acc;
                }
            }
            for m in 0..layout.particles {
                let mut is = idio_stream(p, m);
                for j in 0..grid.steps {
                    for c in 0..noise_dim {
                        let mut acc = T::zero();
                        for _ in 0..substeps {
                            acc += T::of(is.normal()) * root_sub_dt;
                        }
                        ens.dw[((p * layout.particles + m) * grid.steps + j) * noise_dim + c] = acc;
                    }
                }
                let mut st = init_stream(p, m);
                let base = vec_idx!(ens, p, m, 0);
                sampler(&mut st, &mut ens.x[base..base + state_dim]);
            }
        }
        ens
    }

    #[inline]
    pub fn x_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let b = vec_idx!(self, p, m, j);
        &self.x[b..b + self.state_dim]
    }

    #[inline]
    pub fn x_at_mut(&mut self, p: usize, m: usize, j: usize) -> &mut [T] {
        let b = vec_idx!(self, p, m, j);
        &mut self.x[b..b + self.state_dim]
    }

    #[inline]
    pub fn y_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let b = vec_idx!(self, p, m, j);
        &self.y[b..b + self.state_dim]
    }

    #[inline]
    pub fn y_at_mut(&mut self, p: usize, m: usize, j: usize) -> &mut [T] {
        let b = vec_idx!(self, p, m, j);
        &mut self.y[b..b + self.state_dim]
    }

    #[inline]
    pub fn z_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let b = matz_idx!(self, p, m, j);
        &self.z[b..b + self.state_dim * self.noise_dim]
    }

    #[inline]
    pub fn z_at_mut(&mut self, p: usize, m: usize, j: usize) -> &mut [T] {
        let b = matz_idx!(self, p, m, j);
        &mut self.z[b..b + self.state_dim * self.noise_dim]
    }

    #[inline]
    pub fn z0_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let b = matz_idx!(self, p, m, j);
        &self.z0[b..b + self.state_dim * self.noise_dim]
    }

    #[inline]
    pub fn z0_at_mut(&mut self, p: usize, m: usize, j: usize) -> &mut [T] {
        let b = matz_idx!(self, p, m, j);
        &mut self.z0[b..b + self.state_dim * self.noise_dim]
    }

    #[inline]
    pub fn dw_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let b = ((p * self.layout.particles + m) * self.grid.steps + j) * self.noise_dim;
        &self.dw[b..b + self.noise_dim]
    }

    #[inline]
    pub fn dw0_at(&self, p: usize, j: usize) -> &[T] {
        let b = (p * self.grid.steps + j) * self.noise_dim;
        &self.dw0[b..b + self.noise_dim]
    }

    /// Copy with the same noise and initial states, all solution arrays
    /// zeroed.
    pub fn clone_noise_only(&self) -> Self {
        let mut out = self.clone();
        let nodes = self.grid.n_nodes();
        for p in 0..self.layout.paths {
            for m in 0..self.layout.particles {
                for j in 1..nodes {
                    for v in out.x_at_mut(p, m, j) {
                        *v = T::zero();
                    }
                }
            }
        }
        out.y.iter_mut().for_each(|v| *v = T::zero());
        out.z.iter_mut().for_each(|v| *v = T::zero());
        out.z0.iter_mut().for_each(|v| *v = T::zero());
        out
    }

    /// Overall sample variance of the idiosyncratic increments relative to
    /// dt; a sanity figure, not an exact statistic.
    pub fn dw_variance_ratio(&self) -> f64 {
        let dt = self.grid.dt().to_f64x();
        let n = self.dw.len();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for v in &self.dw {
            let f = v.to_f64x();
            sum += f;
            sumsq += f * f;
        }
        let mean = sum / n as f64;
        (sumsq / n as f64 - mean * mean) / dt
    }

    pub fn assert_finite(&self, limit: T) -> Result<()> {
        for (name, arr) in [("x", &self.x), ("y", &self.y)] {
            for v in arr.iter() {
                if !v.is_finite() || v.abs() > limit {
                    return Err(MfgError::NonFiniteState {
                        detail: format!("{name} entry {v} beyond limit {limit}"),
                    });
                }
            }
        }
        Ok(())
    }

    // -- serialization: flat binary, little-endian f64 ----------------------

    const MAGIC: &'static [u8; 8] = b"MFGENS01";

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        for v in [
            self.state_dim as u64,
            self.noise_dim as u64,
            self.grid.steps as u64,
            self.layout.paths as u64,
            self.layout.particles as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.horizon.to_f64x().to_le_bytes())?;
        for arr in [&self.x, &self.y, &self.z, &self.z0, &self.dw, &self.dw0] {
            for v in arr.iter() {
                w.write_all(&v.to_f64x().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(MfgError::Serialization { detail: "bad ensemble magic".into() });
        }
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let state_dim = next_u64(r)? as usize;
        let noise_dim = next_u64(r)? as usize;
        let steps = next_u64(r)? as usize;
        let paths = next_u64(r)? as usize;
        let particles = next_u64(r)? as usize;
        let mut f = [0u8; 8];
        r.read_exact(&mut f)?;
        let horizon = T::of(f64::from_le_bytes(f));
        let grid = TimeGrid::new(horizon, steps)?;
        let layout = EnsembleLayout { paths, particles };
        let nodes = grid.n_nodes();
        let pm = paths * particles;
        let sizes = [
            pm * nodes * state_dim,
            pm * nodes * state_dim,
            pm * nodes * state_dim * noise_dim,
            pm * nodes * state_dim * noise_dim,
            pm * steps * noise_dim,
            paths * steps * noise_dim,
        ];
        let mut arrays: Vec<Vec<T>> = Vec::with_capacity(6);
        for sz in sizes {
            let mut a = vec![T::zero(); sz];
            for v in a.iter_mut() {
                r.read_exact(&mut f)?;
                *v = T::of(f64::from_le_bytes(f));
            }
            arrays.push(a);
        }
        let dw0 = arrays.pop().unwrap();
        let dw = arrays.pop().unwrap();
        let z0 = arrays.pop().unwrap();
        let z = arrays.pop().unwrap();
        let y = arrays.pop().unwrap();
        let x = arrays.pop().unwrap();
        Ok(PathEnsemble { grid, layout, state_dim, noise_dim, x, y, z, z0, dw, dw0 })
    }
}

// ---------------------------------------------------------------------------
// Coefficients, config, sources
// ---------------------------------------------------------------------------

pub type CoeffFn<T> = Arc<
    dyn Fn(T, &[T], &[T], &[T], &[T], &EmpiricalMeasure<T>, &mut [T]) + Send + Sync,
>;
pub type TerminalFn<T> = Arc<dyn Fn(&[T], &EmpiricalMeasure<T>, &mut [T]) + Send + Sync>;

/// Generic coefficients of a forward-backward system:
/// drift and volatility of the forward state, driver of the backward
/// recursion, and the terminal map.
#[derive(Clone)]
pub struct FbsdeCoefficients<T> {
    pub state_dim: usize,
    pub noise_dim: usize,
    /// B(t, x, y, z, z⁰, m) ∈ ℝⁿ.
    pub drift: CoeffFn<T>,
    /// S(t, x, y, z, z⁰, m) ∈ ℝ^{n×2d}, columns `[idiosyncratic | common]`.
    pub vol: CoeffFn<T>,
    /// f(t, x, y, z, z⁰, m) ∈ ℝⁿ in the recursion Y_j = E[Y_{j+1} + f·dt].
    pub driver: CoeffFn<T>,
    /// g(x, m) ∈ ℝⁿ.
    pub terminal: TerminalFn<T>,
}

impl<T: Scalar> FbsdeCoefficients<T> {
    /// Homotopy blend toward the contractive linear system: at `delta = 0`
    /// the drift is −y, the volatility −[z|z⁰], the driver x, and the
    /// terminal map x; at `delta = 1` the base system is recovered.
    pub fn blend(&self, delta: T) -> FbsdeCoefficients<T> {
        let one_m = T::one() - delta;
        let n = self.state_dim;
        let d = self.noise_dim;
        let base_drift = self.drift.clone();
        let drift: CoeffFn<T> = Arc::new(move |t, x, y, z, z0, m, out| {
            base_drift(t, x, y, z, z0, m, out);
            for c in 0..n {
                out[c] = delta * out[c] - one_m * y[c];
            }
        });
        let base_vol = self.vol.clone();
        let vol: CoeffFn<T> = Arc::new(move |t, x, y, z, z0, m, out| {
            base_vol(t, x, y, z, z0, m, out);
            for c in 0..n {
                for e in 0..d {
                    out[c * 2 * d + e] = delta * out[c * 2 * d + e] - one_m * z[c * d + e];
                    out[c * 2 * d + d + e] =
                        delta * out[c * 2 * d + d + e] - one_m * z0[c * d + e];
                }
            }
        });
        let base_driver = self.driver.clone();
        let driver: CoeffFn<T> = Arc::new(move |t, x, y, z, z0, m, out| {
            base_driver(t, x, y, z, z0, m, out);
            for c in 0..n {
                out[c] = delta * out[c] + one_m * x[c];
            }
        });
        let base_terminal = self.terminal.clone();
        let terminal: TerminalFn<T> = Arc::new(move |x, m, out| {
            base_terminal(x, m, out);
            for c in 0..n {
                out[c] = delta * out[c] + one_m * x[c];
            }
        });
        FbsdeCoefficients { state_dim: n, noise_dim: d, drift, vol, driver, terminal }
    }
}

/// Solver knobs. Defaults: damping 0.5, tolerance 1e-6 on the sup-norm
/// change of (X, Y), 200 Picard iterations, homotopy step 0.1 with
/// halve-and-retry down to 1/64, blow-up guard at 1e8.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig<T> {
    pub damping: T,
    pub picard_tol: T,
    pub picard_max_iters: usize,
    pub homotopy_step: T,
    pub homotopy_step_floor: T,
    pub psi_max_iters: usize,
    pub blowup_limit: T,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            damping: T::of(0.5),
            picard_tol: T::of(1e-6),
            picard_max_iters: 200,
            homotopy_step: T::of(0.1),
            homotopy_step_floor: T::of(1.0 / 64.0),
            psi_max_iters: 40,
            blowup_limit: T::of(1e8),
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.damping <= T::zero() || self.damping > T::one() {
            return Err(MfgError::InvalidParams { detail: "damping must lie in (0, 1]".into() });
        }
        if self.picard_tol <= T::zero() || self.homotopy_step <= T::zero() {
            return Err(MfgError::InvalidParams { detail: "tolerances must be positive".into() });
        }
        Ok(())
    }
}

/// Per-(path, particle, node) additive source terms used by the homotopy
/// map: drift and driver sources multiply dt, the volatility source
/// multiplies the Brownian increments, the terminal source adds to the
/// terminal condition.
#[derive(Debug, Clone)]
pub struct SourceTerms<T> {
    pub drift: Vec<T>,
    pub vol: Vec<T>,
    pub driver: Vec<T>,
    pub terminal: Vec<T>,
}

impl<T: Scalar> SourceTerms<T> {
    fn zeros(ens: &PathEnsemble<T>) -> Self {
        let pm = ens.layout.paths * ens.layout.particles;
        let nodes = ens.grid.n_nodes();
        let n = ens.state_dim;
        let d = ens.noise_dim;
        SourceTerms {
            drift: vec![T::zero(); pm * nodes * n],
            vol: vec![T::zero(); pm * nodes * n * 2 * d],
            driver: vec![T::zero(); pm * nodes * n],
            terminal: vec![T::zero(); pm * n],
        }
    }
}

/// Flow policy for a solve: a frozen flow (mean-field iterations hold the
/// population law fixed) or the self-consistent empirical law of the
/// particles sharing each common-noise path (finite-player systems).
pub enum FlowPolicy<'a, T> {
    Frozen(&'a MeasureFlow<T>),
    SelfConsistent,
}

// ---------------------------------------------------------------------------
// Regression basis and fitted maps
// ---------------------------------------------------------------------------

/// Per-node regression basis: 1, x, upper-triangle xxᵀ, conditional mean,
/// |conditional mean|². Exact for linear-quadratic decoupling fields, which
/// are affine in the state and the conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionBasis {
    pub state_dim: usize,
}

impl RegressionBasis {
    pub fn size(&self) -> usize {
        let n = self.state_dim;
        2 + 2 * n + n * (n + 1) / 2
    }

    pub fn fill<T: Scalar>(&self, x: &[T], mean: &[T], out: &mut [T]) {
        let n = self.state_dim;
        out[0] = T::one();
        out[1..1 + n].copy_from_slice(x);
        let mut k = 1 + n;
        for i in 0..n {
            for j in i..n {
                out[k] = x[i] * x[j];
                k += 1;
            }
        }
        out[k..k + n].copy_from_slice(mean);
        k += n;
        out[k] = linalg::norm2_sq(mean);
    }
}

/// Fitted conditional-expectation maps at one node.
#[derive(Debug, Clone)]
pub struct NodeMaps<T> {
    /// B×n coefficients of the Y-projection.
    pub coef_y: Mat<T>,
    /// B×(n·d) coefficients of the Z-projection.
    pub coef_z: Mat<T>,
    /// B×(n·d) coefficients of the Z⁰-projection.
    pub coef_z0: Mat<T>,
}

/// Regression-fitted decoupling maps for nodes 0..steps−1; the terminal node
/// is served by the terminal map itself.
#[derive(Debug, Clone)]
pub struct DecouplingMaps<T> {
    pub basis: RegressionBasis,
    pub nodes: Vec<NodeMaps<T>>,
}

impl<T: Scalar> DecouplingMaps<T> {
    fn blend_from(&mut self, fresh: DecouplingMaps<T>, theta: T) {
        let keep = T::one() - theta;
        for (old, new) in self.nodes.iter_mut().zip(fresh.nodes) {
            for (o, v) in old.coef_y.data.iter_mut().zip(new.coef_y.data) {
                *o = keep * *o + theta * v;
            }
            for (o, v) in old.coef_z.data.iter_mut().zip(new.coef_z.data) {
                *o = keep * *o + theta * v;
            }
            for (o, v) in old.coef_z0.data.iter_mut().zip(new.coef_z0.data) {
                *o = keep * *o + theta * v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn measure_of_node<T: Scalar>(ens: &PathEnsemble<T>, p: usize, j: usize) -> Arc<EmpiricalMeasure<T>> {
    let n = ens.state_dim;
    let mut atoms = Vec::with_capacity(ens.layout.particles * n);
    for m in 0..ens.layout.particles {
        atoms.extend_from_slice(ens.x_at(p, m, j));
    }
    Arc::new(EmpiricalMeasure::new(n, atoms))
}

/// Euler forward sweep using the current (stale) Y, Z, Z⁰ arrays of the
/// ensemble. Returns the measure flow the coefficients saw.
pub fn forward_pass<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    sources: Option<&SourceTerms<T>>,
    blowup_limit: T,
) -> Result<MeasureFlow<T>> {
    let n = ens.state_dim;
    let d = ens.noise_dim;
    let nodes = ens.grid.n_nodes();
    let dt = ens.grid.dt();
    let mut realized: Vec<Arc<EmpiricalMeasure<T>>> = Vec::new();
    if matches!(policy, FlowPolicy::SelfConsistent) {
        realized = Vec::with_capacity(ens.layout.paths * nodes);
    }

    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * 2 * d];
    for p in 0..ens.layout.paths {
        for j in 0..nodes {
            let m_arc = match policy {
                FlowPolicy::Frozen(flow) => flow.at(p, j).clone(),
                FlowPolicy::SelfConsistent => {
                    let m = measure_of_node(ens, p, j);
                    realized.push(m.clone());
                    m
                }
            };
            if j + 1 >= nodes {
                continue;
            }
            let t = ens.grid.node_time(j);
            for m in 0..ens.layout.particles {
                let xb = vec_idx!(ens, p, m, j);
                let yb = xb;
                let zb = matz_idx!(ens, p, m, j);
                {
                    let x = &ens.x[xb..xb + n];
                    let y = &ens.y[yb..yb + n];
                    let z = &ens.z[zb..zb + n * d];
                    let z0 = &ens.z0[zb..zb + n * d];
                    (coeffs.drift)(t, x, y, z, z0, &m_arc, &mut b);
                    (coeffs.vol)(t, x, y, z, z0, &m_arc, &mut s);
                }
                if let Some(src) = sources {
                    let sb = ((p * ens.layout.particles + m) * nodes + j) * n;
                    for c in 0..n {
                        b[c] += src.drift[sb + c];
                    }
                    let vb = ((p * ens.layout.particles + m) * nodes + j) * n * 2 * d;
                    for c in 0..n * 2 * d {
                        s[c] += src.vol[vb + c];
                    }
                }
                let dwb = ((p * ens.layout.particles + m) * ens.grid.steps + j) * d;
                let dw0b = (p * ens.grid.steps + j) * d;
                let next = vec_idx!(ens, p, m, j + 1);
                for c in 0..n {
                    let mut v = ens.x[xb + c] + b[c] * dt;
                    for e in 0..d {
                        v += s[c * 2 * d + e] * ens.dw[dwb + e];
                        v += s[c * 2 * d + d + e] * ens.dw0[dw0b + e];
                    }
                    if !v.is_finite() || v.abs() > blowup_limit {
                        return Err(MfgError::NonFiniteState {
                            detail: format!("state blow-up at path {p}, node {j}"),
                        });
                    }
                    ens.x[next + c] = v;
                }
            }
        }
    }
    Ok(match policy {
        FlowPolicy::Frozen(flow) => (*flow).clone(),
        FlowPolicy::SelfConsistent => MeasureFlow::new(ens.layout.paths, nodes, realized),
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Output of one backward sweep: proposal arrays for (Y, Z, Z⁰), the fitted
/// maps, and the per-node RMS of the Y-projection residual (the martingale
/// content the basis could not explain).
pub struct BackwardOutput<T> {
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub z0: Vec<T>,
    pub maps: DecouplingMaps<T>,
    pub node_residual_rms: Vec<f64>,
}

const GRAM_DROP_TOL: f64 = 1e-8;

/// Least-squares Monte Carlo backward sweep. Reads X and the increments,
/// produces proposals without touching the ensemble.
///
/// The Y-projection is cross-fitted: samples are split into two folds, each
/// fold's coefficients are fitted on the other fold, and the recursion
/// carries out-of-fold fitted values. Fitted-value noise at one node is
/// then independent of the design it meets at the next node, which removes
/// the look-ahead bias that otherwise compounds multiplicatively through
/// the backward recursion on long horizons. The martingale integrands and
/// the returned deployment maps are pooled fits (their noise is not
/// recycled through the recursion at first order).
pub fn backward_pass<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &PathEnsemble<T>,
    flow: &MeasureFlow<T>,
    sources: Option<&SourceTerms<T>>,
    blowup_limit: T,
) -> Result<BackwardOutput<T>> {
    let n = ens.state_dim;
    let d = ens.noise_dim;
    let nodes = ens.grid.n_nodes();
    let steps = ens.grid.steps;
    let dt = ens.grid.dt();
    let paths = ens.layout.paths;
    let particles = ens.layout.particles;
    let samples = paths * particles;
    let basis = RegressionBasis { state_dim: n };
    let bsz = basis.size();
    if samples < bsz {
        return Err(MfgError::SingularRegression {
            detail: format!("{samples} samples cannot support a basis of size {bsz}"),
        });
    }
    let fold_of = |p: usize, m: usize| (p + m) % 2;
    let fold_sizes = {
        let mut sizes = [0usize; 2];
        for p in 0..paths {
            for m in 0..particles {
                sizes[fold_of(p, m)] += 1;
            }
        }
        sizes
    };
    let folded = fold_sizes[0] >= bsz && fold_sizes[1] >= bsz;

    let mut y_new = vec![T::zero(); ens.y.len()];
    let mut z_new = vec![T::zero(); ens.z.len()];
    let mut z0_new = vec![T::zero(); ens.z0.len()];
    let mut node_maps: Vec<NodeMaps<T>> = Vec::with_capacity(steps);
    let mut node_residual_rms = vec![0.0f64; steps];

    // Terminal condition.
    let mut g = vec![T::zero(); n];
    for p in 0..paths {
        let m_term = flow.at(p, nodes - 1);
        for m in 0..particles {
            (coeffs.terminal)(ens.x_at(p, m, nodes - 1), m_term, &mut g);
            if let Some(src) = sources {
                let tb = (p * particles + m) * n;
                for c in 0..n {
                    g[c] += src.terminal[tb + c];
                }
            }
            let yb = vec_idx!(ens, p, m, nodes - 1);
            y_new[yb..yb + n].copy_from_slice(&g);
        }
    }

    let mut phi = vec![T::zero(); bsz];
    let mut fvec = vec![T::zero(); n];
    for j in (0..steps).rev() {
        let t = ens.grid.node_time(j);
        // Feature rows plus pooled and per-fold Gram matrices, fixed order.
        let mut features = vec![T::zero(); samples * bsz];
        let mut gram = Mat::zeros(bsz, bsz);
        let mut gram_fold = [Mat::zeros(bsz, bsz), Mat::zeros(bsz, bsz)];
        for p in 0..paths {
            let mean = flow.at(p, j).mean();
            for m in 0..particles {
                let row = p * particles + m;
                basis.fill(ens.x_at(p, m, j), mean, &mut phi);
                features[row * bsz..(row + 1) * bsz].copy_from_slice(&phi);
                for a in 0..bsz {
                    for b in a..bsz {
                        *gram.at_mut(a, b) += phi[a] * phi[b];
                    }
                }
                if folded {
                    let gf = &mut gram_fold[fold_of(p, m)];
                    for a in 0..bsz {
                        for b in a..bsz {
                            *gf.at_mut(a, b) += phi[a] * phi[b];
                        }
                    }
                }
            }
        }
        mirror(&mut gram);
        if folded {
            mirror(&mut gram_fold[0]);
            mirror(&mut gram_fold[1]);
        }

        // Stage 1: conditional mean of Y_{j+1} (control-variate centering).
        let mut rhs_mean = Mat::zeros(bsz, n);
        for p in 0..paths {
            for m in 0..particles {
                let row = p * particles + m;
                let yb = vec_idx!(ens, p, m, j + 1);
                let f = &features[row * bsz..(row + 1) * bsz];
                for a in 0..bsz {
                    for c in 0..n {
                        *rhs_mean.at_mut(a, c) += f[a] * y_new[yb + c];
                    }
                }
            }
        }
        let (coef_mean, _) = cholesky(&gram, &rhs_mean)?;

        // Stage 2: Z and Z0 from centered increments (pooled fits).
        let mut rhs_z = Mat::zeros(bsz, n * d);
        let mut rhs_z0 = Mat::zeros(bsz, n * d);
        let mut centered = vec![T::zero(); n];
        for p in 0..paths {
            for m in 0..particles {
                let row = p * particles + m;
                let f = &features[row * bsz..(row + 1) * bsz];
                let yb = vec_idx!(ens, p, m, j + 1);
                for c in 0..n {
                    let mut fit = T::zero();
                    for a in 0..bsz {
                        fit += f[a] * coef_mean.at(a, c);
                    }
                    centered[c] = y_new[yb + c] - fit;
                }
                let dwb = ((p * particles + m) * steps + j) * d;
                let dw0b = (p * steps + j) * d;
                for c in 0..n {
                    for e in 0..d {
                        let tz = centered[c] * ens.dw[dwb + e] / dt;
                        let tz0 = centered[c] * ens.dw0[dw0b + e] / dt;
                        for a in 0..bsz {
                            *rhs_z.at_mut(a, c * d + e) += f[a] * tz;
                            *rhs_z0.at_mut(a, c * d + e) += f[a] * tz0;
                        }
                    }
                }
            }
        }
        let (coef_z, _) = cholesky(&gram, &rhs_z)?;
        let (coef_z0, _) = cholesky(&gram, &rhs_z0)?;

        // Evaluate fitted Z, Z0; build the Y target with the driver and the
        // martingale control variate (unchanged conditional expectation,
        // one-step Brownian variance removed from the target).
        let mut rhs_y = Mat::zeros(bsz, n);
        let mut rhs_y_fold = [Mat::zeros(bsz, n), Mat::zeros(bsz, n)];
        let mut ztmp = vec![T::zero(); n * d];
        let mut z0tmp = vec![T::zero(); n * d];
        let mut targets_y = vec![T::zero(); samples * n];
        for p in 0..paths {
            let m_node = flow.at(p, j);
            for m in 0..particles {
                let row = p * particles + m;
                let f = &features[row * bsz..(row + 1) * bsz];
                for c in 0..n * d {
                    let mut vz = T::zero();
                    let mut vz0 = T::zero();
                    for a in 0..bsz {
                        vz += f[a] * coef_z.at(a, c);
                        vz0 += f[a] * coef_z0.at(a, c);
                    }
                    ztmp[c] = vz;
                    z0tmp[c] = vz0;
                }
                let zb = matz_idx!(ens, p, m, j);
                z_new[zb..zb + n * d].copy_from_slice(&ztmp);
                z0_new[zb..zb + n * d].copy_from_slice(&z0tmp);

                let yb = vec_idx!(ens, p, m, j + 1);
                let ynext = &y_new[yb..yb + n];
                (coeffs.driver)(t, ens.x_at(p, m, j), ynext, &ztmp, &z0tmp, m_node, &mut fvec);
                if let Some(src) = sources {
                    let sb = ((p * particles + m) * nodes + j) * n;
                    for c in 0..n {
                        fvec[c] += src.driver[sb + c];
                    }
                }
                let dw = ens.dw_at(p, m, j);
                let dw0 = ens.dw0_at(p, j);
                for c in 0..n {
                    let mut target = ynext[c] + fvec[c] * dt;
                    for e in 0..d {
                        target -= ztmp[c * d + e] * dw[e];
                        target -= z0tmp[c * d + e] * dw0[e];
                    }
                    targets_y[row * n + c] = target;
                    for a in 0..bsz {
                        *rhs_y.at_mut(a, c) += f[a] * target;
                    }
                    if folded {
                        let rf = &mut rhs_y_fold[fold_of(p, m)];
                        for a in 0..bsz {
                            *rf.at_mut(a, c) += f[a] * target;
                        }
                    }
                }
            }
        }
        let (coef_y, _) = cholesky(&gram, &rhs_y)?;
        let coef_y_fold = if folded {
            let (c0, _) = cholesky(&gram_fold[0], &rhs_y_fold[0])?;
            let (c1, _) = cholesky(&gram_fold[1], &rhs_y_fold[1])?;
            Some([c0, c1])
        } else {
            None
        };

        let mut residual_sq = 0.0f64;
        for p in 0..paths {
            for m in 0..particles {
                let row = p * particles + m;
                let f = &features[row * bsz..(row + 1) * bsz];
                let yb = vec_idx!(ens, p, m, j);
                let cy = match &coef_y_fold {
                    Some(folds) => &folds[1 - fold_of(p, m)],
                    None => &coef_y,
                };
                for c in 0..n {
                    let mut fit = T::zero();
                    for a in 0..bsz {
                        fit += f[a] * cy.at(a, c);
                    }
                    if !fit.is_finite() || fit.abs() > blowup_limit {
                        return Err(MfgError::NonFiniteState {
                            detail: format!("adjoint blow-up at node {j}"),
                        });
                    }
                    y_new[yb + c] = fit;
                    let r = (targets_y[row * n + c] - fit).to_f64x();
                    residual_sq += r * r;
                }
            }
        }
        node_residual_rms[j] = (residual_sq / (samples * n) as f64).sqrt();

        // Terminal-node Z slots mirror the last fitted node so that every
        // stored node carries usable integrands.
        if j == steps - 1 {
            for p in 0..paths {
                for m in 0..particles {
                    let src_b = matz_idx!(ens, p, m, j);
                    let dst_b = matz_idx!(ens, p, m, j + 1);
                    for c in 0..n * d {
                        z_new[dst_b + c] = z_new[src_b + c];
                        z0_new[dst_b + c] = z0_new[src_b + c];
                    }
                }
            }
        }

        node_maps.push(NodeMaps { coef_y, coef_z, coef_z0 });
    }
    node_maps.reverse();

    Ok(BackwardOutput {
        y: y_new,
        z: z_new,
        z0: z0_new,
        maps: DecouplingMaps { basis, nodes: node_maps },
        node_residual_rms,
    })
}

fn mirror<T: Scalar>(m: &mut Mat<T>) {
    for a in 0..m.rows {
        for b in 0..a {
            *m.at_mut(a, b) = m.at(b, a);
        }
    }
}

fn cholesky<T: Scalar>(gram: &Mat<T>, rhs: &Mat<T>) -> Result<(Mat<T>, usize)> {
    linalg::cholesky_solve_multi(gram, rhs, T::of(GRAM_DROP_TOL))
}

/// Apply a backward proposal to the ensemble with damping θ:
/// new = θ·proposal + (1−θ)·old on (Y, Z, Z⁰).
pub fn apply_backward<T: Scalar>(ens: &mut PathEnsemble<T>, out: &BackwardOutput<T>, theta: T) {
    let keep = T::one() - theta;
    for (o, &v) in ens.y.iter_mut().zip(out.y.iter()) {
        *o = keep * *o + theta * v;
    }
    for (o, &v) in ens.z.iter_mut().zip(out.z.iter()) {
        *o = keep * *o + theta * v;
    }
    for (o, &v) in ens.z0.iter_mut().zip(out.z0.iter()) {
        *o = keep * *o + theta * v;
    }
}

// ---------------------------------------------------------------------------
// Field sweep: forward simulation that evaluates the fitted maps
// ---------------------------------------------------------------------------

/// Forward sweep that evaluates the decoupling maps at the current states
/// instead of reading stale arrays: X, Y, Z, Z⁰ are all regenerated in one
/// pass. This is the stabilized sweep used inside the continuation solver;
/// at a fixed point it coincides with the plain Picard fixed point.
pub fn field_sweep<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    maps: &DecouplingMaps<T>,
    sources: Option<&SourceTerms<T>>,
    blowup_limit: T,
) -> Result<MeasureFlow<T>> {
    let n = ens.state_dim;
    let d = ens.noise_dim;
    let nodes = ens.grid.n_nodes();
    let dt = ens.grid.dt();
    let paths = ens.layout.paths;
    let particles = ens.layout.particles;
    let basis = maps.basis;
    let bsz = basis.size();

    let mut realized: Vec<Option<Arc<EmpiricalMeasure<T>>>> = vec![None; paths * nodes];
    let mut phi = vec![T::zero(); bsz];
    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * 2 * d];
    let mut g = vec![T::zero(); n];

    // Node-major sweep so that self-consistent measures are available before
    // any particle advances past a node.
    for j in 0..nodes {
        for p in 0..paths {
            let m_arc = match policy {
                FlowPolicy::Frozen(flow) => flow.at(p, j).clone(),
                FlowPolicy::SelfConsistent => measure_of_node(ens, p, j),
            };
            if matches!(policy, FlowPolicy::SelfConsistent) {
                realized[p * nodes + j] = Some(m_arc.clone());
            }
            let mean: Vec<T> = m_arc.mean().to_vec();
            for m in 0..particles {
                basis.fill(ens.x_at(p, m, j), &mean, &mut phi);
                if j < ens.grid.steps {
                    let node = &maps.nodes[j];
                    {
                        let yb = vec_idx!(ens, p, m, j);
                        for c in 0..n {
                            let mut v = T::zero();
                            for a in 0..bsz {
                                v += phi[a] * node.coef_y.at(a, c);
                            }
                            if !v.is_finite() || v.abs() > blowup_limit {
                                return Err(MfgError::NonFiniteState {
                                    detail: format!("adjoint blow-up at node {j}"),
                                });
                            }
                            ens.y[yb + c] = v;
                        }
                        let zb = matz_idx!(ens, p, m, j);
                        for c in 0..n * d {
                            let mut vz = T::zero();
                            let mut vz0 = T::zero();
                            for a in 0..bsz {
                                vz += phi[a] * node.coef_z.at(a, c);
                                vz0 += phi[a] * node.coef_z0.at(a, c);
                            }
                            ens.z[zb + c] = vz;
                            ens.z0[zb + c] = vz0;
                        }
                    }
                    let t = ens.grid.node_time(j);
                    let xb = vec_idx!(ens, p, m, j);
                    let zb = matz_idx!(ens, p, m, j);
                    {
                        let x = &ens.x[xb..xb + n];
                        let y = &ens.y[xb..xb + n];
                        let z = &ens.z[zb..zb + n * d];
                        let z0 = &ens.z0[zb..zb + n * d];
                        (coeffs.drift)(t, x, y, z, z0, &m_arc, &mut b);
                        (coeffs.vol)(t, x, y, z, z0, &m_arc, &mut s);
                    }
                    if let Some(src) = sources {
                        let sb = ((p * particles + m) * nodes + j) * n;
                        for c in 0..n {
                            b[c] += src.drift[sb + c];
                        }
                        let vb = ((p * particles + m) * nodes + j) * n * 2 * d;
                        for c in 0..n * 2 * d {
                            s[c] += src.vol[vb + c];
                        }
                    }
                    let dwb = ((p * particles + m) * ens.grid.steps + j) * d;
                    let dw0b = (p * ens.grid.steps + j) * d;
                    let next = vec_idx!(ens, p, m, j + 1);
                    for c in 0..n {
                        let mut v = ens.x[xb + c] + b[c] * dt;
                        for e in 0..d {
                            v += s[c * 2 * d + e] * ens.dw[dwb + e];
                            v += s[c * 2 * d + d + e] * ens.dw0[dw0b + e];
                        }
                        if !v.is_finite() || v.abs() > blowup_limit {
                            return Err(MfgError::NonFiniteState {
                                detail: format!("state blow-up at node {j}"),
                            });
                        }
                        ens.x[next + c] = v;
                    }
                } else {
                    // Terminal node: Y from the terminal map, Z carried over.
                    (coeffs.terminal)(ens.x_at(p, m, j), &m_arc, &mut g);
                    if let Some(src) = sources {
                        let tb = (p * particles + m) * n;
                        for c in 0..n {
                            g[c] += src.terminal[tb + c];
                        }
                    }
                    let yb = vec_idx!(ens, p, m, j);
                    ens.y[yb..yb + n].copy_from_slice(&g);
                    let prev = matz_idx!(ens, p, m, j - 1);
                    let here = matz_idx!(ens, p, m, j);
                    for c in 0..n * d {
                        ens.z[here + c] = ens.z[prev + c];
                        ens.z0[here + c] = ens.z0[prev + c];
                    }
                }
            }
        }
    }
    Ok(match policy {
        FlowPolicy::Frozen(flow) => (*flow).clone(),
        FlowPolicy::SelfConsistent => MeasureFlow::new(
            paths,
            nodes,
            realized.into_iter().map(|m| m.expect("all nodes visited")).collect(),
        ),
    })
}

// ---------------------------------------------------------------------------
// Picard iteration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct IterationLog {
    pub iters: usize,
    pub residuals: Vec<f64>,
}

pub struct SolveOutput<T> {
    pub log: IterationLog,
    pub maps: DecouplingMaps<T>,
    pub flow: MeasureFlow<T>,
    pub node_residual_rms: Vec<f64>,
    /// Damping the (possibly retried) stabilized solve settled on.
    pub damping_used: f64,
}

fn sup_change<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut worst = T::zero();
    for (x, y) in a.iter().zip(b) {
        worst = worst.max((*x - *y).abs());
    }
    worst
}

/// Plain damped Picard iteration: alternate the stale-array forward pass and
/// the regression backward pass until the sup-norm change of (X, Y) between
/// successive iterates drops below tolerance.
pub fn picard_solve<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    config: &SolverConfig<T>,
    sources: Option<&SourceTerms<T>>,
) -> Result<SolveOutput<T>> {
    config.validate()?;
    let mut log = IterationLog::default();
    let mut residual = f64::INFINITY;
    for it in 1..=config.picard_max_iters {
        let x_prev = ens.x.clone();
        let y_prev = ens.y.clone();
        let flow = forward_pass(coeffs, ens, policy, sources, config.blowup_limit)?;
        let bw = backward_pass(coeffs, ens, &flow, sources, config.blowup_limit)?;
        apply_backward(ens, &bw, config.damping);
        let change = sup_change(&ens.x, &x_prev).max(sup_change(&ens.y, &y_prev));
        residual = change.to_f64x();
        log.iters = it;
        log.residuals.push(residual);
        if change <= config.picard_tol {
            return Ok(SolveOutput {
                log,
                maps: bw.maps,
                flow,
                node_residual_rms: bw.node_residual_rms,
                damping_used: config.damping.to_f64x(),
            });
        }
    }
    Err(MfgError::NoConvergence { iters: config.picard_max_iters, residual })
}

/// Stabilized fixed-point solve: refit maps on the current paths, then
/// regenerate the paths by evaluating the maps (field sweep), iterating to
/// tolerance. Unlike the stale-array sweep, the within-sweep feedback keeps
/// dissipative instances stable on long horizons. A run that diverges or
/// stalls is retried from its entry state with the damping halved, down to
/// a sixteenth of the configured value.
pub fn field_solve<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    config: &SolverConfig<T>,
    sources: Option<&SourceTerms<T>>,
    warm_maps: Option<DecouplingMaps<T>>,
) -> Result<(SolveOutput<T>, DecouplingMaps<T>)> {
    config.validate()?;
    let snapshot = (ens.x.clone(), ens.y.clone(), ens.z.clone(), ens.z0.clone());
    let mut theta = config.damping;
    let mut iters = config.picard_max_iters;
    let floor = config.damping * T::of(1.0 / 16.0);
    loop {
        let attempt_config = SolverConfig { damping: theta, picard_max_iters: iters, ..*config };
        match field_solve_once(coeffs, ens, policy, &attempt_config, sources, warm_maps.clone()) {
            Ok(out) => return Ok(out),
            Err(e @ (MfgError::NonFiniteState { .. } | MfgError::NoConvergence { .. })) => {
                theta = theta * T::of(0.5);
                iters *= 2;
                if theta < floor {
                    return Err(e);
                }
                ens.x.copy_from_slice(&snapshot.0);
                ens.y.copy_from_slice(&snapshot.1);
                ens.z.copy_from_slice(&snapshot.2);
                ens.z0.copy_from_slice(&snapshot.3);
            }
            Err(e) => return Err(e),
        }
    }
}

fn field_solve_once<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    config: &SolverConfig<T>,
    sources: Option<&SourceTerms<T>>,
    warm_maps: Option<DecouplingMaps<T>>,
) -> Result<(SolveOutput<T>, DecouplingMaps<T>)> {
    let mut maps = match warm_maps {
        Some(m) => m,
        None => {
            let flow = forward_pass(coeffs, ens, policy, sources, config.blowup_limit)?;
            backward_pass(coeffs, ens, &flow, sources, config.blowup_limit)?.maps
        }
    };
    let mut log = IterationLog::default();
    let mut residual = f64::INFINITY;
    for it in 1..=config.picard_max_iters {
        let x_prev = ens.x.clone();
        let y_prev = ens.y.clone();
        let flow = field_sweep(coeffs, ens, policy, &maps, sources, config.blowup_limit)?;
        let bw = backward_pass(coeffs, ens, &flow, sources, config.blowup_limit)?;
        maps.blend_from(bw.maps, config.damping);
        let change = sup_change(&ens.x, &x_prev).max(sup_change(&ens.y, &y_prev));
        residual = change.to_f64x();
        log.iters = it;
        log.residuals.push(residual);
        if change <= config.picard_tol {
            let out = SolveOutput {
                log,
                maps: maps.clone(),
                flow,
                node_residual_rms: bw.node_residual_rms,
                damping_used: config.damping.to_f64x(),
            };
            return Ok((out, maps));
        }
    }
    Err(MfgError::NoConvergence { iters: config.picard_max_iters, residual })
}

// ---------------------------------------------------------------------------
// Continuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct HomotopyLog {
    /// (level, fixed-point iterations spent at that level).
    pub levels: Vec<(f64, usize)>,
    pub step_retries: usize,
}

/// Homotopy continuation: solve the blended family from the contractive
/// linear system at level 0 up to the target system at level 1, each level
/// iterating the perturbation fixed point
///
/// ```text
///   sources = ε·( y + B(ϑ), [z|z⁰] + S(ϑ), −x + f(ϑ), −x_T + g(x_T) )
/// ```
///
/// around a solve of the previous level, warm-started throughout. A level
/// that fails to settle halves the step and retries, down to the step floor.
pub fn continuation_solve<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &mut PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    config: &SolverConfig<T>,
) -> Result<(SolveOutput<T>, HomotopyLog)> {
    config.validate()?;
    let mut hlog = HomotopyLog::default();

    // Level 0: contractive linear system.
    let base0 = coeffs.blend(T::zero());
    let (mut last_out, mut maps) = field_solve(&base0, ens, policy, config, None, None)?;
    hlog.levels.push((0.0, last_out.log.iters));
    // Damping that worked on this instance is reused on later levels.
    let mut level_config = SolverConfig { damping: T::of(last_out.damping_used), ..*config };

    let mut delta = T::zero();
    let mut eta = config.homotopy_step.min(T::one());
    while delta < T::one() {
        let target = (delta + eta).min(T::one());
        let eps = target - delta;
        let level_coeffs = coeffs.blend(delta);

        // Snapshot for retry.
        let saved = (ens.x.clone(), ens.y.clone(), ens.z.clone(), ens.z0.clone(), maps.clone());
        let mut settled = false;
        let mut psi_iters = 0usize;
        for _ in 0..config.psi_max_iters {
            psi_iters += 1;
            let sources = perturbation_sources(coeffs, ens, policy, eps)?;
            let x_prev = ens.x.clone();
            let y_prev = ens.y.clone();
            match field_solve(
                &level_coeffs,
                ens,
                policy,
                &level_config,
                Some(&sources),
                Some(maps.clone()),
            ) {
                Ok((out, new_maps)) => {
                    level_config.damping = T::of(out.damping_used);
                    maps = new_maps;
                    last_out = out;
                }
                Err(MfgError::NoConvergence { .. }) | Err(MfgError::NonFiniteState { .. }) => {
                    settled = false;
                    break;
                }
                Err(e) => return Err(e),
            }
            let change = sup_change(&ens.x, &x_prev).max(sup_change(&ens.y, &y_prev));
            if change <= config.picard_tol {
                settled = true;
                break;
            }
        }

        if settled {
            delta = target;
            hlog.levels.push((delta.to_f64x(), psi_iters));
        } else {
            // Restore and retry with a smaller step.
            ens.x = saved.0;
            ens.y = saved.1;
            ens.z = saved.2;
            ens.z0 = saved.3;
            maps = saved.4;
            eta = eta * T::of(0.5);
            hlog.step_retries += 1;
            if eta < config.homotopy_step_floor {
                return Err(MfgError::HomotopyStall {
                    delta: delta.to_f64x(),
                    eta: eta.to_f64x(),
                });
            }
        }
    }
    Ok((last_out, hlog))
}

fn perturbation_sources<T: Scalar>(
    base: &FbsdeCoefficients<T>,
    ens: &PathEnsemble<T>,
    policy: &FlowPolicy<T>,
    eps: T,
) -> Result<SourceTerms<T>> {
    let n = ens.state_dim;
    let d = ens.noise_dim;
    let nodes = ens.grid.n_nodes();
    let mut src = SourceTerms::zeros(ens);
    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * 2 * d];
    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); n];
    for p in 0..ens.layout.paths {
        for j in 0..nodes {
            let m_arc = match policy {
                FlowPolicy::Frozen(flow) => flow.at(p, j).clone(),
                FlowPolicy::SelfConsistent => measure_of_node(ens, p, j),
            };
            let t = ens.grid.node_time(j);
            for m in 0..ens.layout.particles {
                let x = ens.x_at(p, m, j);
                let y = ens.y_at(p, m, j);
                let z = ens.z_at(p, m, j);
                let z0 = ens.z0_at(p, m, j);
                (base.drift)(t, x, y, z, z0, &m_arc, &mut b);
                (base.vol)(t, x, y, z, z0, &m_arc, &mut s);
                (base.driver)(t, x, y, z, z0, &m_arc, &mut f);
                let sb = ((p * ens.layout.particles + m) * nodes + j) * n;
                for c in 0..n {
                    src.drift[sb + c] = eps * (y[c] + b[c]);
                    src.driver[sb + c] = eps * (f[c] - x[c]);
                }
                let vb = ((p * ens.layout.particles + m) * nodes + j) * n * 2 * d;
                for c in 0..n {
                    for e in 0..d {
                        src.vol[vb + c * 2 * d + e] = eps * (z[c * d + e] + s[c * 2 * d + e]);
                        src.vol[vb + c * 2 * d + d + e] =
                            eps * (z0[c * d + e] + s[c * 2 * d + d + e]);
                    }
                }
                if j == nodes - 1 {
                    (base.terminal)(x, &m_arc, &mut g);
                    let tb = (p * ens.layout.particles + m) * n;
                    for c in 0..n {
                        src.terminal[tb + c] = eps * (g[c] - x[c]);
                    }
                }
            }
        }
    }
    Ok(src)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Max over nodes of |X_{j+1} − X_j − B·dt − S·ΔW| (guards indexing).
    pub forward_residual: f64,
    /// Mean |Y_T − g(X_T, m_T)|.
    pub terminal_defect: f64,
    /// RMS of the one-step backward defect Y_j + Z·ΔW + Z⁰·ΔW⁰ − Y_{j+1} − f·dt.
    pub bsde_defect_rms: f64,
}

pub fn residual_diagnostics<T: Scalar>(
    coeffs: &FbsdeCoefficients<T>,
    ens: &PathEnsemble<T>,
    flow: &MeasureFlow<T>,
) -> ResidualReport {
    let n = ens.state_dim;
    let d = ens.noise_dim;
    let dt = ens.grid.dt();
    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * 2 * d];
    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); n];
    let mut forward_residual = 0.0f64;
    let mut terminal_defect = 0.0f64;
    let mut defect_sq = 0.0f64;
    let mut defect_count = 0usize;
    for p in 0..ens.layout.paths {
        for m in 0..ens.layout.particles {
            for j in 0..ens.grid.steps {
                let t = ens.grid.node_time(j);
                let meas = flow.at(p, j);
                let x = ens.x_at(p, m, j);
                let y = ens.y_at(p, m, j);
                let z = ens.z_at(p, m, j);
                let z0 = ens.z0_at(p, m, j);
                (coeffs.drift)(t, x, y, z, z0, meas, &mut b);
                (coeffs.vol)(t, x, y, z, z0, meas, &mut s);
                let ynext = ens.y_at(p, m, j + 1);
                (coeffs.driver)(t, x, ynext, z, z0, meas, &mut f);
                let xn = ens.x_at(p, m, j + 1);
                let dw = ens.dw_at(p, m, j);
                let dw0 = ens.dw0_at(p, j);
                for c in 0..n {
                    let mut pred = x[c] + b[c] * dt;
                    let mut mart = T::zero();
                    for e in 0..d {
                        pred += s[c * 2 * d + e] * dw[e] + s[c * 2 * d + d + e] * dw0[e];
                        mart += z[c * d + e] * dw[e] + z0[c * d + e] * dw0[e];
                    }
                    forward_residual = forward_residual.max((xn[c] - pred).abs().to_f64x());
                    let defect = y[c] + mart - ynext[c] - f[c] * dt;
                    defect_sq += defect.to_f64x().powi(2);
                    defect_count += 1;
                }
            }
            let jt = ens.grid.steps;
            let meas = flow.at(p, jt);
            (coeffs.terminal)(ens.x_at(p, m, jt), meas, &mut g);
            let yt = ens.y_at(p, m, jt);
            let mut dsq = T::zero();
            for c in 0..n {
                let dv = yt[c] - g[c];
                dsq += dv * dv;
            }
            terminal_defect += dsq.sqrt().to_f64x();
        }
    }
    let pm = (ens.layout.paths * ens.layout.particles) as f64;
    ResidualReport {
        forward_residual,
        terminal_defect: terminal_defect / pm,
        bsde_defect_rms: (defect_sq / defect_count as f64).sqrt(),
    }
}
