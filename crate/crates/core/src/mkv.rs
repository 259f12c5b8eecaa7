//! Mean-field equilibrium solver: outer fixed point on the conditional
//! measure flow around the forward-backward system
//!
//! ```text
//!   dX = D_yH dt + D_zH dW + D_{z⁰}H dW⁰,    X_0 = ξ
//!   backward driver D_xH (plus −r·Y in discounted mode),
//!   terminal D_xG(·, m_T)
//! ```
//!
//! with m the conditional law of X given the shared noise. The flow starts
//! at the law of the uncontrolled dynamics, the inner system is solved with
//! the flow frozen (plain Picard first, homotopy continuation as fallback),
//! and the flow is fully replaced by the realized conditional law until the
//! change drops below tolerance.
//!
//! After convergence a synchronized sweep regenerates the ensemble from the
//! final fitted maps, so the stored flow is exactly the conditional law of
//! the stored ensemble, and re-simulating a particle with identical noise
//! reproduces it bit for bit. Conditionally independent copies are
//! manufactured exactly that way: fresh idiosyncratic streams, the same
//! shared-noise path, the decoupling maps and flow frozen from the solution.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{MfgError, Result};
use crate::fbsde::{
    continuation_solve, field_sweep, forward_pass, picard_solve, CoeffFn, DecouplingMaps,
    EnsembleLayout, FbsdeCoefficients, FlowPolicy, NodeMaps, PathEnsemble, RegressionBasis,
    SolverConfig, TerminalFn, TimeGrid,
};
use crate::linalg::Mat;
use crate::measure::MeasureFlow;
use crate::model::{minimizer_alpha, FamilyTag, GameSpec, HamiltonianPoint};
use crate::num::Scalar;
use crate::rng::CounterStream;

/// Tolerance on the squared flow change and cap on outer iterations.
pub const FLOW_TOL: f64 = 1e-4;
pub const FLOW_MAX_ITERS: usize = 50;

/// Stream sources for building an ensemble: per-path shared noise, and
/// per-(path, particle) idiosyncratic noise and initial draws.
pub struct EnsembleStreams {
    pub common: Box<dyn Fn(usize) -> CounterStream + Send + Sync>,
    pub idio: Box<dyn Fn(usize, usize) -> CounterStream + Send + Sync>,
    pub init: Box<dyn Fn(usize, usize) -> CounterStream + Send + Sync>,
}

impl EnsembleStreams {
    /// Default keying for standalone mean-field solves.
    pub fn field(seed: u64) -> Self {
        use crate::rng::{StreamFactory, StreamRole};
        let f = StreamFactory::new(seed);
        EnsembleStreams {
            common: Box::new(move |p| f.stream(StreamRole::AuxCommonNoise, p as u64, 0)),
            idio: Box::new(move |p, m| f.stream(StreamRole::FieldNoise, p as u64, m as u64)),
            init: Box::new(move |p, m| f.stream(StreamRole::FieldInit, p as u64, m as u64)),
        }
    }

    /// Keying for the coupling harness: path t carries the shared-noise
    /// stream of trial t — the same stream the finite-player system draws —
    /// so one solve provides the equilibrium flow along every trial's
    /// shared noise.
    pub fn trial_block(seed: u64) -> Self {
        use crate::rng::{StreamFactory, StreamRole};
        let f = StreamFactory::new(seed);
        EnsembleStreams {
            common: Box::new(move |p| f.stream(StreamRole::CommonNoise, p as u64, 0)),
            idio: Box::new(move |p, m| f.stream(StreamRole::FieldNoise, p as u64, m as u64)),
            init: Box::new(move |p, m| f.stream(StreamRole::FieldInit, p as u64, m as u64)),
        }
    }
}

/// Converged mean-field solution.
pub struct MfeSolution<T: Scalar> {
    pub ensemble: PathEnsemble<T>,
    /// Conditional law of the ensemble, node by node (same atoms).
    pub flow: MeasureFlow<T>,
    /// Control per (path, particle, node), control dimension fastest.
    pub control: Vec<T>,
    pub maps: DecouplingMaps<T>,
    pub coeffs: FbsdeCoefficients<T>,
    pub control_dim: usize,
    pub outer_iters: usize,
    pub used_continuation: bool,
    pub flow_changes: Vec<f64>,
}

impl<T: Scalar> MfeSolution<T> {
    pub fn control_at(&self, p: usize, m: usize, j: usize) -> &[T] {
        let k = self.control_dim;
        let b = ((p * self.ensemble.layout.particles + m) * self.ensemble.grid.n_nodes() + j) * k;
        &self.control[b..b + k]
    }

    /// Mean of Y over the ensemble at the initial node.
    pub fn y0_mean(&self) -> Vec<T> {
        let n = self.ensemble.state_dim;
        let mut acc = vec![T::zero(); n];
        for p in 0..self.ensemble.layout.paths {
            for m in 0..self.ensemble.layout.particles {
                for c in 0..n {
                    acc[c] += self.ensemble.y_at(p, m, 0)[c];
                }
            }
        }
        let inv =
            T::one() / T::of_usize(self.ensemble.layout.paths * self.ensemble.layout.particles);
        for v in acc.iter_mut() {
            *v *= inv;
        }
        acc
    }
}

/// Coefficients of the limiting forward-backward system in Hamiltonian
/// derivative form. Linear-quadratic instances use closed-form closures;
/// other families evaluate the envelope derivatives pointwise.
pub fn equilibrium_coefficients<T: Scalar>(spec: &Arc<GameSpec<T>>) -> FbsdeCoefficients<T> {
    let n = spec.dims.state;
    let d = spec.dims.noise;
    let rate = spec.horizon.rate();
    let discounted = spec.horizon.is_discounted();

    if let (FamilyTag::Lq, Some(params)) = (spec.family, spec.lq.as_ref()) {
        let q = params.state_cost;
        let f = params.coupling_cost;
        let rho = params.anchor;
        let g = params.terminal_cost;
        let vol = params.vol.clone();
        let vol0 = params.vol0.clone();
        let drift: CoeffFn<T> = Arc::new(move |_t, _x, y, _z, _z0, _m, out| {
            for c in 0..n {
                out[c] = -y[c];
            }
        });
        let vol_fn: CoeffFn<T> = Arc::new(move |_t, _x, _y, _z, _z0, _m, out| {
            for c in 0..n {
                for e in 0..d {
                    out[c * 2 * d + e] = vol.at(c, e);
                    out[c * 2 * d + d + e] = vol0.at(c, e);
                }
            }
        });
        let driver: CoeffFn<T> = Arc::new(move |_t, x, y, _z, _z0, m, out| {
            let mean = m.mean();
            for c in 0..n {
                out[c] = q * x[c] + f * (x[c] - rho * mean[c]);
                if discounted && rate != T::zero() {
                    out[c] -= rate * y[c];
                }
            }
        });
        let terminal: TerminalFn<T> = Arc::new(move |x, m, out| {
            if discounted {
                for v in out.iter_mut().take(n) {
                    *v = T::zero();
                }
            } else {
                let mean = m.mean();
                for c in 0..n {
                    out[c] = g * (x[c] - rho * mean[c]);
                }
            }
        });
        return FbsdeCoefficients { state_dim: n, noise_dim: d, drift, vol: vol_fn, driver, terminal };
    }

    let spec_drift = spec.clone();
    let drift: CoeffFn<T> = Arc::new(move |_t, x, y, z, z0, m, out| {
        let p = HamiltonianPoint { x, y, z, z0, measure: m };
        let derivs = crate::model::hamiltonian_derivatives(&spec_drift, &p)
            .expect("hamiltonian minimization failed in drift");
        out[..n].copy_from_slice(&derivs.dy);
    });
    let spec_vol = spec.clone();
    let vol: CoeffFn<T> = Arc::new(move |_t, x, y, z, z0, m, out| {
        let p = HamiltonianPoint { x, y, z, z0, measure: m };
        let derivs = crate::model::hamiltonian_derivatives(&spec_vol, &p)
            .expect("hamiltonian minimization failed in vol");
        for c in 0..n {
            for e in 0..d {
                out[c * 2 * d + e] = derivs.dz.at(c, e);
                out[c * 2 * d + d + e] = derivs.dz0.at(c, e);
            }
        }
    });
    let spec_driver = spec.clone();
    let driver: CoeffFn<T> = Arc::new(move |_t, x, y, z, z0, m, out| {
        let p = HamiltonianPoint { x, y, z, z0, measure: m };
        let derivs = crate::model::hamiltonian_derivatives(&spec_driver, &p)
            .expect("hamiltonian minimization failed in driver");
        for c in 0..n {
            out[c] = derivs.dx[c];
            if discounted && rate != T::zero() {
                out[c] -= rate * y[c];
            }
        }
    });
    let spec_term = spec.clone();
    let terminal: TerminalFn<T> = Arc::new(move |x, m, out| {
        if discounted {
            for v in out.iter_mut().take(n) {
                *v = T::zero();
            }
        } else {
            let g = (spec_term.coeffs.dx_terminal)(x, m);
            out[..n].copy_from_slice(&g);
        }
    });
    FbsdeCoefficients { state_dim: n, noise_dim: d, drift, vol, driver, terminal }
}

/// Build an ensemble for a spec with the given stream sources.
pub fn build_ensemble<T: Scalar>(
    spec: &GameSpec<T>,
    grid: TimeGrid<T>,
    layout: EnsembleLayout,
    streams: &EnsembleStreams,
    substeps: usize,
) -> PathEnsemble<T> {
    let sampler = spec.initial.sampler.clone();
    PathEnsemble::generate(
        grid,
        layout,
        spec.dims.state,
        spec.dims.noise,
        substeps,
        &move |s: &mut CounterStream, out: &mut [T]| (sampler)(s, out),
        &|p| (streams.common)(p),
        &|p, m| (streams.idio)(p, m),
        &|p, m| (streams.init)(p, m),
    )
}

/// Flow of the uncontrolled dynamics (zero control), the initial guess for
/// the outer iteration. Leaves the uncontrolled states in the ensemble.
fn uncontrolled_flow<T: Scalar>(
    spec: &Arc<GameSpec<T>>,
    ens: &mut PathEnsemble<T>,
    blowup: T,
) -> Result<MeasureFlow<T>> {
    let n = spec.dims.state;
    let d = spec.dims.noise;
    let k = spec.dims.control;
    let spec_b = spec.clone();
    let spec_v = spec.clone();
    let coeffs = FbsdeCoefficients {
        state_dim: n,
        noise_dim: d,
        drift: Arc::new(move |_t, x, _y, _z, _z0, m, out: &mut [T]| {
            let zero_a = vec![T::zero(); k];
            let b = (spec_b.coeffs.drift)(x, &zero_a, m);
            out[..b.len()].copy_from_slice(&b);
        }),
        vol: Arc::new(move |_t, x, _y, _z, _z0, m, out: &mut [T]| {
            let zero_a = vec![T::zero(); k];
            let s = (spec_v.coeffs.vol)(x, &zero_a, m);
            let s0 = (spec_v.coeffs.vol0)(x, &zero_a, m);
            for c in 0..n {
                for e in 0..d {
                    out[c * 2 * d + e] = s.at(c, e);
                    out[c * 2 * d + d + e] = s0.at(c, e);
                }
            }
        }),
        driver: Arc::new(move |_t, _x, _y, _z, _z0, _m, out: &mut [T]| {
            for v in out.iter_mut() {
                *v = T::zero();
            }
        }),
        terminal: Arc::new(move |_x, _m, out: &mut [T]| {
            for v in out.iter_mut() {
                *v = T::zero();
            }
        }),
    };
    forward_pass(&coeffs, ens, &FlowPolicy::SelfConsistent, None, blowup)
}

/// Solve the mean-field system. The returned solution is self-consistent:
/// its flow is exactly the conditional law of its ensemble.
pub fn solve_mkv<T: Scalar>(
    spec: &Arc<GameSpec<T>>,
    grid: TimeGrid<T>,
    layout: EnsembleLayout,
    config: &SolverConfig<T>,
    streams: &EnsembleStreams,
) -> Result<MfeSolution<T>> {
    config.validate()?;
    if (grid.horizon - spec.horizon.t_end()).abs() > T::of(1e-12) {
        return Err(MfgError::InvalidParams {
            detail: "grid horizon must match the spec horizon".into(),
        });
    }
    let coeffs = equilibrium_coefficients(spec);
    let mut ens = build_ensemble(spec, grid, layout, streams, 1);
    let mut flow = uncontrolled_flow(spec, &mut ens, config.blowup_limit)?;
    ens = ens.clone_noise_only();

    let mut used_continuation = false;
    let mut flow_changes = Vec::new();
    let mut maps: Option<DecouplingMaps<T>> = None;
    let mut outer_done = None;
    for outer in 1..=FLOW_MAX_ITERS {
        let solved_maps = {
            let policy = FlowPolicy::Frozen(&flow);
            if !used_continuation {
                match picard_solve(&coeffs, &mut ens, &policy, config, None) {
                    Ok(out) => out.maps,
                    Err(MfgError::NoConvergence { .. }) | Err(MfgError::NonFiniteState { .. }) => {
                        used_continuation = true;
                        ens = ens.clone_noise_only();
                        let (out, _) = continuation_solve(&coeffs, &mut ens, &policy, config)?;
                        out.maps
                    }
                    Err(e) => return Err(e),
                }
            } else {
                // The homotopy already reached the target system once; later
                // flow iterations restart the stabilized solve from the warm
                // maps and fall back to the full homotopy only if that fails.
                match crate::fbsde::field_solve(&coeffs, &mut ens, &policy, config, None, maps.clone())
                {
                    Ok((out, _)) => out.maps,
                    Err(MfgError::NoConvergence { .. }) | Err(MfgError::NonFiniteState { .. }) => {
                        ens = ens.clone_noise_only();
                        let (out, _) = continuation_solve(&coeffs, &mut ens, &policy, config)?;
                        out.maps
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let new_flow = MeasureFlow::from_ensemble(&ens);
        let change = flow.max_mean_sq_distance(&new_flow).to_f64x();
        flow_changes.push(change);
        flow = new_flow;
        maps = Some(solved_maps);
        if change <= FLOW_TOL {
            outer_done = Some(outer);
            break;
        }
    }
    let outer_iters = outer_done.ok_or(MfgError::FlowNoConvergence {
        iters: FLOW_MAX_ITERS,
        change: flow_changes.last().copied().unwrap_or(f64::NAN),
    })?;
    let maps = maps.expect("maps fitted in converged outer iteration");

    // Synchronized final sweep: regenerate the ensemble from the frozen
    // maps so that flow == conditional law of the stored ensemble.
    let final_flow = field_sweep(
        &coeffs,
        &mut ens,
        &FlowPolicy::SelfConsistent,
        &maps,
        None,
        config.blowup_limit,
    )?;

    let control = extract_control(spec, &ens, &final_flow)?;

    Ok(MfeSolution {
        ensemble: ens,
        flow: final_flow,
        control,
        maps,
        coeffs,
        control_dim: spec.dims.control,
        outer_iters,
        used_continuation,
        flow_changes,
    })
}

fn extract_control<T: Scalar>(
    spec: &GameSpec<T>,
    ens: &PathEnsemble<T>,
    flow: &MeasureFlow<T>,
) -> Result<Vec<T>> {
    let k = spec.dims.control;
    let nodes = ens.grid.n_nodes();
    let mut control = vec![T::zero(); ens.layout.paths * ens.layout.particles * nodes * k];
    for p in 0..ens.layout.paths {
        for m in 0..ens.layout.particles {
            for j in 0..nodes {
                let point = HamiltonianPoint {
                    x: ens.x_at(p, m, j),
                    y: ens.y_at(p, m, j),
                    z: ens.z_at(p, m, j),
                    z0: ens.z0_at(p, m, j),
                    measure: flow.at(p, j),
                };
                let a = minimizer_alpha(spec, &point)?;
                let b = ((p * ens.layout.particles + m) * nodes + j) * k;
                control[b..b + k].copy_from_slice(&a);
            }
        }
    }
    Ok(control)
}

/// Monte Carlo estimate of the equilibrium cost: left-endpoint quadrature of
/// the mean running cost plus the mean terminal cost, with e^{−rt} weights
/// in discounted mode (where the terminal cost is absent).
pub fn mfe_cost<T: Scalar>(spec: &GameSpec<T>, sol: &MfeSolution<T>) -> T {
    let ens = &sol.ensemble;
    let dt = ens.grid.dt();
    let nodes = ens.grid.n_nodes();
    let rate = spec.horizon.rate();
    let discounted = spec.horizon.is_discounted();
    let mut acc = T::zero();
    for p in 0..ens.layout.paths {
        for m in 0..ens.layout.particles {
            for j in 0..nodes - 1 {
                let w = if discounted { (-rate * ens.grid.node_time(j)).exp() } else { T::one() };
                let l = (spec.coeffs.running)(
                    ens.x_at(p, m, j),
                    sol.control_at(p, m, j),
                    sol.flow.at(p, j),
                );
                acc += w * l * dt;
            }
            if !discounted {
                let g =
                    (spec.coeffs.terminal)(ens.x_at(p, m, nodes - 1), sol.flow.at(p, nodes - 1));
                acc += g;
            }
        }
    }
    acc / T::of_usize(ens.layout.paths * ens.layout.particles)
}

/// Conditionally independent re-simulations of the equilibrium dynamics:
/// copy i is driven by fresh streams (ξⁱ, Wⁱ) and the same shared-noise path
/// as `path_index` of the solution, through the frozen decoupling maps and
/// frozen flow. A copy whose streams match a stored particle reproduces it
/// exactly.
pub struct CopiesOutput<T: Scalar> {
    pub ensemble: PathEnsemble<T>,
    pub control: Vec<T>,
    pub control_dim: usize,
    pub path_index: usize,
}

impl<T: Scalar> CopiesOutput<T> {
    pub fn control_at(&self, m: usize, j: usize) -> &[T] {
        let k = self.control_dim;
        let b = (m * self.ensemble.grid.n_nodes() + j) * k;
        &self.control[b..b + k]
    }
}

pub fn conditionally_independent_copies<T: Scalar>(
    spec: &GameSpec<T>,
    sol: &MfeSolution<T>,
    n_copies: usize,
    path_index: usize,
    idio: &dyn Fn(usize) -> CounterStream,
    init: &dyn Fn(usize) -> CounterStream,
) -> Result<CopiesOutput<T>> {
    if n_copies == 0 || n_copies as u64 > u32::MAX as u64 {
        return Err(MfgError::StreamExhausted {
            detail: format!("copy budget {n_copies} outside the reserved key space"),
        });
    }
    if path_index >= sol.ensemble.layout.paths {
        return Err(MfgError::IndexOutOfRange {
            detail: format!("path {path_index} >= {}", sol.ensemble.layout.paths),
        });
    }
    let src = &sol.ensemble;
    let n = src.state_dim;
    let d = src.noise_dim;
    let grid = src.grid;
    let nodes = grid.n_nodes();
    let dt = grid.dt();
    let layout = EnsembleLayout { paths: 1, particles: n_copies };
    let sampler = spec.initial.sampler.clone();
    let mut ens = PathEnsemble::generate(
        grid,
        layout,
        n,
        d,
        1,
        &move |s: &mut CounterStream, out: &mut [T]| (sampler)(s, out),
        // placeholder stream; the shared increments are copied from the
        // solution path below
        &|_p| CounterStream::new(0, crate::rng::StreamRole::CommonNoise, u64::MAX, u64::MAX),
        &|_p, m| idio(m),
        &|_p, m| init(m),
    );
    for j in 0..grid.steps {
        let src_b = (path_index * grid.steps + j) * d;
        let dst_b = j * d;
        for e in 0..d {
            ens.dw0[dst_b + e] = src.dw0[src_b + e];
        }
    }

    let basis = sol.maps.basis;
    let bsz = basis.size();
    let mut phi = vec![T::zero(); bsz];
    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * 2 * d];
    let mut g = vec![T::zero(); n];
    // Same node-major arithmetic as the synchronized sweep, with measures
    // and features frozen from the solution.
    for j in 0..nodes {
        let m_arc = sol.flow.at(path_index, j).clone();
        let mean: Vec<T> = m_arc.mean().to_vec();
        for m in 0..n_copies {
            basis.fill(ens.x_at(0, m, j), &mean, &mut phi);
            if j < grid.steps {
                let node = &sol.maps.nodes[j];
                {
                    let yv: Vec<T> = (0..n)
                        .map(|c| {
                            let mut v = T::zero();
                            for a in 0..bsz {
                                v += phi[a] * node.coef_y.at(a, c);
                            }
                            v
                        })
                        .collect();
                    ens.y_at_mut(0, m, j).copy_from_slice(&yv);
                    let zv: Vec<T> = (0..n * d)
                        .map(|c| {
                            let mut v = T::zero();
                            for a in 0..bsz {
                                v += phi[a] * node.coef_z.at(a, c);
                            }
                            v
                        })
                        .collect();
                    ens.z_at_mut(0, m, j).copy_from_slice(&zv);
                    let z0v: Vec<T> = (0..n * d)
                        .map(|c| {
                            let mut v = T::zero();
                            for a in 0..bsz {
                                v += phi[a] * node.coef_z0.at(a, c);
                            }
                            v
                        })
                        .collect();
                    ens.z0_at_mut(0, m, j).copy_from_slice(&z0v);
                }
                let t = grid.node_time(j);
                {
                    let x = ens.x_at(0, m, j);
                    let y = ens.y_at(0, m, j);
                    let z = ens.z_at(0, m, j);
                    let z0 = ens.z0_at(0, m, j);
                    (sol.coeffs.drift)(t, x, y, z, z0, &m_arc, &mut b);
                    (sol.coeffs.vol)(t, x, y, z, z0, &m_arc, &mut s);
                }
                let next: Vec<T> = {
                    let x = ens.x_at(0, m, j);
                    let dw = ens.dw_at(0, m, j);
                    let dw0 = ens.dw0_at(0, j);
                    (0..n)
                        .map(|c| {
                            let mut v = x[c] + b[c] * dt;
                            for e in 0..d {
                                v += s[c * 2 * d + e] * dw[e];
                                v += s[c * 2 * d + d + e] * dw0[e];
                            }
                            v
                        })
                        .collect()
                };
                ens.x_at_mut(0, m, j + 1).copy_from_slice(&next);
            } else {
                (sol.coeffs.terminal)(ens.x_at(0, m, j), &m_arc, &mut g);
                ens.y_at_mut(0, m, j).copy_from_slice(&g);
                let prev: Vec<T> = ens.z_at(0, m, j - 1).to_vec();
                ens.z_at_mut(0, m, j).copy_from_slice(&prev);
                let prev0: Vec<T> = ens.z0_at(0, m, j - 1).to_vec();
                ens.z0_at_mut(0, m, j).copy_from_slice(&prev0);
            }
        }
    }
    ens.assert_finite(T::of(1e8))?;

    // Control along the copies, with the frozen flow measures.
    let k = spec.dims.control;
    let mut control = vec![T::zero(); n_copies * nodes * k];
    for m in 0..n_copies {
        for j in 0..nodes {
            let point = HamiltonianPoint {
                x: ens.x_at(0, m, j),
                y: ens.y_at(0, m, j),
                z: ens.z_at(0, m, j),
                z0: ens.z0_at(0, m, j),
                measure: sol.flow.at(path_index, j),
            };
            let a = minimizer_alpha(spec, &point)?;
            let bix = (m * nodes + j) * k;
            control[bix..bix + k].copy_from_slice(&a);
        }
    }

    Ok(CopiesOutput { ensemble: ens, control, control_dim: k, path_index })
}

// ---------------------------------------------------------------------------
// Solution serialization: ensemble + control + maps; the flow is recovered
// as the conditional law of the ensemble (they share atoms by construction).
// ---------------------------------------------------------------------------

const SOL_MAGIC: &[u8; 8] = b"MFGSOL01";

pub fn write_solution<T: Scalar>(sol: &MfeSolution<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(SOL_MAGIC)?;
    sol.ensemble.write_to(w)?;
    w.write_all(&(sol.control_dim as u64).to_le_bytes())?;
    w.write_all(&(sol.control.len() as u64).to_le_bytes())?;
    for v in &sol.control {
        w.write_all(&v.to_f64x().to_le_bytes())?;
    }
    w.write_all(&(sol.maps.nodes.len() as u64).to_le_bytes())?;
    w.write_all(&(sol.maps.basis.size() as u64).to_le_bytes())?;
    for node in &sol.maps.nodes {
        for mat in [&node.coef_y, &node.coef_z, &node.coef_z0] {
            w.write_all(&(mat.rows as u64).to_le_bytes())?;
            w.write_all(&(mat.cols as u64).to_le_bytes())?;
            for v in &mat.data {
                w.write_all(&v.to_f64x().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Deserialized solution payload: ensemble, control, maps, and the flow
/// reconstructed from the ensemble.
pub struct StoredSolution<T: Scalar> {
    pub ensemble: PathEnsemble<T>,
    pub flow: MeasureFlow<T>,
    pub control: Vec<T>,
    pub control_dim: usize,
    pub maps: DecouplingMaps<T>,
}

pub fn read_solution<T: Scalar>(r: &mut impl Read) -> Result<StoredSolution<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SOL_MAGIC {
        return Err(MfgError::Serialization { detail: "bad solution magic".into() });
    }
    let ensemble = PathEnsemble::<T>::read_from(r)?;
    let mut u = [0u8; 8];
    let mut f = [0u8; 8];
    r.read_exact(&mut u)?;
    let control_dim = u64::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let clen = u64::from_le_bytes(u) as usize;
    let mut control = vec![T::zero(); clen];
    for v in control.iter_mut() {
        r.read_exact(&mut f)?;
        *v = T::of(f64::from_le_bytes(f));
    }
    r.read_exact(&mut u)?;
    let steps = u64::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let bsz = u64::from_le_bytes(u) as usize;
    let mut nodes = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            r.read_exact(&mut u)?;
            let rows = u64::from_le_bytes(u) as usize;
            r.read_exact(&mut u)?;
            let cols = u64::from_le_bytes(u) as usize;
            let mut data = vec![T::zero(); rows * cols];
            for v in data.iter_mut() {
                r.read_exact(&mut f)?;
                *v = T::of(f64::from_le_bytes(f));
            }
            mats.push(Mat { rows, cols, data });
        }
        let coef_z0 = mats.pop().unwrap();
        let coef_z = mats.pop().unwrap();
        let coef_y = mats.pop().unwrap();
        nodes.push(NodeMaps { coef_y, coef_z, coef_z0 });
    }
    let basis = RegressionBasis { state_dim: ensemble.state_dim };
    if basis.size() != bsz {
        return Err(MfgError::Serialization { detail: "basis size mismatch".into() });
    }
    let flow = MeasureFlow::from_ensemble(&ensemble);
    Ok(StoredSolution { ensemble, flow, control, control_dim, maps: DecouplingMaps { basis, nodes } })
}
