//! Empirical measures on ℝⁿ: uniform point clouds, exact quadratic
//! Wasserstein distances, moments, and conditional-law extraction from path
//! ensembles.
//!
//! All measures here are uniform over their atoms; that is the only kind the
//! particle solvers produce. Distances between equal-size clouds are exact:
//! order statistics in dimension one, optimal assignment otherwise.

use std::sync::Arc;

use crate::error::{MfgError, Result};
use crate::fbsde::PathEnsemble;
use crate::num::Scalar;

/// Uniform empirical measure: `count` atoms in ℝ^`dim`, each with mass
/// 1/count. The atom mean is cached because coefficient callables read it on
/// every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure<T> {
    dim: usize,
    atoms: Vec<T>,
    mean: Vec<T>,
}

impl<T: Scalar> EmpiricalMeasure<T> {
    pub fn new(dim: usize, atoms: Vec<T>) -> Self {
        assert!(dim > 0, "measure dimension must be positive");
        assert!(!atoms.is_empty() && atoms.len() % dim == 0, "atom array must hold whole atoms");
        debug_assert!(atoms.iter().all(|v| v.is_finite()), "atoms must be finite");
        let count = atoms.len() / dim;
        let mut mean = vec![T::zero(); dim];
        for a in 0..count {
            for c in 0..dim {
                mean[c] += atoms[a * dim + c];
            }
        }
        let inv = T::one() / T::of_usize(count);
        for m in mean.iter_mut() {
            *m *= inv;
        }
        EmpiricalMeasure { dim, atoms, mean }
    }

    pub fn point_mass(point: &[T]) -> Self {
        Self::new(point.len(), point.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // at least one atom by construction
    }

    pub fn atom(&self, i: usize) -> &[T] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms_flat(&self) -> &[T] {
        &self.atoms
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Mean of |x|^q over atoms, q ≥ 1.
    pub fn moment(&self, q: T) -> Result<T> {
        if q < T::one() {
            return Err(MfgError::InvalidParams { detail: format!("moment order {q} < 1") });
        }
        let mut acc = T::zero();
        for i in 0..self.len() {
            let r = crate::linalg::norm2(self.atom(i));
            acc += r.powf(q);
        }
        Ok(acc / T::of_usize(self.len()))
    }
}

/// One empirical measure per (common-noise path, time node). Shared via
/// `Arc` so that flows can be handed to solvers without copying atom arrays.
#[derive(Debug, Clone)]
pub struct MeasureFlow<T> {
    pub paths: usize,
    pub nodes: usize,
    measures: Vec<Arc<EmpiricalMeasure<T>>>,
}

impl<T: Scalar> MeasureFlow<T> {
    pub fn new(paths: usize, nodes: usize, measures: Vec<Arc<EmpiricalMeasure<T>>>) -> Self {
        assert_eq!(measures.len(), paths * nodes);
        MeasureFlow { paths, nodes, measures }
    }

    pub fn at(&self, path: usize, node: usize) -> &Arc<EmpiricalMeasure<T>> {
        &self.measures[path * self.nodes + node]
    }

    /// Extract the full flow of a populated ensemble: the measure at
    /// (path, node) collects the states of every particle sharing that
    /// common-noise path.
    pub fn from_ensemble(ens: &PathEnsemble<T>) -> Self {
        let nodes = ens.grid.n_nodes();
        let mut measures = Vec::with_capacity(ens.layout.paths * nodes);
        for p in 0..ens.layout.paths {
            for j in 0..nodes {
                measures.push(Arc::new(conditional_law(ens, j, p).expect("in-range node")));
            }
        }
        MeasureFlow { paths: ens.layout.paths, nodes, measures }
    }

    /// Max over nodes of the mean-over-paths squared flow distance to
    /// another flow of identical shape. Atoms are compared particle-wise,
    /// which upper-bounds the squared Wasserstein distance, so thresholding
    /// this quantity enforces the W₂² stopping criterion conservatively.
    pub fn max_mean_sq_distance(&self, other: &MeasureFlow<T>) -> T {
        assert_eq!(self.paths, other.paths);
        assert_eq!(self.nodes, other.nodes);
        let mut worst = T::zero();
        for j in 0..self.nodes {
            let mut acc = T::zero();
            for p in 0..self.paths {
                let a = self.at(p, j);
                let b = other.at(p, j);
                let mut d = T::zero();
                let count = a.len();
                for i in 0..count {
                    d += crate::linalg::norm2_sq(&crate::linalg::sub(a.atom(i), b.atom(i)));
                }
                acc += d / T::of_usize(count);
            }
            worst = worst.max(acc / T::of_usize(self.paths));
        }
        worst
    }
}

/// Exact quadratic Wasserstein distance between equal-size uniform clouds.
///
/// Dimension one pairs order statistics; higher dimensions solve the optimal
/// assignment problem on squared Euclidean costs. The assignment path is
/// capped at 1024 atoms per call.
pub fn w2<T: Scalar>(mu: &EmpiricalMeasure<T>, nu: &EmpiricalMeasure<T>) -> Result<T> {
    if mu.len() != nu.len() {
        return Err(MfgError::SizeMismatch { left: mu.len(), right: nu.len() });
    }
    if mu.dim() != nu.dim() {
        return Err(MfgError::SizeMismatch { left: mu.dim(), right: nu.dim() });
    }
    let n = mu.len();
    if mu.dim() == 1 {
        let mut a: Vec<T> = mu.atoms_flat().to_vec();
        let mut b: Vec<T> = nu.atoms_flat().to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).expect("finite atoms"));
        b.sort_by(|x, y| x.partial_cmp(y).expect("finite atoms"));
        let mut acc = T::zero();
        for i in 0..n {
            let d = a[i] - b[i];
            acc += d * d;
        }
        return Ok((acc / T::of_usize(n)).sqrt());
    }
    if n > 1024 {
        return Err(MfgError::InvalidParams {
            detail: format!("assignment-based distance capped at 1024 atoms, got {n}"),
        });
    }
    let mut cost = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = crate::linalg::norm2_sq(&crate::linalg::sub(mu.atom(i), nu.atom(j)));
        }
    }
    let (total, _) = min_cost_assignment(&cost, n);
    Ok((total / T::of_usize(n)).sqrt())
}

/// Exact minimum-cost perfect assignment by shortest augmenting paths with
/// dual potentials (O(n³)). Returns (total cost, column-to-row assignment).
pub fn min_cost_assignment<T: Scalar>(cost: &[T], n: usize) -> (T, Vec<usize>) {
    assert_eq!(cost.len(), n * n);
    let inf = T::infinity();
    // 1-based internally; p[j] = row matched to column j.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = T::zero();
    for j in 1..=n {
        assignment[j - 1] = p[j] - 1;
        total += cost[(p[j] - 1) * n + (j - 1)];
    }
    (total, assignment)
}

/// Mean of |x|^q over the atoms of `mu`.
pub fn moment<T: Scalar>(mu: &EmpiricalMeasure<T>, q: T) -> Result<T> {
    mu.moment(q)
}

/// Empirical measure of all particle states sharing the given common-noise
/// path at the given time node: the particle estimator of the conditional
/// law of the state given the common noise up to that node.
pub fn conditional_law<T: Scalar>(
    ens: &PathEnsemble<T>,
    t_index: usize,
    noise_path: usize,
) -> Result<EmpiricalMeasure<T>> {
    if t_index >= ens.grid.n_nodes() {
        return Err(MfgError::IndexOutOfRange {
            detail: format!("node {t_index} >= {}", ens.grid.n_nodes()),
        });
    }
    if noise_path >= ens.layout.paths {
        return Err(MfgError::IndexOutOfRange {
            detail: format!("path {noise_path} >= {}", ens.layout.paths),
        });
    }
    let n = ens.state_dim;
    let mut atoms = Vec::with_capacity(ens.layout.particles * n);
    for m in 0..ens.layout.particles {
        atoms.extend_from_slice(ens.x_at(noise_path, m, t_index));
    }
    Ok(EmpiricalMeasure::new(n, atoms))
}

/// Matched-coupling estimator of the conditional chaos distance: mean over
/// trials of (1/k)·Σ_{i<k} |a_i − b_i|². Because the two state blocks are
/// driven by identical noise, this upper-bounds the squared Wasserstein
/// distance between the k-particle law and the k-fold product of the
/// mean-field law.
pub fn chaos_wasserstein<T: Scalar>(
    trials: &[(&[T], &[T])],
    dim: usize,
    k: usize,
) -> Result<T> {
    if trials.is_empty() {
        return Err(MfgError::InvalidParams { detail: "no trials".into() });
    }
    let mut acc = T::zero();
    for (a, b) in trials {
        if a.len() != b.len() {
            return Err(MfgError::SizeMismatch { left: a.len(), right: b.len() });
        }
        if a.len() < k * dim {
            return Err(MfgError::SizeMismatch { left: a.len() / dim, right: k });
        }
        let mut s = T::zero();
        for i in 0..k {
            let ai = &a[i * dim..(i + 1) * dim];
            let bi = &b[i * dim..(i + 1) * dim];
            s += crate::linalg::norm2_sq(&crate::linalg::sub(ai, bi));
        }
        acc += s / T::of_usize(k);
    }
    Ok(acc / T::of_usize(trials.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(dim: usize, pts: &[f64]) -> EmpiricalMeasure<f64> {
        EmpiricalMeasure::new(dim, pts.to_vec())
    }

    #[test]
    fn w2_identity_is_zero() {
        let mu = cloud(2, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.5]);
        assert!(w2(&mu, &mu).unwrap() < 1e-15);
    }

    #[test]
    fn w2_translation() {
        let mu = cloud(1, &[0.0, 0.0]);
        let nu = cloud(1, &[3.0, 3.0]);
        assert!((w2(&mu, &nu).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn w2_size_mismatch_rejected() {
        let mu = cloud(1, &[0.0]);
        let nu = cloud(1, &[0.0, 1.0]);
        assert!(matches!(w2(&mu, &nu), Err(MfgError::SizeMismatch { .. })));
    }

    #[test]
    fn assignment_matches_brute_force_on_six_atoms() {
        // 6-atom clouds in R^2; compare against all 720 permutations.
        let mut s = crate::rng::CounterStream::new(11, crate::rng::StreamRole::Probe, 0, 0);
        for _ in 0..5 {
            let a: Vec<f64> = (0..12).map(|_| s.normal()).collect();
            let b: Vec<f64> = (0..12).map(|_| s.normal()).collect();
            let mu = cloud(2, &a);
            let nu = cloud(2, &b);
            let n = 6;
            let mut cost = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    cost[i * n + j] =
                        crate::linalg::norm2_sq(&crate::linalg::sub(mu.atom(i), nu.atom(j)));
                }
            }
            let (total, _) = min_cost_assignment(&cost, n);

            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..n).collect();
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = (0..n).map(|i| cost[i * n + p[i]]).sum();
                if c < best {
                    best = c;
                }
            });
            assert!((total - best).abs() < 1e-12, "assignment {total} vs brute {best}");

            let d = w2(&mu, &nu).unwrap();
            assert!((d - (best / n as f64).sqrt()).abs() < 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn moments() {
        let mu = cloud(1, &[1.0, -1.0]);
        assert!((moment(&mu, 2.0).unwrap() - 1.0).abs() < 1e-15);
        let single = cloud(2, &[0.0, 0.0]);
        assert_eq!(moment(&single, 3.0).unwrap(), 0.0);
        let pt = cloud(2, &[3.0, 4.0]);
        assert!((moment(&pt, 2.0).unwrap() - 25.0).abs() < 1e-12);
        assert!(moment(&pt, 0.5).is_err());
    }

    #[test]
    fn chaos_estimator_translation_and_identity() {
        let a = vec![0.0, 0.0, 1.0, 1.0]; // two particles in R^2
        let same = chaos_wasserstein(&[(&a[..], &a[..])], 2, 2).unwrap();
        assert_eq!(same, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let offset = chaos_wasserstein(&[(&a[..], &b[..])], 2, 2).unwrap();
        assert!((offset - 0.25 * 2.0).abs() < 1e-14); // |c|^2 * dim
    }

    #[test]
    fn chaos_estimator_direct_toy() {
        // k=2, N=4 toy data in R^1: only the first k particles count.
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![1.5, 1.0, 0.0, 0.0];
        let got = chaos_wasserstein(&[(&a[..], &b[..])], 1, 2).unwrap();
        let expect: f64 = (0.25 + 1.0) / 2.0;
        assert!((got - expect).abs() < 1e-15);
    }
}
