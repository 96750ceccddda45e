//! Fluid limit of the Whittle index policy around the relaxed optimum.
//!
//! Inside the region where every queue with index above `w*` is served and
//! the randomized state `(m, l_m)` absorbs the remaining budget, the expected
//! proportions evolve affinely. Dropping the coordinate `z^k_{l_k}` of each
//! class (it is `gamma_k` minus the rest) gives `z~(t+1) = Q z~(t) + C`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{action_kernel, Action, ClassSpec};
use crate::relaxed::{active_fraction, RelaxedSolution};
use crate::whittle::whittle_algorithm1;

#[derive(Debug, Clone)]
pub struct FluidSystem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `layout[i] = (class, state)` of reduced coordinate `i`.
    pub layout: Vec<(usize, usize)>,
    pub solution: RelaxedSolution,
    pub classes: Vec<ClassSpec>,
    pub buffer: usize,
    pub alpha: f64,
    /// Whittle indices per class.
    pub indices: Vec<Vec<f64>>,
    full: DMatrix<f64>,
    full_offset: DVector<f64>,
}

/// How a state is treated inside the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Passive,
    Active,
    Pivot,
}

impl FluidSystem {
    fn slots(&self) -> usize {
        self.buffer + 1
    }

    fn flatten(&self, z: &[Vec<f64>]) -> Result<DVector<f64>> {
        if z.len() != self.classes.len() || z.iter().any(|row| row.len() != self.slots()) {
            return Err(Error::Size(format!(
                "proportions must be {} rows of {} states",
                self.classes.len(),
                self.slots()
            )));
        }
        Ok(DVector::from_iterator(z.len() * self.slots(), z.iter().flatten().copied()))
    }

    fn unflatten(&self, v: &DVector<f64>) -> Vec<Vec<f64>> {
        v.as_slice().chunks(self.slots()).map(<[f64]>::to_vec).collect()
    }

    pub fn reduce(&self, z: &[Vec<f64>]) -> Result<DVector<f64>> {
        self.flatten(z)?;
        Ok(DVector::from_iterator(self.layout.len(), self.layout.iter().map(|&(k, j)| z[k][j])))
    }

    /// Restores the eliminated coordinates from the class masses.
    pub fn expand(&self, reduced: &DVector<f64>) -> Vec<Vec<f64>> {
        let mut z = vec![vec![0.0; self.slots()]; self.classes.len()];
        for (&(k, j), v) in self.layout.iter().zip(reduced.iter()) {
            z[k][j] = *v;
        }
        for (k, row) in z.iter_mut().enumerate() {
            let l = self.solution.l[k] as usize;
            let rest: f64 = row.iter().sum();
            row[l] = self.classes[k].fraction() - rest;
        }
        z
    }

    /// One step of the affine recursion on full proportion vectors.
    pub fn step_full(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let v = self.flatten(z)?;
        Ok(self.unflatten(&(&self.full * v + &self.full_offset)))
    }

    /// One step of the reduced map `Q z~ + C`.
    pub fn step_reduced(&self, reduced: &DVector<f64>) -> DVector<f64> {
        &self.q * reduced + &self.c
    }

    /// `sum_{W > w*} z < alpha <= sum_{W >= w*} z`.
    pub fn in_region(&self, z: &[Vec<f64>]) -> bool {
        let w = self.solution.w_star;
        let mut above = 0.0;
        let mut at_least = 0.0;
        for (row, idx) in z.iter().zip(&self.indices) {
            for (p, v) in row.iter().zip(idx) {
                if *v > w {
                    above += p;
                }
                if *v >= w {
                    at_least += p;
                }
            }
        }
        above < self.alpha && self.alpha <= at_least
    }

    /// `z~*` from `(I - Q) z~ = C`.
    pub fn fixed_point(&self) -> Result<DVector<f64>> {
        let n = self.layout.len();
        let lhs = DMatrix::<f64>::identity(n, n) - &self.q;
        lhs.lu()
            .solve(&self.c)
            .ok_or_else(|| Error::Infeasible("I - Q is singular".into()))
    }

    pub fn z_star_reduced(&self) -> DVector<f64> {
        self.reduce(&self.solution.z_star).expect("solution shape")
    }
}

/// Assembles the affine map for the relaxed solution `solution`.
pub fn build_fluid_map(solution: &RelaxedSolution, classes: &[ClassSpec], buffer: usize) -> Result<FluidSystem> {
    let k_count = classes.len();
    if solution.l.len() != k_count || solution.m == 0 || solution.m > k_count {
        return Err(Error::Domain("solution does not match the classes".into()));
    }
    for (k, (&l, class)) in solution.l.iter().zip(classes).enumerate() {
        if l < 0 || l >= class.rate() as i64 || l as usize > buffer {
            return Err(Error::Domain(format!(
                "class {} threshold {l} must lie in [0, R_k - 1]",
                k + 1
            )));
        }
    }
    if solution.z_star.len() != k_count || solution.z_star.iter().any(|r| r.len() != buffer + 1) {
        return Err(Error::Domain("z_star does not match the buffer".into()));
    }
    let m = solution.m_index();
    let alpha = active_fraction(classes, buffer, &solution.l, solution.theta, m)?;
    let indices = classes
        .iter()
        .map(|c| whittle_algorithm1(c, buffer).map(|t| t.values))
        .collect::<Result<Vec<_>>>()?;

    let slots = buffer + 1;
    let dim = k_count * slots;
    let role = |k: usize, j: usize| {
        let l = solution.l[k] as usize;
        if k == m && j == l {
            Role::Pivot
        } else if j > l {
            Role::Active
        } else {
            Role::Passive
        }
    };
    let kernels: Vec<[crate::model::Kernel; 2]> = classes
        .iter()
        .map(|c| [action_kernel(c, Action::Passive, buffer), action_kernel(c, Action::Active, buffer)])
        .collect();

    let mut full = DMatrix::<f64>::zeros(dim, dim);
    let mut full_offset = DVector::<f64>::zeros(dim);
    let pivot = solution.l[m] as usize;
    for k in 0..k_count {
        for j in 0..slots {
            let col = k * slots + j;
            match role(k, j) {
                Role::Passive | Role::Pivot => {
                    for i in 0..slots {
                        full[(k * slots + i, col)] += kernels[k][0].get(j, i);
                    }
                }
                Role::Active => {
                    for i in 0..slots {
                        full[(k * slots + i, col)] += kernels[k][1].get(j, i);
                        // served mass is taken out of the pivot's budget
                        full[(m * slots + i, col)] += kernels[m][0].get(pivot, i) - kernels[m][1].get(pivot, i);
                    }
                }
            }
        }
    }
    for i in 0..slots {
        full_offset[m * slots + i] = alpha * (kernels[m][1].get(pivot, i) - kernels[m][0].get(pivot, i));
    }

    // z = E z~ + g, keep rows other than l_k
    let layout: Vec<(usize, usize)> = (0..k_count)
        .flat_map(|k| (0..slots).filter(move |&j| j as i64 != solution.l[k]).map(move |j| (k, j)))
        .collect();
    let red = layout.len();
    let mut expand = DMatrix::<f64>::zeros(dim, red);
    let mut base = DVector::<f64>::zeros(dim);
    for (r, &(k, j)) in layout.iter().enumerate() {
        expand[(k * slots + j, r)] = 1.0;
        expand[(k * slots + solution.l[k] as usize, r)] = -1.0;
    }
    for (k, class) in classes.iter().enumerate() {
        base[k * slots + solution.l[k] as usize] = class.fraction();
    }
    let mut project = DMatrix::<f64>::zeros(red, dim);
    for (r, &(k, j)) in layout.iter().enumerate() {
        project[(r, k * slots + j)] = 1.0;
    }
    let q = &project * &full * &expand;
    let c = &project * (&full * &base + &full_offset);

    Ok(FluidSystem {
        q,
        c,
        layout,
        solution: solution.clone(),
        classes: classes.to_vec(),
        buffer,
        alpha,
        indices,
        full,
        full_offset,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FluidTrajectory {
    /// `states[t][k][j]`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// Whether the start lies in the region where the affine map is exact.
    pub started_in_region: bool,
}

impl FluidTrajectory {
    /// Max-norm distance of each iterate to `target`.
    pub fn distances(&self, target: &[Vec<f64>]) -> Vec<f64> {
        self.states.iter().map(|z| max_distance(z, target)).collect()
    }

    /// Rows `t, class, state, value`, classes numbered from 1.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.states.iter().enumerate().flat_map(|(t, z)| {
            z.iter()
                .enumerate()
                .flat_map(move |(k, row)| row.iter().enumerate().map(move |(j, v)| (t, k + 1, j, *v)))
        })
    }
}

/// `z` with every class multiplied by `1 + eps (s_j - mean)` for a fixed
/// wiggle `s_j = sin(1.3 j + k)`, centred so that class masses and supports
/// are unchanged. Generic enough to excite every mode of the fluid map.
pub fn perturbed(z: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    z.iter()
        .enumerate()
        .map(|(k, row)| {
            let wiggle: Vec<f64> = (0..row.len()).map(|j| (1.3 * j as f64 + k as f64).sin()).collect();
            let mass: f64 = row.iter().sum();
            if mass == 0.0 {
                return row.clone();
            }
            let mean = row.iter().zip(&wiggle).map(|(z, s)| z * s).sum::<f64>() / mass;
            row.iter().zip(&wiggle).map(|(z, s)| z * (1.0 + eps * (s - mean))).collect()
        })
        .collect()
}

pub fn max_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `T` affine iterations from the full proportion vector `z0`.
pub fn iterate_fluid(system: &FluidSystem, z0: &[Vec<f64>], steps: usize) -> Result<FluidTrajectory> {
    let started_in_region = system.in_region(z0);
    let mut reduced = system.reduce(z0)?;
    let mut states = vec![system.expand(&reduced)];
    for _ in 0..steps {
        reduced = system.step_reduced(&reduced);
        states.push(system.expand(&reduced));
    }
    Ok(FluidTrajectory {
        states,
        started_in_region,
    })
}

/// Expected next proportions under the Whittle index policy, for any `z`.
///
/// The budget `alpha` goes to the highest index values first; states sharing
/// the boundary value are served in proportion to their mass.
pub fn whittle_drift(z: &[Vec<f64>], classes: &[ClassSpec], indices: &[Vec<f64>], alpha: f64, buffer: usize) -> Vec<Vec<f64>> {
    let probs = service_probabilities(z, indices, alpha);
    let mut next = vec![vec![0.0; buffer + 1]; classes.len()];
    for (k, class) in classes.iter().enumerate() {
        let rate = class.rate() as usize;
        for j in 0..=buffer {
            let mass = z[k][j];
            if mass == 0.0 {
                continue;
            }
            let p = probs[k][j];
            for a in 0..rate {
                let share = mass * class.rho();
                next[k][(j + a).min(buffer)] += share * (1.0 - p);
                next[k][(j.saturating_sub(rate) + a).min(buffer)] += share * p;
            }
        }
    }
    next
}

/// Probability that a queue in `(k, j)` is served when a fraction `alpha` of
/// all queues can transmit.
pub fn service_probabilities(z: &[Vec<f64>], indices: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let mut groups: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let mut states: Vec<(f64, usize, usize)> = Vec::new();
    for (k, row) in indices.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            states.push((*v, k, j));
        }
    }
    states.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (v, k, j) in states {
        match groups.last_mut() {
            Some((w, members)) if *w == v => members.push((k, j)),
            _ => groups.push((v, vec![(k, j)])),
        }
    }
    let mut probs: Vec<Vec<f64>> = indices.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut left = alpha;
    for (_, members) in groups {
        if left <= 0.0 {
            break;
        }
        let mass: f64 = members.iter().map(|&(k, j)| z[k][j]).sum();
        if mass <= 0.0 {
            continue;
        }
        let p = (left / mass).min(1.0);
        for (k, j) in members {
            probs[k][j] = p;
        }
        left -= mass * p;
    }
    probs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant eigenvalue modulus by power iteration, using the two-step ratio
/// `sqrt(|Q^2 x| / |x|)` so that `+-lambda` pairs do not oscillate.
pub fn spectral_radius(q: &DMatrix<f64>) -> Result<SpectralEstimate> {
    if !q.is_square() {
        return Err(Error::Size(format!("matrix is {}x{}", q.nrows(), q.ncols())));
    }
    let n = q.nrows();
    if n == 0 {
        return Ok(SpectralEstimate { radius: 0.0, iterations: 0, converged: true });
    }
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 1e-3 * ((i as f64) * 0.7).sin());
    x /= x.norm();
    let mut last = f64::NAN;
    let mut stable = 0;
    const CAP: usize = 100_000;
    for it in 1..=CAP {
        let y = q * (q * &x);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(SpectralEstimate { radius: 0.0, iterations: it, converged: true });
        }
        let radius = norm.sqrt();
        x = y / norm;
        if (radius - last).abs() <= 1e-13 * radius.max(1.0) {
            stable += 1;
            if stable >= 5 {
                return Ok(SpectralEstimate { radius, iterations: it, converged: true });
            }
        } else {
            stable = 0;
        }
        last = radius;
    }
    Ok(SpectralEstimate { radius: last, iterations: CAP, converged: false })
}
