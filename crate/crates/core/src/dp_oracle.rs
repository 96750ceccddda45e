//! Average-cost dynamic programming for one queue under a transmission
//! subsidy `W`, and a small joint check over several queues.
//!
//! The per-slot cost is `a q + W s`. Value iteration is run in relative form,
//! re-anchored at `V(0) = 0` after each sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{action_kernel, step_unchecked, Action, ClassSpec};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Largest buffer accepted by the single-queue oracle.
pub const MAX_BUFFER: usize = 200;
/// Largest joint state space accepted by [`joint_value_iteration`].
pub const MAX_JOINT_STATES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpSolution {
    pub class: ClassSpec,
    pub buffer: usize,
    pub subsidy: f64,
    /// Relative values, `values[0] = 0`.
    pub values: Vec<f64>,
    /// Optimal average cost.
    pub theta_avg: f64,
    pub policy: Vec<Action>,
    pub iterations: usize,
    pub span_residual: f64,
}

impl DpSolution {
    /// Largest passive state when the policy is of threshold type.
    pub fn threshold(&self) -> Option<i64> {
        let passive = self.policy.iter().take_while(|s| !s.is_active()).count();
        self.policy[passive..]
            .iter()
            .all(|s| s.is_active())
            .then_some(passive as i64 - 1)
    }
}

/// Sparse rows `(next, prob)` of the passive and active kernels.
struct Transitions {
    rows: [Vec<Vec<(usize, f64)>>; 2],
}

impl Transitions {
    fn new(class: &ClassSpec, buffer: usize) -> Self {
        let sparse = |action| {
            let kernel = action_kernel(class, action, buffer);
            (0..=buffer)
                .map(|q| {
                    kernel
                        .row(q)
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(j, p)| (j, *p))
                        .collect()
                })
                .collect()
        };
        Transitions {
            rows: [sparse(Action::Passive), sparse(Action::Active)],
        }
    }

    fn expect(&self, action: Action, q: usize, values: &[f64]) -> f64 {
        self.rows[action.is_active() as usize][q]
            .iter()
            .map(|(j, p)| p * values[*j])
            .sum()
    }
}

/// State-action values `(Q(q, 0), Q(q, 1))` of `V`.
fn q_values(values: &[f64], class: &ClassSpec, subsidy: f64, trans: &Transitions) -> Vec<(f64, f64)> {
    (0..values.len())
        .map(|q| {
            let hold = class.weight() * q as f64;
            (
                hold + trans.expect(Action::Passive, q, values),
                hold + subsidy + trans.expect(Action::Active, q, values),
            )
        })
        .collect()
}

fn greedy((passive, active): (f64, f64)) -> (f64, Action) {
    // ties go to the passive action
    if active < passive {
        (active, Action::Active)
    } else {
        (passive, Action::Passive)
    }
}

fn check_values(values: &[f64], buffer: usize) -> Result<()> {
    if values.len() != buffer + 1 {
        return Err(Error::Size(format!("value vector has {} entries, expected {}", values.len(), buffer + 1)));
    }
    Ok(())
}

/// One application of `min_s {a q + W s + E[V(q') | q, s]}` with its greedy
/// policy.
pub fn bellman_operator(values: &[f64], class: &ClassSpec, subsidy: f64, buffer: usize) -> Result<(Vec<f64>, Vec<Action>)> {
    check_values(values, buffer)?;
    let trans = Transitions::new(class, buffer);
    Ok(q_values(values, class, subsidy, &trans).into_iter().map(greedy).unzip())
}

fn span(diff: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = diff.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    hi - lo
}

pub fn relative_value_iteration(
    class: &ClassSpec,
    subsidy: f64,
    buffer: usize,
    tol: f64,
    max_iter: usize,
) -> Result<DpSolution> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if buffer == 0 || buffer > MAX_BUFFER {
        return Err(Error::Size(format!("buffer {buffer} outside 1..={MAX_BUFFER}")));
    }
    let trans = Transitions::new(class, buffer);
    let mut values = vec![0.0; buffer + 1];
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        let next: Vec<f64> = q_values(&values, class, subsidy, &trans)
            .into_iter()
            .map(|qv| greedy(qv).0)
            .collect();
        residual = span(next.iter().zip(&values).map(|(n, v)| n - v));
        let offset = next[0];
        values = next.into_iter().map(|v| v - offset).collect();
        if residual < tol {
            let policy = q_values(&values, class, subsidy, &trans)
                .into_iter()
                .map(|qv| greedy(qv).1)
                .collect();
            return Ok(DpSolution {
                class: class.clone(),
                buffer,
                subsidy,
                values,
                theta_avg: offset,
                policy,
                iterations: iteration,
                span_residual: residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub values_nondecreasing: bool,
    pub r_convex: bool,
    pub policy_monotone: bool,
    /// Action gap nonincreasing on `0..=L-R`, where no passive successor is
    /// clipped by the buffer.
    pub gap_nonincreasing: bool,
    /// Same over the whole buffer; informational, the clipping at `L` can
    /// raise the gap in the last `R` states.
    pub gap_nonincreasing_to_buffer: bool,
    pub violations: Vec<String>,
}

impl StructureReport {
    pub fn all_pass(&self) -> bool {
        self.values_nondecreasing && self.r_convex && self.policy_monotone && self.gap_nonincreasing
    }
}

/// Action gap `Q(q, 1) - Q(q, 0)` of `V` at subsidy `W`.
pub fn action_gap(values: &[f64], class: &ClassSpec, subsidy: f64, buffer: usize) -> Result<Vec<f64>> {
    check_values(values, buffer)?;
    let trans = Transitions::new(class, buffer);
    Ok(q_values(values, class, subsidy, &trans)
        .into_iter()
        .map(|(p, a)| a - p)
        .collect())
}

/// `V(y + R) - V(x + R) >= V(y) - V(x)` for all `x < y` with `y + R <= L`.
pub fn is_r_convex(values: &[f64], rate: usize, slack: f64) -> bool {
    is_r_convex_up_to(values, rate, values.len() - 1, slack)
}

/// [`is_r_convex`] restricted to pairs with `y + R <= top`.
pub fn is_r_convex_up_to(values: &[f64], rate: usize, top: usize, slack: f64) -> bool {
    let top = top.min(values.len() - 1);
    (rate..=top).all(|yr| {
        let y = yr - rate;
        (0..y).all(|x| values[yr] - values[x + rate] >= values[y] - values[x] - slack)
    })
}

pub fn is_nondecreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// Monotonicity, `R`-convexity, threshold shape and the decreasing action
/// gap of a converged solution.
pub fn verify_structure(sol: &DpSolution) -> StructureReport {
    let slack = 1e-7 * (1.0 + sol.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let rate = sol.class.rate() as usize;
    let mut violations = Vec::new();

    let values_nondecreasing = is_nondecreasing(&sol.values, slack);
    if !values_nondecreasing {
        violations.push("V decreases".into());
    }
    let r_convex = is_r_convex(&sol.values, rate, slack);
    if !r_convex {
        violations.push("V is not R-convex".into());
    }
    let policy_monotone = sol.policy.windows(2).all(|w| w[0] <= w[1]);
    if !policy_monotone {
        violations.push("policy is not monotone".into());
    }
    let gaps = action_gap(&sol.values, &sol.class, sol.subsidy, sol.buffer).unwrap_or_default();
    let interior = (sol.buffer + 1).saturating_sub(rate).min(gaps.len());
    let gap_nonincreasing = gaps[..interior].windows(2).all(|w| w[1] <= w[0] + slack);
    if !gap_nonincreasing {
        violations.push("action gap increases".into());
    }
    let gap_nonincreasing_to_buffer = gaps.windows(2).all(|w| w[1] <= w[0] + slack);
    StructureReport {
        values_nondecreasing,
        r_convex,
        policy_monotone,
        gap_nonincreasing,
        gap_nonincreasing_to_buffer,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointSolution {
    pub theta: f64,
    pub states: usize,
    pub iterations: usize,
}

/// Relative value iteration on the product of independent queues where every
/// queue may transmit; `counts[k]` queues belong to `classes[k]`.
pub fn joint_value_iteration(
    classes: &[ClassSpec],
    counts: &[usize],
    subsidy: f64,
    buffer: usize,
    tol: f64,
) -> Result<JointSolution> {
    if classes.len() != counts.len() {
        return Err(Error::Size(format!("{} classes but {} counts", classes.len(), counts.len())));
    }
    let queues: Vec<&ClassSpec> = classes
        .iter()
        .zip(counts)
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    if queues.is_empty() {
        return Err(Error::Size("no queues".into()));
    }
    let side = buffer + 1;
    let states = queues
        .iter()
        .try_fold(1usize, |acc, _| acc.checked_mul(side))
        .filter(|&s| s <= MAX_JOINT_STATES)
        .ok_or_else(|| Error::Size(format!("joint state space exceeds {MAX_JOINT_STATES}")))?;
    let n = queues.len();

    let decode = |mut idx: usize| -> Vec<usize> {
        let mut q = vec![0; n];
        for slot in q.iter_mut() {
            *slot = idx % side;
            idx /= side;
        }
        q
    };
    // per state and action vector: holding-plus-subsidy cost and sparse successors
    let mut tables: Vec<Vec<(f64, Vec<(usize, f64)>)>> = Vec::with_capacity(states);
    for idx in 0..states {
        let q = decode(idx);
        let hold: f64 = queues.iter().zip(&q).map(|(c, &x)| c.weight() * x as f64).sum();
        let mut per_action = Vec::with_capacity(1 << n);
        for mask in 0..1usize << n {
            let mut succ = vec![(0usize, 1.0f64)];
            let mut stride = 1;
            for (i, class) in queues.iter().enumerate() {
                let action = Action::from_bit(((mask >> i) & 1) as u8);
                let rate = class.rate() as usize;
                let mut grown = Vec::with_capacity(succ.len() * rate);
                for (base, p) in &succ {
                    for a in 0..rate {
                        let next = step_unchecked(q[i], action, a, rate, buffer);
                        grown.push((base + next * stride, p * class.rho()));
                    }
                }
                succ = grown;
                stride *= side;
            }
            per_action.push((hold + subsidy * mask.count_ones() as f64, succ));
        }
        tables.push(per_action);
    }

    let mut values = vec![0.0; states];
    for iteration in 1..=DEFAULT_MAX_ITER {
        let next: Vec<f64> = tables
            .iter()
            .map(|per_action| {
                per_action
                    .iter()
                    .map(|(cost, succ)| cost + succ.iter().map(|(j, p)| p * values[*j]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let residual = span(next.iter().zip(&values).map(|(a, b)| a - b));
        let offset = next[0];
        values = next.into_iter().map(|v| v - offset).collect();
        if residual < tol {
            return Ok(JointSolution {
                theta: offset,
                states,
                iterations: iteration,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: DEFAULT_MAX_ITER,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxed::dual_threshold;
    use crate::stationary::{mean_cost, passive_time};
    use crate::whittle::whittle_algorithm1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn class(rate: u32, weight: f64) -> ClassSpec {
        ClassSpec::single(rate, weight).unwrap()
    }

    fn solve(rate: u32, buffer: usize, w: f64) -> DpSolution {
        relative_value_iteration(&class(rate, 1.0), w, buffer, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }

    #[test]
    fn bellman_examples() {
        let c = class(5, 1.0);
        let (v, _) = bellman_operator(&[0.0; 11], &c, 0.0, 10).unwrap();
        for (q, x) in v.iter().enumerate() {
            assert_eq!(*x, q as f64);
        }
        let (_, policy) = bellman_operator(&[0.0; 11], &c, 3.0, 10).unwrap();
        assert_eq!(policy[2], Action::Passive);
        assert!(bellman_operator(&[0.0; 5], &c, 0.0, 10).is_err());
    }

    fn random_increasing_r_convex(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        // convex increasing sequences are R-convex for every R
        let mut v = vec![0.0];
        let mut slope = rng.random_range(0.0..1.0);
        for _ in 1..len {
            slope += rng.random_range(0.0..1.0);
            let last = *v.last().unwrap();
            v.push(last + slope);
        }
        v
    }

    #[test]
    fn bellman_preserves_structure_below_the_buffer_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let rate = rng.random_range(2..8u32);
            let buffer = rng.random_range(3 * rate as usize..50);
            let c = class(rate, rng.random_range(0.5..2.0));
            let w = rng.random_range(0.0..50.0);
            let v = random_increasing_r_convex(&mut rng, buffer + 1);
            let (next, _) = bellman_operator(&v, &c, w, buffer).unwrap();
            assert!(is_nondecreasing(&next, 1e-9));
            assert!(is_r_convex_up_to(&next, rate as usize, buffer - rate as usize, 1e-9));
        }
    }

    #[test]
    fn buffer_clipping_can_break_r_convexity() {
        // passive moves from L stay at L, which bends V' down at the top
        let c = class(2, 1.0);
        let v: Vec<f64> = (0..10).map(|q| (q * q) as f64).collect();
        let (next, _) = bellman_operator(&v, &c, 35.0, 9).unwrap();
        assert!(is_nondecreasing(&next, 1e-9));
        assert!(is_r_convex_up_to(&next, 2, 7, 1e-9));
        assert!(!is_r_convex(&next, 2, 1e-9));
    }

    #[test]
    fn converged_values_are_r_convex() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rate = rng.random_range(2..7u32);
            let buffer = rng.random_range(2 * rate as usize..30);
            let c = class(rate, rng.random_range(0.5..2.0));
            let top = whittle_algorithm1(&c, buffer).unwrap().values[buffer];
            let w = rng.random_range(0.0..top);
            let sol = relative_value_iteration(&c, w, buffer, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let report = verify_structure(&sol);
            assert!(report.all_pass(), "seed {seed}: {:?}", report.violations);
        }
    }

    #[test]
    fn above_the_top_index_low_states_are_transient() {
        // never transmitting makes L absorbing, so the actions below L do not
        // change the average cost and the greedy policy need not be monotone
        let c = class(3, 1.0);
        let top = whittle_algorithm1(&c, 7).unwrap().values[7];
        let sol = relative_value_iteration(&c, top + 1.0, 7, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((sol.theta_avg - 7.0).abs() < 1e-6);
        assert_eq!(sol.policy[7], Action::Passive);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(solve(5, 30, 10.0).threshold(), Some(3));
        // at W = 0 both actions coincide in state 0 and the tie goes passive
        assert_eq!(solve(5, 30, 0.0).threshold(), Some(0));
        assert_eq!(solve(5, 30, 0.0).policy[1..], vec![Action::Active; 30][..]);
        assert_eq!(solve(5, 30, 1e6).threshold(), Some(30));
    }

    #[test]
    fn average_cost_matches_stationary_curves() {
        let c = class(5, 1.0);
        let sol = solve(5, 30, 10.0);
        let n = sol.threshold().unwrap();
        let expected = mean_cost(&c, n, 30).unwrap() + 10.0 * (1.0 - passive_time(&c, n, 30).unwrap());
        assert!((sol.theta_avg - expected).abs() < 1e-6);
    }

    #[test]
    fn structure_reports() {
        assert!(verify_structure(&solve(5, 30, 10.0)).all_pass());
        let sol = solve(2, 6, 1.5);
        assert!(verify_structure(&sol).all_pass());
        let table = whittle_algorithm1(&class(2, 1.0), 6).unwrap();
        assert_eq!(sol.threshold(), Some(dual_threshold(1.5, &table).upper()));

        let mut dip = solve(5, 30, 10.0);
        dip.values[10] -= 50.0;
        let report = verify_structure(&dip);
        assert!(!report.values_nondecreasing);
        assert!(!report.all_pass());
    }

    #[test]
    fn thresholds_follow_the_index_table() {
        for (rate, buffer) in [(3u32, 12usize), (5, 30), (4, 9)] {
            let c = class(rate, 1.0);
            let table = whittle_algorithm1(&c, buffer).unwrap();
            let mut levels: Vec<f64> = table.values.clone();
            levels.dedup();
            let mut probes = vec![levels[0] - 1.0];
            for pair in levels.windows(2) {
                probes.push(0.5 * (pair[0] + pair[1]));
            }
            for w in probes {
                let sol = relative_value_iteration(&c, w, buffer, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                assert_eq!(sol.threshold(), Some(dual_threshold(w, &table).upper()), "R={rate} L={buffer} W={w}");
            }
        }
    }

    #[test]
    fn indifference_at_index_values() {
        let c = class(5, 1.0);
        let table = whittle_algorithm1(&c, 30).unwrap();
        for n in 1..4 {
            let w = table.values[n];
            let sol = relative_value_iteration(&c, w, 30, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let gap = action_gap(&sol.values, &c, w, 30).unwrap();
            assert!(gap[n].abs() < 10.0 * DEFAULT_TOL, "n={n} gap={}", gap[n]);
        }
    }

    #[test]
    fn joint_examples() {
        let single = |rate, buffer, w| solve(rate, buffer, w).theta_avg;
        let joint = joint_value_iteration(&[class(2, 1.0)], &[2], 1.0, 4, DEFAULT_TOL).unwrap();
        assert!((joint.theta - 2.0 * single(2, 4, 1.0)).abs() < 1e-6);
        let joint = joint_value_iteration(&[class(3, 1.0)], &[1], 2.0, 7, DEFAULT_TOL).unwrap();
        assert!((joint.theta - single(3, 7, 2.0)).abs() < 1e-6);
        let joint = joint_value_iteration(&[class(2, 1.0), class(3, 1.0)], &[1, 1], 2.0, 5, DEFAULT_TOL).unwrap();
        assert!((joint.theta - single(2, 5, 2.0) - single(3, 5, 2.0)).abs() < 1e-6);
        assert!(joint_value_iteration(&[class(2, 1.0)], &[5], 1.0, 30, DEFAULT_TOL).is_err());
    }
}
