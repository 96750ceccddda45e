//! The relaxed problem, where the channel budget only has to hold on average.
//!
//! For a subsidy `W` each class idles below its dual threshold
//! `l_k(W) = max{i : W^k_i <= W}`. The optimal subsidy `W*` is the first index
//! value at which the active fraction drops through `alpha`; one class `m`
//! then randomizes between thresholds `l_m` and `l_m - 1` with weight `theta`
//! on `l_m`.

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::Scalar;
use crate::model::{ClassSpec, SystemConfig};
use crate::stationary::ExactCurve;
use crate::whittle::{algorithm1_exact, WhittleTable};

/// Optimal threshold of one class at a given subsidy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DualThreshold {
    Unique(i64),
    /// `W` equals an index value: every threshold between `lower` and `upper`
    /// is optimal.
    Indifferent { upper: i64, lower: i64 },
}

impl DualThreshold {
    pub fn upper(self) -> i64 {
        match self {
            DualThreshold::Unique(l) => l,
            DualThreshold::Indifferent { upper, .. } => upper,
        }
    }

    pub fn lower(self) -> i64 {
        match self {
            DualThreshold::Unique(l) => l,
            DualThreshold::Indifferent { lower, .. } => lower,
        }
    }
}

/// `max{i : W_i <= w}`, with the pair `(l, max{i : W_i < w})` when `w` is an
/// index value.
pub fn dual_threshold(w: f64, table: &WhittleTable) -> DualThreshold {
    let upper = last_below(&table.values, |v| *v <= w);
    let lower = last_below(&table.values, |v| *v < w);
    if upper == lower {
        DualThreshold::Unique(upper)
    } else {
        DualThreshold::Indifferent { upper, lower }
    }
}

fn last_below<T>(values: &[T], pred: impl Fn(&T) -> bool) -> i64 {
    values.iter().rposition(pred).map_or(-1, |i| i as i64)
}

/// Solution of the relaxed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSolution {
    pub w_star: f64,
    /// Randomized class, numbered from 1.
    pub m: usize,
    /// State of class `m` whose index equals `w_star`.
    pub p: i64,
    pub l: Vec<i64>,
    /// Weight on threshold `l_m`; `1 - theta` goes to `l_m - 1`.
    pub theta: f64,
    /// `z_star[k][h]`: fraction of all users in class `k` with `h` packets.
    pub z_star: Vec<Vec<f64>>,
    pub cost_per_user: f64,
}

impl RelaxedSolution {
    pub fn m_index(&self) -> usize {
        self.m - 1
    }
}

/// `sum_k gamma_k (1 - b_{l_k})`, with class `m` (zero-based) replaced by the
/// mixture `theta (1 - b_{l_m}) + (1 - theta) (1 - b_{l_m - 1})`.
pub fn active_fraction(classes: &[ClassSpec], buffer: usize, l: &[i64], theta: f64, m: usize) -> Result<f64> {
    check_thresholds(classes, buffer, l)?;
    let curves: Vec<ExactCurve> = classes.iter().map(|c| ExactCurve::new(c, buffer)).collect();
    let gammas = fractions(classes);
    let theta = BigRational::from_f64(theta);
    Ok(active_exact(&curves, &gammas, l, &theta, m).to_f64())
}

fn check_thresholds(classes: &[ClassSpec], buffer: usize, l: &[i64]) -> Result<()> {
    if l.len() != classes.len() {
        return Err(Error::Size(format!("{} thresholds for {} classes", l.len(), classes.len())));
    }
    if let Some(bad) = l.iter().find(|&&n| n < -1 || n > buffer as i64) {
        return Err(Error::Domain(format!("threshold {bad} outside [-1, {buffer}]")));
    }
    Ok(())
}

fn fractions(classes: &[ClassSpec]) -> Vec<BigRational> {
    classes.iter().map(|c| BigRational::from_f64(c.fraction())).collect()
}

fn active(curve: &ExactCurve, n: i64) -> BigRational {
    BigRational::one() - curve.passive_time(n)
}

fn active_exact(curves: &[ExactCurve], gammas: &[BigRational], l: &[i64], theta: &BigRational, m: usize) -> BigRational {
    let mut total = BigRational::zero();
    for (k, (curve, gamma)) in curves.iter().zip(gammas).enumerate() {
        let share = if k == m && l[k] >= 0 {
            theta * active(curve, l[k]) + (BigRational::one() - theta) * active(curve, l[k] - 1)
        } else {
            active(curve, l[k])
        };
        total += gamma * share;
    }
    total
}

fn mixed_cost(curves: &[ExactCurve], gammas: &[BigRational], l: &[i64], theta: &BigRational, m: usize) -> BigRational {
    let mut total = BigRational::zero();
    for (k, (curve, gamma)) in curves.iter().zip(gammas).enumerate() {
        let cost = if k == m && l[k] >= 0 {
            theta * curve.mean_cost(l[k]) + (BigRational::one() - theta) * curve.mean_cost(l[k] - 1)
        } else {
            curve.mean_cost(l[k]).clone()
        };
        total += gamma * cost;
    }
    total
}

/// Checks the buffer and budget conditions under which the relaxed solution
/// has thresholds below the batch sizes.
pub fn check_assumptions(classes: &[ClassSpec], buffer: usize, alpha: f64) -> Result<()> {
    let weights: Vec<f64> = classes.iter().map(ClassSpec::weight).collect();
    let ratio = weights.iter().cloned().fold(f64::MIN, f64::max) / weights.iter().cloned().fold(f64::MAX, f64::min);
    let spread = classes
        .iter()
        .map(|c| (c.rate() as f64 - 1.0).powi(2) / 2.0)
        .fold(0.0, f64::max);
    let bound = ratio * spread;
    if !(buffer as f64 > bound) {
        return Err(Error::Assumption {
            name: "Assumption 1",
            detail: format!("buffer L = {buffer} must exceed max(a_j/a_i) * max (R_k-1)^2/2 = {bound}"),
        });
    }
    let floor = 0.5 - classes.iter().map(|c| c.fraction() / (2.0 * c.rate() as f64)).sum::<f64>();
    if alpha < floor {
        return Err(Error::Assumption {
            name: "Assumption 2",
            detail: format!("alpha = {alpha} must be at least 1/2 - sum gamma_k/(2 R_k) = {floor}"),
        });
    }
    Ok(())
}

pub fn solve_relaxed(config: &SystemConfig) -> Result<RelaxedSolution> {
    solve_relaxed_for(&config.classes, config.buffer, config.alpha)
}

/// Ladder search over the sorted index values of all classes.
pub fn solve_relaxed_for(classes: &[ClassSpec], buffer: usize, alpha: f64) -> Result<RelaxedSolution> {
    crate::model::validate_classes(classes)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    check_assumptions(classes, buffer, alpha)?;

    let curves: Vec<ExactCurve> = classes.iter().map(|c| ExactCurve::new(c, buffer)).collect();
    let gammas = fractions(classes);
    let indices = classes
        .iter()
        .map(|c| algorithm1_exact(c, buffer).map(|e| e.values))
        .collect::<Result<Vec<_>>>()?;

    if alpha == 1.0 {
        let l = vec![-1; classes.len()];
        return finish(classes, buffer, &curves, &gammas, l, BigRational::zero(), BigRational::one(), 0, -1);
    }
    let alpha_q = BigRational::from_f64(alpha);

    let mut ladder: Vec<&BigRational> = indices.iter().flatten().collect();
    ladder.sort();
    ladder.dedup();

    let one = BigRational::one();
    for v in ladder {
        let lower: Vec<i64> = indices.iter().map(|w| last_below(w, |x| x < v)).collect();
        let upper: Vec<i64> = indices.iter().map(|w| last_below(w, |x| x <= v)).collect();
        // tied classes switch up one at a time, lowest index first
        let mut l = lower.clone();
        let mut before = active_exact(&curves, &gammas, &l, &one, usize::MAX);
        for k in 0..classes.len() {
            if upper[k] == lower[k] {
                continue;
            }
            l[k] = upper[k];
            let after = active_exact(&curves, &gammas, &l, &one, usize::MAX);
            if after <= alpha_q && alpha_q <= before {
                if lower[k] != upper[k] - 1 {
                    return Err(Error::Infeasible(format!(
                        "class {} jumps from threshold {} to {} at the critical subsidy",
                        k + 1,
                        lower[k],
                        upper[k]
                    )));
                }
                let theta = (&before - &alpha_q) / (&before - &after);
                return finish(classes, buffer, &curves, &gammas, l, v.clone(), theta, k, upper[k]);
            }
            before = after;
        }
    }
    Err(Error::Infeasible(format!("active fraction never reaches alpha = {alpha}")))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    classes: &[ClassSpec],
    buffer: usize,
    curves: &[ExactCurve],
    gammas: &[BigRational],
    l: Vec<i64>,
    w_star: BigRational,
    theta: BigRational,
    m: usize,
    p: i64,
) -> Result<RelaxedSolution> {
    if let Some(k) = (0..classes.len()).find(|&k| l[k] >= classes[k].rate() as i64) {
        return Err(Error::Infeasible(format!(
            "class {} threshold {} is not below its batch size {}",
            k + 1,
            l[k],
            classes[k].rate()
        )));
    }
    let cost = mixed_cost(curves, gammas, &l, &theta, m);
    let mut solution = RelaxedSolution {
        w_star: w_star.to_f64(),
        m: m + 1,
        p,
        l,
        theta: theta.to_f64(),
        z_star: Vec::new(),
        cost_per_user: cost.to_f64(),
    };
    solution.z_star = optimal_proportions_exact(&solution, classes, buffer, &theta)
        .iter()
        .map(|row| row.iter().map(Scalar::to_f64).collect())
        .collect();
    Ok(solution)
}

/// `z*_h^k = gamma_k u^{l_k}_k(h)`, and `gamma_m u*_m(h)` for the randomized
/// class, from the stationary forms for thresholds below `R`.
pub fn optimal_proportions(solution: &RelaxedSolution, classes: &[ClassSpec], buffer: usize) -> Vec<Vec<f64>> {
    let theta = BigRational::from_f64(solution.theta);
    optimal_proportions_exact(solution, classes, buffer, &theta)
        .iter()
        .map(|row| row.iter().map(Scalar::to_f64).collect())
        .collect()
}

fn optimal_proportions_exact(
    solution: &RelaxedSolution,
    classes: &[ClassSpec],
    buffer: usize,
    theta: &BigRational,
) -> Vec<Vec<BigRational>> {
    classes
        .iter()
        .enumerate()
        .map(|(k, class)| {
            let gamma = BigRational::from_f64(class.fraction());
            let l = solution.l[k];
            let shift = if k == solution.m_index() && l >= 0 {
                BigRational::one() - theta
            } else {
                BigRational::zero()
            };
            (0..=buffer as i64)
                .map(|h| gamma.clone() * below_batch(class.rate() as i64, l, &shift, h))
                .collect()
        })
        .collect()
}

/// `u^l(h)` for `-1 <= l < R`, with the whole curve shifted towards `l - 1`
/// by `shift`.
fn below_batch(r: i64, l: i64, shift: &BigRational, h: i64) -> BigRational {
    let rho = BigRational::ratio(1, r);
    let rho2 = &rho * &rho;
    if h < l {
        &rho - BigRational::from_int(l - h) * &rho2 + shift * &rho2
    } else if h < r {
        rho
    } else if h < l + r {
        (BigRational::from_int(l + r - h) - shift) * rho2
    } else {
        BigRational::zero()
    }
}
