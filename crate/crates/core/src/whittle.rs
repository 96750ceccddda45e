//! Whittle indices of a single class.
//!
//! Two independent routes are provided: the iterative minimum-ratio algorithm
//! ([`whittle_algorithm1`]) evaluated in exact rational arithmetic on the
//! stationary curves, and the closed-form expressions
//! ([`whittle_closed_form`]). For `L >= 2R` the index is
//! `W(n) = a R n / (R - n)` up to a pivot state `d` and constant above it.

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{to_f64_vec, Scalar};
use crate::model::ClassSpec;
use crate::stationary::{mean_cost_formula_in, passive_time_formula_in, CostCurve, ExactCurve, Regime};

/// Which computation produced a [`WhittleTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IndexSource {
    Algorithm,
    ClosedForm,
}

/// Per-state Whittle indices of one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhittleTable {
    pub class: ClassSpec,
    pub buffer: usize,
    /// `values[q]` is the index of queue state `q`.
    pub values: Vec<f64>,
    /// Last state on the strictly increasing part of the table.
    pub pivot: Option<usize>,
    pub source: IndexSource,
    #[serde(skip)]
    pub curve: CostCurve,
}

impl WhittleTable {
    pub fn index(&self, q: usize) -> f64 {
        self.values[q]
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    /// `{n : W(n) <= w}`, the states where idling is optimal at subsidy `w`.
    pub fn passive_set(&self, w: f64) -> Vec<usize> {
        (0..self.values.len()).filter(|&n| self.values[n] <= w).collect()
    }
}

/// Outcome of the indexability conditions on the `(a_n, b_n)` curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexabilityReport {
    pub is_indexable: bool,
    pub b_monotone: bool,
    pub a_monotone: bool,
    pub equal_b_strict_a: bool,
    pub violations: Vec<(i64, String)>,
}

/// Abscissa where the lines `a_i - W b_i` and `a_j - W b_j` cross.
pub fn intersection(i: i64, j: i64, curve: &CostCurve) -> Result<f64> {
    let db = curve.passive_time(i) - curve.passive_time(j);
    if db == 0.0 {
        return Err(Error::DegenerateIntersection { i, j });
    }
    Ok((curve.mean_cost(i) - curve.mean_cost(j)) / db)
}

/// `w_n = a R n / (R - n)` for `0 <= n < R`.
fn small_index<T: Scalar>(rate: u32, weight: T, n: i64) -> T {
    let r = rate as i64;
    weight * T::ratio(r * n, r - n)
}

/// `f(n) / a`, independent of the weight; `None` stands for `+inf` (`n = R`).
fn f_over_weight(rate: u32, n: i64) -> Option<BigRational> {
    let r = rate as i64;
    if n < 0 {
        return Some(BigRational::zero());
    }
    if n >= r {
        return None;
    }
    let one = BigRational::from_int(1);
    let w = small_index(rate, one.clone(), n);
    let b = passive_time_formula_in::<BigRational>(rate, n, 2 * rate as usize);
    let a = mean_cost_formula_in::<BigRational>(rate, one.clone(), n, 2 * rate as usize);
    Some(w * (one - b) + a)
}

/// `f(n) = w_n (1 - b_n) + a_n` for `0 <= n < R`, with `f(-1) = 0` and
/// `f(R) = +inf`; `f(n) / a` is the buffer length at which `w_n = x_{L,n}`.
pub fn f_value(n: i64, class: &ClassSpec) -> Result<f64> {
    if n < -1 || n > class.rate() as i64 {
        return Err(Error::Domain(format!("f is defined on [-1, R], got {n}")));
    }
    Ok(match f_over_weight(class.rate(), n) {
        Some(v) => class.weight() * v.to_f64(),
        None => f64::INFINITY,
    })
}

/// The unique `d` in `[0, R-1]` with `f(d)/a < L <= f(d+1)/a` (`L >= 2R`).
pub fn find_d(class: &ClassSpec, buffer: usize) -> Result<usize> {
    let rate = class.rate();
    if Regime::of(rate, buffer) != Regime::LongBuffer {
        return Err(Error::Regime(format!("pivot d needs L >= 2R, got L = {buffer}, R = {rate}")));
    }
    let l = BigRational::from_int(buffer as i64);
    for d in 0..rate as i64 {
        let lower = f_over_weight(rate, d).expect("d < R");
        let above = f_over_weight(rate, d + 1).map_or(true, |upper| l <= upper);
        if lower < l && above {
            return Ok(d as usize);
        }
    }
    unreachable!("f is strictly increasing from (R-1)/2 < 2R to +inf")
}

/// Checks that `b_n` and `a_n` are nondecreasing and that equal passive
/// times come with strictly increasing costs.
pub fn check_indexability(class: &ClassSpec, buffer: usize) -> IndexabilityReport {
    indexability_of(&ExactCurve::new(class, buffer), buffer)
}

fn indexability_of(curve: &ExactCurve, buffer: usize) -> IndexabilityReport {
    let mut violations = Vec::new();
    let (mut b_monotone, mut a_monotone, mut equal_b_strict_a) = (true, true, true);
    for n in 0..=buffer as i64 {
        let (b_prev, b) = (curve.passive_time(n - 1), curve.passive_time(n));
        let (a_prev, a) = (curve.mean_cost(n - 1), curve.mean_cost(n));
        if b < b_prev {
            b_monotone = false;
            violations.push((n, format!("b_{n} < b_{}", n - 1)));
        }
        if a < a_prev {
            a_monotone = false;
            violations.push((n, format!("a_{n} < a_{}", n - 1)));
        }
    }
    // Equal passive times only occur on contiguous runs when b is monotone,
    // but check every pair so the report stays meaningful otherwise.
    for i in -1..=buffer as i64 {
        for j in i + 1..=buffer as i64 {
            if curve.passive_time(i) == curve.passive_time(j) && curve.mean_cost(i) >= curve.mean_cost(j) {
                equal_b_strict_a = false;
                violations.push((j, format!("b_{i} = b_{j} but a_{i} >= a_{j}")));
            }
        }
    }
    IndexabilityReport {
        is_indexable: b_monotone && a_monotone && equal_b_strict_a,
        b_monotone,
        a_monotone,
        equal_b_strict_a,
        violations,
    }
}

/// Exact output of the iterative algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndices {
    pub values: Vec<BigRational>,
    /// Largest minimizer selected at each step; the last one is `L`.
    pub steps: Vec<usize>,
}

/// Runs the minimum-ratio iteration in rational arithmetic.
///
/// Starting from `prev = -1`, each step minimizes
/// `(a_n - a_prev) / (b_n - b_prev)` over `prev < n <= L` with
/// `b_n != b_prev`, takes the largest minimizer `n_j`, and assigns the
/// minimum to states `prev < k <= n_j`.
pub fn algorithm1_exact(class: &ClassSpec, buffer: usize) -> Result<ExactIndices> {
    let curve = ExactCurve::new(class, buffer);
    let report = indexability_of(&curve, buffer);
    if !report.is_indexable {
        let detail = report
            .violations
            .first()
            .map(|(n, d)| format!("at n = {n}: {d}"))
            .unwrap_or_default();
        return Err(Error::NotIndexable(detail));
    }
    let l = buffer as i64;
    let mut values = vec![BigRational::zero(); buffer + 1];
    let mut steps = Vec::new();
    let mut prev = -1i64;
    while prev != l {
        let (a_prev, b_prev) = (curve.mean_cost(prev), curve.passive_time(prev));
        let mut best: Option<(i64, BigRational, BigRational)> = None;
        for n in prev + 1..=l {
            let den = curve.passive_time(n) - b_prev;
            if den.is_zero() {
                continue;
            }
            debug_assert!(den.is_positive());
            let num = curve.mean_cost(n) - a_prev;
            let better = match &best {
                None => true,
                // num/den <= best_num/best_den; ties move to the larger n
                Some((_, bn, bd)) => num.clone() * bd <= bn * den.clone(),
            };
            if better {
                best = Some((n, num, den));
            }
        }
        let (n_j, num, den) =
            best.ok_or_else(|| Error::NotIndexable(format!("no admissible threshold above {prev}")))?;
        let w = num / den;
        for value in &mut values[(prev + 1) as usize..=n_j as usize] {
            *value = w.clone();
        }
        steps.push(n_j as usize);
        prev = n_j;
    }
    Ok(ExactIndices { values, steps })
}

/// Whittle indices from the iterative algorithm; refuses non-indexable classes.
pub fn whittle_algorithm1(class: &ClassSpec, buffer: usize) -> Result<WhittleTable> {
    let exact = algorithm1_exact(class, buffer)?;
    let pivot = exact.steps.iter().rev().nth(1).copied();
    Ok(WhittleTable {
        class: class.clone(),
        buffer,
        values: to_f64_vec(&exact.values),
        pivot,
        source: IndexSource::Algorithm,
        curve: CostCurve::new(class, buffer),
    })
}

/// Closed-form indices in exact arithmetic, with the pivot `d` when the
/// expression has one.
pub fn closed_form_exact(class: &ClassSpec, buffer: usize) -> (Vec<BigRational>, Option<usize>) {
    let rate = class.rate();
    let weight = BigRational::from_f64(class.weight());
    match Regime::of(rate, buffer) {
        Regime::LongBuffer => {
            let d = find_d(class, buffer).expect("long buffer");
            (two_piece(rate, weight, buffer, d), Some(d))
        }
        Regime::MediumBuffer => match medium_pivot(rate, buffer) {
            Some(d) => (two_piece(rate, weight, buffer, d), Some(d)),
            // no admissible d below L - R: every state takes x_{L,-1}
            None => {
                let x = weight * top_intersection::<BigRational>(rate, buffer, -1);
                (vec![x; buffer + 1], None)
            }
        },
        Regime::ShortBuffer => (short_buffer_indices(rate, weight, buffer), None),
    }
}

/// `w_n` on `[0, d]`, then `x_{L,d}` up to `L`.
fn two_piece<T: Scalar>(rate: u32, weight: T, buffer: usize, d: usize) -> Vec<T> {
    let top = weight.clone() * top_intersection::<T>(rate, buffer, d as i64);
    (0..=buffer)
        .map(|n| {
            if n <= d {
                small_index(rate, weight.clone(), n as i64)
            } else {
                top.clone()
            }
        })
        .collect()
}

/// `x_{L,d} / a = (L - [(R-1)/2 + d(d+1)/(2R)]) / (1 - (1 - d/(2R)) (d+1)/R)`,
/// valid when `d` lies on the small-threshold branch of the curves.
fn top_intersection<T: Scalar>(rate: u32, buffer: usize, d: i64) -> T {
    let r = rate as i64;
    let a_d = T::ratio(r - 1, 2) + T::ratio(d * (d + 1), 2 * r);
    let b_d = (T::one() - T::ratio(d, 2 * r)) * T::ratio(d + 1, r);
    (T::from_int(buffer as i64) - a_d) / (T::one() - b_d)
}

/// Pivot for `R <= L < 2R`: the `d < L - R` with
/// `x_{d,d-1} <= x_{L,d} <= x_{d+1,d}`.
fn medium_pivot(rate: u32, buffer: usize) -> Option<usize> {
    let (r, l) = (rate as i64, buffer as i64);
    let one = BigRational::from_int(1);
    let a = |n: i64| mean_cost_formula_in::<BigRational>(rate, one.clone(), n, buffer);
    let b = |n: i64| passive_time_formula_in::<BigRational>(rate, n, buffer);
    (0..l - r).find_map(|d| {
        let x_top = top_intersection::<BigRational>(rate, buffer, d);
        let w_d = small_index(rate, one.clone(), d);
        let x_next = (a(d + 1) - a(d)) / (b(d + 1) - b(d));
        (w_d <= x_top && x_top <= x_next).then_some(d as usize)
    })
}

/// Indices for `L < R`: `x_{n,n-1}` for `n < L` and `x_{L,L-1}` at `L`.
fn short_buffer_indices<T: Scalar>(rate: u32, weight: T, buffer: usize) -> Vec<T> {
    let r = T::from_int(rate as i64);
    let l = T::from_int(buffer as i64);
    let rho = T::ratio(1, rate as i64);
    let q = T::one() - rho.clone();
    let half = T::ratio(1, 2);
    let mut values: Vec<T> = (0..buffer as i64)
        .map(|n| {
            let qn = q.powi(n as u32);
            let num = -(rho.clone() * (l.clone() + r.clone()) * qn.clone())
                + T::from_int(1 - 2 * n) * rho.clone() * half.clone()
                + T::one()
                + l.clone() * rho.clone()
                - rho.clone() * half.clone();
            weight.clone() * num / (rho.clone() * qn)
        })
        .collect();
    let lm1 = T::from_int(buffer as i64 - 1);
    let ql = q.powi(buffer as u32);
    // read as 1 - L^2 rho/2 - (rho/2) L + L rho - 1/rho
    let b = T::one() - l.clone() * l.clone() * rho.clone() * half.clone() - rho.clone() * half.clone() * l.clone()
        + l.clone() * rho.clone()
        - r.clone();
    let bracket = (l.clone() + r) * ql.clone() - lm1.clone() * lm1.clone() * rho.clone() * half.clone()
        + lm1 * (T::one() + l.clone() * rho.clone() - rho * half)
        + b;
    values.push(weight * (l - bracket) / ql);
    values
}

/// Whittle indices from the closed-form expressions of each regime.
pub fn whittle_closed_form(class: &ClassSpec, buffer: usize) -> WhittleTable {
    let (values, pivot) = closed_form_exact(class, buffer);
    WhittleTable {
        class: class.clone(),
        buffer,
        values: to_f64_vec(&values),
        pivot,
        source: IndexSource::ClosedForm,
        curve: CostCurve::new(class, buffer),
    }
}

/// Closed form and Algorithm 1 side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexComparison {
    pub algorithm: WhittleTable,
    pub closed_form: WhittleTable,
    pub max_abs_diff: f64,
    /// Set when the closed form disagrees with Algorithm 1 by more than `1e-9`;
    /// Algorithm 1 is then the reference.
    pub advisory: bool,
}

impl IndexComparison {
    pub fn agrees(&self, q: usize) -> bool {
        (self.algorithm.values[q] - self.closed_form.values[q]).abs() <= 1e-9
    }
}

pub fn compare_indices(class: &ClassSpec, buffer: usize) -> Result<IndexComparison> {
    let algorithm = whittle_algorithm1(class, buffer)?;
    let closed_form = whittle_closed_form(class, buffer);
    let max_abs_diff = max_discrepancy(&algorithm, &closed_form);
    Ok(IndexComparison { algorithm, closed_form, max_abs_diff, advisory: max_abs_diff > 1e-9 })
}

/// Largest absolute state-wise difference between two tables.
pub fn max_discrepancy(lhs: &WhittleTable, rhs: &WhittleTable) -> f64 {
    lhs.values
        .iter()
        .zip(&rhs.values)
        .map(|(x, y)| {
            if x == y {
                0.0
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}
