//! Stationary laws of a single queue under a threshold policy.
//!
//! The closed forms depend on how the buffer `L` compares with the rate `R`
//! (three regimes). [`stationary_solve`] is an independent dense linear solve
//! of the balance equations used to validate them.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::Scalar;
use crate::model::{check_threshold, threshold_kernel, ClassSpec, Kernel};

/// How the buffer compares with the transmission rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `L < R`
    ShortBuffer,
    /// `R <= L < 2R`
    MediumBuffer,
    /// `L >= 2R`
    LongBuffer,
}

impl Regime {
    pub fn of(rate: u32, buffer: usize) -> Regime {
        let (r, l) = (rate as usize, buffer);
        if l < r {
            Regime::ShortBuffer
        } else if l < 2 * r {
            Regime::MediumBuffer
        } else {
            Regime::LongBuffer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDist {
    pub u: Vec<f64>,
    pub threshold: i64,
    pub regime: Regime,
}

impl StationaryDist {
    pub fn total(&self) -> f64 {
        self.u.iter().sum()
    }

    /// `max_i |u(i) - (u P)(i)|`
    pub fn balance_residual(&self, kernel: &Kernel) -> f64 {
        balance_residual(&self.u, kernel)
    }
}

pub fn balance_residual(u: &[f64], kernel: &Kernel) -> f64 {
    let n = kernel.size();
    (0..n)
        .map(|i| {
            let flow: f64 = (0..n).map(|j| u[j] * kernel.get(j, i)).sum();
            (u[i] - flow).abs()
        })
        .fold(0.0, f64::max)
}

/// Writes each closed-form band into `u`; overlapping band ends must agree.
struct Bands<T: Scalar> {
    u: Vec<T>,
    #[cfg(debug_assertions)]
    written: Vec<bool>,
}

impl<T: Scalar> Bands<T> {
    fn new(len: usize) -> Self {
        Bands {
            u: vec![T::zero(); len],
            #[cfg(debug_assertions)]
            written: vec![false; len],
        }
    }

    fn fill(&mut self, from: i64, to: i64, value: impl Fn(i64) -> T) {
        for i in from.max(0)..=to.min(self.u.len() as i64 - 1) {
            let v = value(i);
            #[cfg(debug_assertions)]
            {
                if self.written[i as usize] {
                    debug_assert!(self.u[i as usize] == v, "overlapping bands disagree at state {i}");
                }
                self.written[i as usize] = true;
            }
            self.u[i as usize] = v;
        }
    }
}

/// Closed-form stationary law of the threshold-`n` chain, evaluated in `T`.
pub fn closed_form_in<T: Scalar>(rate: u32, n: i64, buffer: usize) -> Vec<T> {
    let r = rate as i64;
    let l = buffer as i64;
    let rho = T::ratio(1, r);
    let rho2 = rho.clone() * rho.clone();
    let q = T::one() - rho.clone();

    let linear_down = |i: i64| rho.clone() - T::from_int(n - i) * rho2.clone();
    let linear_up = |i: i64| rho.clone() - T::from_int(i - n) * rho2.clone();
    let geometric = |i: i64| q.powi((n - i) as u32) * rho.clone();
    let flat = |_: i64| rho.clone();
    let atom = || q.powi((n - l + r + 1) as u32) - rho.clone() * T::from_int(l - 1 - n);

    let mut bands = Bands::new(buffer + 1);
    if n == l {
        bands.fill(l, l, |_| T::one());
        return bands.u;
    }
    match Regime::of(rate, buffer) {
        Regime::ShortBuffer => {
            bands.fill(0, n, geometric);
            bands.fill(n + 1, l - 1, flat);
            let last = q.powi((n + 1) as u32) - T::from_int(l - n - 1) * rho.clone();
            bands.fill(l, l, |_| last.clone());
        }
        Regime::MediumBuffer => {
            if n <= l - r - 1 {
                bands.fill(0, n, linear_down);
                bands.fill(n + 1, r - 1, flat);
                bands.fill(r, n + r, linear_up);
            } else if n < r {
                bands.fill(0, l - r - 1, linear_down);
                bands.fill(l - r, n, geometric);
                bands.fill(n + 1, r - 1, flat);
                bands.fill(r, l - 1, linear_up);
                bands.fill(l, l, |_| atom());
            } else {
                bands.fill(n - r + 1, l - r - 1, linear_down);
                bands.fill(l - r, n, geometric);
                bands.fill(n + 1, l - 1, linear_up);
                bands.fill(l, l, |_| atom());
            }
        }
        Regime::LongBuffer => {
            if n < r {
                bands.fill(0, n, linear_down);
                bands.fill(n + 1, r - 1, flat);
                bands.fill(r, n + r, linear_up);
            } else if n < l - r {
                bands.fill(n - r + 1, n, linear_down);
                bands.fill(n, n + r - 1, linear_up);
            } else {
                bands.fill(n - r + 1, l - r - 1, linear_down);
                bands.fill(l - r, n, geometric);
                bands.fill(n + 1, l - 1, linear_up);
                bands.fill(l, l, |_| atom());
            }
        }
    }
    bands.u
}

/// Closed-form stationary distribution under threshold `n` (`-1 <= n <= L`).
pub fn stationary_closed_form(class: &ClassSpec, n: i64, buffer: usize) -> Result<StationaryDist> {
    check_threshold(n, buffer)?;
    Ok(StationaryDist {
        u: closed_form_in::<f64>(class.rate(), n, buffer),
        threshold: n,
        regime: Regime::of(class.rate(), buffer),
    })
}

/// Stationary vector of a row-stochastic kernel by dense elimination.
///
/// Solves `(I - P^T) u = 0` with the last balance equation replaced by
/// `sum(u) = 1`. The chains built from threshold policies have a single
/// recurrent class, so the system is nonsingular and transient states come
/// out as zero.
pub fn stationary_solve(kernel: &Kernel) -> Result<Vec<f64>> {
    let defect = kernel.stochastic_defect();
    if defect > 1e-9 {
        return Err(Error::Domain(format!("kernel is not row-stochastic (defect {defect:e})")));
    }
    let n = kernel.size();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let identity = if i == j { 1.0 } else { 0.0 };
            a[(i, j)] = identity - kernel.get(j, i);
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let u = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("balance equations are singular (several recurrent classes)".into()))?;
    Ok(u.iter().copied().collect())
}

/// Stationary law via [`stationary_solve`] on the threshold kernel.
pub fn stationary_by_solve(class: &ClassSpec, n: i64, buffer: usize) -> Result<StationaryDist> {
    let kernel = threshold_kernel(class, n, buffer)?;
    Ok(StationaryDist {
        u: stationary_solve(&kernel)?,
        threshold: n,
        regime: Regime::of(class.rate(), buffer),
    })
}

/// Mean holding cost `a_n` and passive time `b_n` for every threshold
/// `n = -1..=L`, stored at position `n + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurve {
    mean_costs: Vec<f64>,
    passive_times: Vec<f64>,
}

impl CostCurve {
    pub fn new(class: &ClassSpec, buffer: usize) -> Self {
        let exact = ExactCurve::new(class, buffer);
        CostCurve {
            mean_costs: exact.mean_costs.iter().map(Scalar::to_f64).collect(),
            passive_times: exact.passive_times.iter().map(Scalar::to_f64).collect(),
        }
    }

    pub fn buffer(&self) -> usize {
        self.mean_costs.len() - 2
    }

    /// `a_n`
    pub fn mean_cost(&self, n: i64) -> f64 {
        self.mean_costs[(n + 1) as usize]
    }

    /// `b_n`
    pub fn passive_time(&self, n: i64) -> f64 {
        self.passive_times[(n + 1) as usize]
    }

    /// `1 - b_n`, the long-run fraction of slots spent transmitting.
    pub fn active_time(&self, n: i64) -> f64 {
        1.0 - self.passive_time(n)
    }
}

/// Exact rational version of [`CostCurve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExactCurve {
    pub mean_costs: Vec<BigRational>,
    pub passive_times: Vec<BigRational>,
}

impl ExactCurve {
    pub fn new(class: &ClassSpec, buffer: usize) -> Self {
        let weight = BigRational::from_f64(class.weight());
        let mut mean_costs = Vec::with_capacity(buffer + 2);
        let mut passive_times = Vec::with_capacity(buffer + 2);
        for n in -1..=buffer as i64 {
            let u = closed_form_in::<BigRational>(class.rate(), n, buffer);
            let (cost, passive) = moments(&u, n);
            mean_costs.push(weight.clone() * cost);
            passive_times.push(passive);
        }
        ExactCurve {
            mean_costs,
            passive_times,
        }
    }

    pub fn mean_cost(&self, n: i64) -> &BigRational {
        &self.mean_costs[(n + 1) as usize]
    }

    pub fn passive_time(&self, n: i64) -> &BigRational {
        &self.passive_times[(n + 1) as usize]
    }
}

/// `(sum_q u(q) q, sum_{q <= n} u(q))`
fn moments<T: Scalar>(u: &[T], n: i64) -> (T, T) {
    let mut cost = T::zero();
    let mut passive = T::zero();
    for (q, p) in u.iter().enumerate() {
        if p.is_zero() {
            continue;
        }
        cost = cost + p.clone() * T::from_int(q as i64);
        if (q as i64) <= n {
            passive = passive + p.clone();
        }
    }
    (cost, passive)
}

/// Stationary mean holding cost `a_n = a * sum_q u^n(q) q`.
pub fn mean_cost(class: &ClassSpec, n: i64, buffer: usize) -> Result<f64> {
    check_threshold(n, buffer)?;
    let u = closed_form_in::<f64>(class.rate(), n, buffer);
    Ok(class.weight() * moments(&u, n).0)
}

/// Stationary fraction of passive slots `b_n = sum_{q <= n} u^n(q)`.
pub fn passive_time(class: &ClassSpec, n: i64, buffer: usize) -> Result<f64> {
    check_threshold(n, buffer)?;
    let u = closed_form_in::<f64>(class.rate(), n, buffer);
    Ok(moments(&u, n).1)
}

/// Regime-wise polynomial expressions for `a_n`, kept alongside the direct
/// sums in [`mean_cost`] as a cross-check.
pub fn mean_cost_formula_in<T: Scalar>(rate: u32, weight: T, n: i64, buffer: usize) -> T {
    let r = rate as i64;
    let l = buffer as i64;
    let rho = T::ratio(1, r);
    let q = T::one() - rho.clone();
    let small = || T::ratio(r - 1, 2) + T::ratio(n * (n + 1), 2 * r);
    let upper = || {
        T::from_int(n + 1 - r)
            + T::from_int(2 * r) * q.powi((n - l + r + 1) as u32)
            + rho.clone() * T::from_int((l - 1 - n) * (n - l))
    };
    if n == l {
        return weight * T::from_int(l);
    }
    let value = match Regime::of(rate, buffer) {
        Regime::ShortBuffer => {
            T::from_int(l + r) * q.powi((n + 1) as u32)
                + T::from_int(n - r + 1)
                + T::ratio((l - 1 - n) * (n - l), 2 * r)
        }
        Regime::MediumBuffer => {
            if n <= l - r - 1 {
                small()
            } else if n <= r - 1 {
                T::from_int(2 * r) * q.powi((n - l + r + 1) as u32)
                    - (T::ratio(n * (n + 1), 2 * r) + T::ratio(r - 1, 2) + T::ratio(l * (l - 2 * n - 1), r))
            } else {
                upper()
            }
        }
        Regime::LongBuffer => {
            if n <= r - 1 {
                small()
            } else if n <= l - r {
                T::from_int(n)
            } else {
                upper()
            }
        }
    };
    weight * value
}

/// Regime-wise polynomial expressions for `b_n`.
pub fn passive_time_formula_in<T: Scalar>(rate: u32, n: i64, buffer: usize) -> T {
    let r = rate as i64;
    let l = buffer as i64;
    let rho = T::ratio(1, r);
    let rho2 = rho.clone() * rho.clone();
    let q = T::one() - rho.clone();
    let small = || (T::one() - T::ratio(n, 2 * r)) * T::ratio(n + 1, r);
    let upper = || {
        rho2.clone() * T::ratio((l - 1 - n) * (l - n), 2) + T::one() - q.powi((n - l + r + 1) as u32)
    };
    if n == l {
        return T::one();
    }
    match Regime::of(rate, buffer) {
        Regime::ShortBuffer => T::one() - q.powi((n + 1) as u32),
        Regime::MediumBuffer => {
            if n <= l - r - 1 {
                small()
            } else if n <= r - 1 {
                // sum of the linear band below L-R plus the geometric band up to n
                rho2.clone() * T::ratio((l - r) * (l + r - 1 - 2 * n), 2) + T::one()
                    - q.powi((n - l + r + 1) as u32)
            } else {
                upper()
            }
        }
        Regime::LongBuffer => {
            if n <= r - 1 {
                small()
            } else if n <= l - r {
                T::ratio(1, 2) + T::ratio(1, 2 * r)
            } else {
                upper()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Zero;

    fn class(rate: u32) -> ClassSpec {
        ClassSpec::single(rate, 1.0).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let c = class(5);
        let d = stationary_closed_form(&c, 10, 50).unwrap();
        assert!((d.u[10] - 0.2).abs() < 1e-14);
        assert!((d.u[9] - 0.16).abs() < 1e-14);
        assert!((d.u[14] - 0.04).abs() < 1e-14);
        for (i, &p) in d.u.iter().enumerate() {
            if !(6..=14).contains(&i) {
                assert_eq!(p, 0.0, "state {i}");
            }
        }

        let d = stationary_closed_form(&c, -1, 50).unwrap();
        for (i, &p) in d.u.iter().enumerate() {
            let expected = if i < 5 { 0.2 } else { 0.0 };
            assert!((p - expected).abs() < 1e-15);
        }

        let d = stationary_closed_form(&c, 50, 50).unwrap();
        assert_eq!(d.u[50], 1.0);
        assert_eq!(d.total(), 1.0);

        let d = stationary_closed_form(&c, 9, 12).unwrap();
        assert_eq!(d.regime, Regime::LongBuffer);
        assert!((d.u[9] - 0.2).abs() < 1e-14);
        assert!((d.u[8] - 0.16).abs() < 1e-14);
        assert!((d.u[12] - 0.112).abs() < 1e-14);
    }

    #[test]
    fn solve_examples() {
        let c = class(5);
        let closed = stationary_closed_form(&c, 10, 50).unwrap();
        let kernel = threshold_kernel(&c, 10, 50).unwrap();
        let solved = stationary_solve(&kernel).unwrap();
        assert!(balance_residual(&solved, &kernel) < 1e-12);
        for (x, y) in closed.u.iter().zip(&solved) {
            assert!((x - y).abs() < 1e-10);
        }

        let kernel = threshold_kernel(&class(2), 1, 4).unwrap();
        let solved = stationary_solve(&kernel).unwrap();
        assert!(balance_residual(&solved, &kernel) < 1e-12);

        let solved = stationary_by_solve(&c, 50, 50).unwrap();
        assert!((solved.u[50] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solve_rejects_non_stochastic() {
        let k = Kernel::from_rows(vec![vec![0.5, 0.2], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(stationary_solve(&k), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_cost_and_passive_time_examples() {
        let c = class(5);
        assert!((mean_cost(&c, 10, 50).unwrap() - 10.0).abs() < 1e-12);
        assert!((mean_cost(&c, 3, 50).unwrap() - 3.2).abs() < 1e-12);
        assert!((mean_cost(&c, 50, 50).unwrap() - 50.0).abs() < 1e-12);
        assert!((passive_time(&c, 10, 50).unwrap() - 0.6).abs() < 1e-12);
        assert!((passive_time(&c, 3, 50).unwrap() - 0.56).abs() < 1e-12);
        assert_eq!(passive_time(&c, -1, 50).unwrap(), 0.0);
        let weighted = ClassSpec::single(5, 2.5).unwrap();
        assert!((mean_cost(&weighted, 3, 50).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_linear_solve_on_small_grid() {
        for rate in 2..=6u32 {
            for buffer in 3..=25usize {
                let c = class(rate);
                for n in -1..=buffer as i64 {
                    let closed = stationary_closed_form(&c, n, buffer).unwrap();
                    let solved = stationary_by_solve(&c, n, buffer).unwrap();
                    for (i, (x, y)) in closed.u.iter().zip(&solved.u).enumerate() {
                        assert!(
                            (x - y).abs() < 1e-10,
                            "R={rate} L={buffer} n={n} i={i}: closed {x} solve {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn curve_boundaries_and_monotonicity() {
        for rate in 2..=10u32 {
            for buffer in [3usize, 7, 12, 20, 45] {
                let curve = CostCurve::new(&class(rate), buffer);
                assert_eq!(curve.passive_time(-1), 0.0);
                assert_eq!(curve.passive_time(buffer as i64), 1.0);
                for n in 0..=buffer as i64 {
                    assert!(curve.passive_time(n) >= curve.passive_time(n - 1));
                    assert!(curve.mean_cost(n) >= curve.mean_cost(n - 1) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn long_buffer_passive_time_shape() {
        for rate in 2..=10u32 {
            let buffer = 3 * rate as usize + 4;
            let exact = ExactCurve::new(&class(rate), buffer);
            let r = rate as i64;
            let l = buffer as i64;
            let plateau = BigRational::ratio(1, 2) + BigRational::ratio(1, 2 * r);
            for n in 0..=r - 1 {
                assert!(exact.passive_time(n) > exact.passive_time(n - 1));
            }
            for n in r..=l - r {
                assert_eq!(exact.passive_time(n), &plateau);
            }
            for n in l - r + 2..=l - 1 {
                assert!(exact.passive_time(n) > exact.passive_time(n - 1));
            }
            for n in l - r + 1..=l - 1 {
                assert!(exact.mean_cost(n) > exact.mean_cost(n - 1));
            }
        }
    }

    #[test]
    fn exact_and_float_paths_agree() {
        let c = ClassSpec::single(7, 0.5).unwrap();
        let exact = ExactCurve::new(&c, 30);
        let float = CostCurve::new(&c, 30);
        for n in -1..=30 {
            assert!((exact.mean_cost(n).to_f64() - float.mean_cost(n)).abs() < 1e-12);
            assert!((mean_cost(&c, n, 30).unwrap() - float.mean_cost(n)).abs() < 1e-10);
            assert!((passive_time(&c, n, 30).unwrap() - float.passive_time(n)).abs() < 1e-10);
        }
    }

    #[test]
    fn polynomial_expressions_match_direct_sums() {
        let mut disagreements = Vec::new();
        for rate in 2..=10u32 {
            for buffer in 3..=45usize {
                let c = class(rate);
                let exact = ExactCurve::new(&c, buffer);
                for n in -1..=buffer as i64 {
                    let a = mean_cost_formula_in::<BigRational>(rate, BigRational::from_int(1), n, buffer);
                    let b = passive_time_formula_in::<BigRational>(rate, n, buffer);
                    let da = (a - exact.mean_cost(n).clone()).to_f64().abs();
                    let db = (b - exact.passive_time(n).clone()).to_f64().abs();
                    if da > 1e-9 || db > 1e-9 {
                        disagreements.push((rate, buffer, n, da, db, Regime::of(rate, buffer)));
                    }
                }
            }
        }
        let mut kinds = std::collections::BTreeMap::new();
        for &(rate, buffer, n, da, db, regime) in &disagreements {
            let (r, l) = (rate as i64, buffer as i64);
            let branch = if n <= l - r - 1 { "low" } else if n <= r - 1 { "mid" } else { "high" };
            *kinds.entry((format!("{regime:?}"), branch, da > 1e-9, db > 1e-9)).or_insert(0) += 1;
        }
        eprintln!("{kinds:?}");
        assert!(disagreements.is_empty(), "{} disagreements", disagreements.len());
    }

    #[test]
    fn moments_skip_zero_entries() {
        let u = vec![BigRational::zero(), BigRational::ratio(1, 2), BigRational::ratio(1, 2)];
        let (cost, passive) = moments(&u, 1);
        assert_eq!(cost, BigRational::ratio(3, 2));
        assert_eq!(passive, BigRational::ratio(1, 2));
    }
}
