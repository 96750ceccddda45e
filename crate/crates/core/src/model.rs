//! User classes, system configuration and the single-queue transition law.
//!
//! A class-`k` queue evolves as `q' = min((q - R_k s)^+ + A, L)` where `s` is
//! the scheduling action and `A` is uniform on `0..R_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scheduling decision for one queue in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Passive,
    Active,
}

impl Action {
    pub fn from_bit(bit: u8) -> Self {
        if bit == 0 {
            Action::Passive
        } else {
            Action::Active
        }
    }

    pub fn is_active(self) -> bool {
        self == Action::Active
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    rate: u32,
    weight: f64,
    #[serde(default = "one")]
    fraction: f64,
}

fn one() -> f64 {
    1.0
}

/// One user class: maximum transmission rate `R`, holding-cost weight `a`
/// and population fraction `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawClass", into = "RawClass")]
pub struct ClassSpec {
    rate: u32,
    weight: f64,
    fraction: f64,
    rho: f64,
}

impl TryFrom<RawClass> for ClassSpec {
    type Error = Error;

    fn try_from(raw: RawClass) -> Result<Self> {
        ClassSpec::new(raw.rate, raw.weight, raw.fraction)
    }
}

impl From<ClassSpec> for RawClass {
    fn from(c: ClassSpec) -> Self {
        RawClass {
            rate: c.rate,
            weight: c.weight,
            fraction: c.fraction,
        }
    }
}

impl ClassSpec {
    pub fn new(rate: u32, weight: f64, fraction: f64) -> Result<Self> {
        if rate < 2 {
            return Err(Error::Domain(format!("rate must be at least 2, got {rate}")));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::Domain(format!("weight must be positive, got {weight}")));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Domain(format!("fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(ClassSpec {
            rate,
            weight,
            fraction,
            rho: 1.0 / rate as f64,
        })
    }

    /// A class occupying the whole population.
    pub fn single(rate: u32, weight: f64) -> Result<Self> {
        Self::new(rate, weight, 1.0)
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// Probability of each arrival batch size, `1 / R`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn with_fraction(&self, fraction: f64) -> Result<Self> {
        Self::new(self.rate, self.weight, fraction)
    }
}

/// Population, buffer and channel budget of an `N`-queue system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    pub classes: Vec<ClassSpec>,
    pub buffer: usize,
    pub users: usize,
    pub alpha: f64,
    pub budget: usize,
}

impl SystemConfig {
    pub fn new(classes: Vec<ClassSpec>, buffer: usize, users: usize, alpha: f64) -> Result<Self> {
        validate_classes(&classes)?;
        if buffer == 0 {
            return Err(Error::Domain("buffer must be positive".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let budget = (alpha * users as f64).round() as usize;
        if budget < 1 || budget >= users {
            return Err(Error::Domain(format!(
                "budget M = round(alpha N) = {budget} must satisfy 1 <= M < N = {users}"
            )));
        }
        for (k, c) in classes.iter().enumerate() {
            let count = c.fraction * users as f64;
            if (count - count.round()).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "class {k}: fraction {} of {users} users is not an integer count",
                    c.fraction
                )));
            }
        }
        Ok(SystemConfig {
            classes,
            buffer,
            users,
            alpha,
            budget,
        })
    }

    /// Number of users in each class.
    pub fn class_counts(&self) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| (c.fraction * self.users as f64).round() as usize)
            .collect()
    }

    /// Whether `alpha * N` was rounded to obtain the budget.
    pub fn budget_is_rounded(&self) -> bool {
        (self.alpha * self.users as f64 - self.budget as f64).abs() > 1e-9
    }

    pub fn with_users(&self, users: usize) -> Result<Self> {
        Self::new(self.classes.clone(), self.buffer, users, self.alpha)
    }
}

/// Checks that class fractions form a distribution.
pub fn validate_classes(classes: &[ClassSpec]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Domain("at least one class is required".into()));
    }
    let total: f64 = classes.iter().map(|c| c.fraction).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("class fractions sum to {total}, expected 1")));
    }
    Ok(())
}

/// Dense row-stochastic matrix over queue states `0..=L`; `rows[j][i]` is the
/// probability of moving from `j` to `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    entries: Vec<f64>,
}

impl Kernel {
    pub fn zeros(size: usize) -> Self {
        Kernel {
            size,
            entries: vec![0.0; size * size],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Domain("kernel must be square".into()));
        }
        Ok(Kernel {
            size,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.size + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.size..(from + 1) * self.size]
    }

    fn add(&mut self, from: usize, to: usize, p: f64) {
        self.entries[from * self.size + to] += p;
    }

    fn set(&mut self, from: usize, to: usize, p: f64) {
        self.entries[from * self.size + to] = p;
    }

    /// Largest deviation of a row sum from one, or of an entry from `[0, 1]`.
    pub fn stochastic_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.size {
            let row = self.row(j);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            for &p in row {
                worst = worst.max(-p).max(p - 1.0);
            }
        }
        worst
    }
}

/// Arrival batch law: uniform on `0..R`.
pub fn arrival_pmf(class: &ClassSpec) -> Vec<f64> {
    vec![class.rho(); class.rate() as usize]
}

/// One slot of queue dynamics.
pub fn step_queue(q: usize, action: Action, arrival: usize, class: &ClassSpec, buffer: usize) -> Result<usize> {
    if q > buffer {
        return Err(Error::Domain(format!("queue state {q} exceeds buffer {buffer}")));
    }
    if arrival >= class.rate() as usize {
        return Err(Error::Domain(format!(
            "arrival {arrival} outside 0..{}",
            class.rate()
        )));
    }
    Ok(step_unchecked(q, action, arrival, class.rate() as usize, buffer))
}

#[inline]
pub(crate) fn step_unchecked(q: usize, action: Action, arrival: usize, rate: usize, buffer: usize) -> usize {
    let drained = if action.is_active() { q.saturating_sub(rate) } else { q };
    (drained + arrival).min(buffer)
}

/// Transition kernel when the same action is applied in every state.
pub fn action_kernel(class: &ClassSpec, action: Action, buffer: usize) -> Kernel {
    let rate = class.rate() as usize;
    let mut kernel = Kernel::zeros(buffer + 1);
    for j in 0..=buffer {
        let base = if action.is_active() { j.saturating_sub(rate) } else { j };
        for a in 0..rate {
            kernel.add(j, (base + a).min(buffer), class.rho());
        }
    }
    kernel
}

/// Kernel of the threshold policy that idles in states `<= n` and transmits
/// above `n`. `n = -1` always transmits, `n = L` never does.
pub fn threshold_kernel(class: &ClassSpec, n: i64, buffer: usize) -> Result<Kernel> {
    check_threshold(n, buffer)?;
    let rate = class.rate() as i64;
    let rho = class.rho();
    let l = buffer as i64;
    let mut kernel = Kernel::zeros(buffer + 1);
    for j in 0..=l {
        // post-service level the arrivals are added to
        let base = if j <= n { j } else { (j - rate).max(0) };
        for i in 0..l {
            if (0..rate).contains(&(i - base)) {
                kernel.set(j as usize, i as usize, rho);
            }
        }
        if (0..rate).contains(&(l - base)) {
            kernel.set(j as usize, buffer, (rate - l + base) as f64 * rho);
        }
    }
    Ok(kernel)
}

pub(crate) fn check_threshold(n: i64, buffer: usize) -> Result<()> {
    if n < -1 || n > buffer as i64 {
        return Err(Error::Domain(format!("threshold {n} outside [-1, {buffer}]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(rate: u32) -> ClassSpec {
        ClassSpec::single(rate, 1.0).unwrap()
    }

    fn brute_force_kernel(c: &ClassSpec, n: i64, buffer: usize) -> Kernel {
        let mut k = Kernel::zeros(buffer + 1);
        for j in 0..=buffer {
            let action = if j as i64 <= n { Action::Passive } else { Action::Active };
            for a in 0..c.rate() as usize {
                let to = step_queue(j, action, a, c, buffer).unwrap();
                k.add(j, to, c.rho());
            }
        }
        k
    }

    #[test]
    fn arrival_law_is_uniform() {
        assert_eq!(arrival_pmf(&class(5)), vec![0.2; 5]);
        assert_eq!(arrival_pmf(&class(2)), vec![0.5; 2]);
        let p = arrival_pmf(&class(10));
        assert_eq!(p.len(), 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_examples() {
        let c = class(5);
        assert_eq!(step_queue(7, Action::Active, 3, &c, 50).unwrap(), 5);
        assert_eq!(step_queue(2, Action::Active, 4, &c, 50).unwrap(), 4);
        assert_eq!(step_queue(49, Action::Passive, 4, &c, 50).unwrap(), 50);
        assert!(matches!(step_queue(51, Action::Passive, 0, &c, 50), Err(Error::Domain(_))));
        assert!(matches!(step_queue(3, Action::Passive, 5, &c, 50), Err(Error::Domain(_))));
    }

    #[test]
    fn class_invariants() {
        assert!(ClassSpec::single(1, 1.0).is_err());
        assert!(ClassSpec::single(2, 0.0).is_err());
        assert!(ClassSpec::new(2, 1.0, 0.0).is_err());
        let c = ClassSpec::new(7, 1.0, 0.5).unwrap();
        assert!((c.rho() * 7.0 - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn config_invariants() {
        let classes = vec![
            ClassSpec::new(5, 1.0, 0.5).unwrap(),
            ClassSpec::new(10, 1.0, 0.5).unwrap(),
        ];
        let cfg = SystemConfig::new(classes.clone(), 50, 400, 0.5).unwrap();
        assert_eq!(cfg.budget, 200);
        assert_eq!(cfg.class_counts(), vec![200, 200]);
        assert!(SystemConfig::new(classes.clone(), 50, 401, 0.5).is_err());
        assert!(SystemConfig::new(classes.clone(), 50, 400, 1.0).is_err());
        let bad = vec![ClassSpec::new(5, 1.0, 0.5).unwrap()];
        assert!(SystemConfig::new(bad, 50, 400, 0.5).is_err());
    }

    #[test]
    fn action_kernel_examples() {
        let c = class(5);
        let k = action_kernel(&c, Action::Passive, 50);
        for i in 0..=50 {
            let expected = if (2..=6).contains(&i) { 0.2 } else { 0.0 };
            assert_eq!(k.get(2, i), expected);
        }
        let k = action_kernel(&c, Action::Passive, 6);
        assert_eq!(k.row(2), &[0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2]);
        let k6 = action_kernel(&c, Action::Passive, 6);
        assert_eq!(k6.get(6, 6), 1.0);
        let active = action_kernel(&c, Action::Active, 50);
        let passive = action_kernel(&c, Action::Passive, 50);
        assert_eq!(active.row(3), passive.row(0));
    }

    #[test]
    fn threshold_kernel_examples() {
        let c = class(5);
        let k = threshold_kernel(&c, 3, 50).unwrap();
        assert_eq!(k.get(2, 4), 0.2);
        assert_eq!(k.get(7, 3), 0.2);
        let k = threshold_kernel(&c, 2, 6).unwrap();
        assert!((k.get(2, 6) - 0.2).abs() < 1e-15);
        assert!(threshold_kernel(&c, -2, 6).is_err());
        assert!(threshold_kernel(&c, 7, 6).is_err());
    }

    #[test]
    fn threshold_kernel_matches_enumeration() {
        for rate in 2..=7 {
            let c = class(rate);
            for buffer in 3..=20 {
                for n in -1..=buffer as i64 {
                    let k = threshold_kernel(&c, n, buffer).unwrap();
                    let b = brute_force_kernel(&c, n, buffer);
                    assert!(k.stochastic_defect() < 1e-12, "R={rate} L={buffer} n={n}");
                    for j in 0..=buffer {
                        for i in 0..=buffer {
                            assert!(
                                (k.get(j, i) - b.get(j, i)).abs() < 1e-12,
                                "R={rate} L={buffer} n={n} p({j},{i})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_rows_come_from_action_kernels() {
        let c = class(4);
        let passive = action_kernel(&c, Action::Passive, 15);
        let active = action_kernel(&c, Action::Active, 15);
        let k = threshold_kernel(&c, 6, 15).unwrap();
        for j in 0..=15 {
            let expected = if j <= 6 { passive.row(j) } else { active.row(j) };
            for (x, y) in k.row(j).iter().zip(expected) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernels_are_stochastic_on_wide_grid() {
        for rate in [2u32, 3, 5, 10] {
            let c = class(rate);
            for buffer in 3..=100 {
                for n in [-1, 0, 1, buffer as i64 / 2, buffer as i64 - 1, buffer as i64] {
                    let k = threshold_kernel(&c, n, buffer).unwrap();
                    assert!(k.stochastic_defect() < 1e-12);
                }
                for action in [Action::Passive, Action::Active] {
                    let k = action_kernel(&c, action, buffer);
                    assert!(k.stochastic_defect() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn active_row_is_shifted_passive_row() {
        for rate in 2..=9u32 {
            let c = class(rate);
            let passive = action_kernel(&c, Action::Passive, 30);
            let active = action_kernel(&c, Action::Active, 30);
            for j in 0..=30usize {
                assert_eq!(active.row(j), passive.row(j.saturating_sub(rate as usize)));
            }
        }
    }
}
