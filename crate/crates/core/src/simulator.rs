//! Slot-by-slot simulation of `N` queues sharing `M` channels.
//!
//! Each run owns one ChaCha8 stream seeded from the run seed, so a run is
//! reproducible on its own and replications can be spread over threads
//! without changing any result. The cost of slot `t` is charged on the queue
//! lengths at the start of the slot.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{step_unchecked, Action, SystemConfig};
use crate::relaxed::{solve_relaxed, RelaxedSolution};
use crate::whittle::whittle_algorithm1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Top `M` Whittle indices.
    Whittle,
    /// Top `M` weighted queue lengths `a_k q`.
    MaxWeight,
    /// Top `M` products of index and running average cost.
    FairTheta,
    /// Relaxed-problem thresholds with randomization at the pivot; ignores `M`.
    RelaxedRandomized,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Whittle => "whittle",
            PolicyKind::MaxWeight => "maxweight",
            PolicyKind::FairTheta => "fair_theta",
            PolicyKind::RelaxedRandomized => "relaxed_randomized",
        }
    }

    pub fn is_budgeted(self) -> bool {
        self != PolicyKind::RelaxedRandomized
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whittle" => Ok(PolicyKind::Whittle),
            "maxweight" | "max_weight" => Ok(PolicyKind::MaxWeight),
            "fair_theta" | "theta" => Ok(PolicyKind::FairTheta),
            "relaxed_randomized" | "relaxed" => Ok(PolicyKind::RelaxedRandomized),
            other => Err(Error::Usage(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Empty,
    Full,
    /// Queue length of every user, users ordered by class.
    Queues(Vec<usize>),
}

/// Target set `{z : |z - z_star|_inf < epsilon}` for the hitting time.
#[derive(Debug, Clone, PartialEq)]
pub struct HitTarget {
    pub z_star: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// End the run at the first hit.
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub initial: InitialState,
    pub record_z: bool,
    pub hit: Option<HitTarget>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            initial: InitialState::Empty,
            record_z: false,
            hit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub policy: PolicyKind,
    pub users: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `(1/T) sum_t sum_i a q_i(t) / N`.
    pub cost_per_user: f64,
    /// Average cost per user of each class, over that class's users.
    pub per_class_costs: Vec<f64>,
    /// First slot with `|Z(t) - z*|_inf < epsilon`.
    pub hitting_time: Option<usize>,
    /// Mean number of transmissions per user and slot.
    pub scheduled_fraction: f64,
    /// `z[t][k][j]` for `t < T`, when recorded.
    pub z: Option<Vec<Vec<Vec<f64>>>>,
}

/// Per-user state of a running simulation.
pub struct SimState {
    config: SystemConfig,
    rates: Vec<usize>,
    weights: Vec<f64>,
    /// Class of every user.
    pub classes: Vec<usize>,
    pub queues: Vec<usize>,
    pub t: usize,
    rng: ChaCha8Rng,
    /// Sum of `a q(u)` over `u = 1..=t`, per user.
    history: Vec<f64>,
    initial_cost: Vec<f64>,
}

impl SimState {
    pub fn new(config: &SystemConfig, initial: &InitialState, seed: u64) -> Result<Self> {
        let counts = config.class_counts();
        let classes: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect();
        let users = classes.len();
        let queues = match initial {
            InitialState::Empty => vec![0; users],
            InitialState::Full => vec![config.buffer; users],
            InitialState::Queues(q) => {
                if q.len() != users {
                    return Err(Error::Size(format!("{} initial queues for {users} users", q.len())));
                }
                if let Some(bad) = q.iter().find(|&&x| x > config.buffer) {
                    return Err(Error::Domain(format!("initial queue {bad} exceeds buffer {}", config.buffer)));
                }
                q.clone()
            }
        };
        let rates: Vec<usize> = config.classes.iter().map(|c| c.rate() as usize).collect();
        let weights: Vec<f64> = config.classes.iter().map(|c| c.weight()).collect();
        let initial_cost = classes.iter().zip(&queues).map(|(&k, &q)| weights[k] * q as f64).collect();
        Ok(SimState {
            config: config.clone(),
            rates,
            weights,
            classes,
            queues,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: vec![0.0; users],
            initial_cost,
        })
    }

    pub fn users(&self) -> usize {
        self.queues.len()
    }

    /// `Z(t)`: fraction of all users in each class and state.
    pub fn proportions(&self) -> Vec<Vec<f64>> {
        let mut z = vec![vec![0.0; self.config.buffer + 1]; self.config.classes.len()];
        let unit = 1.0 / self.users() as f64;
        for (&k, &q) in self.classes.iter().zip(&self.queues) {
            z[k][q] += unit;
        }
        z
    }

    /// Running average `D(t)` of `a q` for every user; `a q(0)` at `t = 0`.
    pub fn average_costs(&self) -> Vec<f64> {
        if self.t == 0 {
            self.initial_cost.clone()
        } else {
            self.history.iter().map(|h| h / self.t as f64).collect()
        }
    }

    /// Applies `actions`, draws arrivals and moves to the next slot.
    pub fn advance(&mut self, actions: &[bool]) {
        let buffer = self.config.buffer;
        for i in 0..self.queues.len() {
            let k = self.classes[i];
            let rate = self.rates[k];
            let arrival = self.rng.random_range(0..rate);
            let action = if actions[i] { Action::Active } else { Action::Passive };
            self.queues[i] = step_unchecked(self.queues[i], action, arrival, rate, buffer);
            self.history[i] += self.weights[k] * self.queues[i] as f64;
        }
        self.t += 1;
    }

    fn holding_costs(&self) -> (f64, Vec<f64>) {
        let mut per_class = vec![0.0; self.config.classes.len()];
        for (&k, &q) in self.classes.iter().zip(&self.queues) {
            per_class[k] += self.weights[k] * q as f64;
        }
        (per_class.iter().sum(), per_class)
    }
}

/// Precomputed data a policy needs.
pub struct Policy {
    pub kind: PolicyKind,
    /// Rank of each `(class, state)` key among all distinct keys, for the
    /// table-driven policies.
    levels: Vec<Vec<usize>>,
    level_count: usize,
    indices: Vec<Vec<f64>>,
    solution: Option<RelaxedSolution>,
}

fn rank_levels(keys: &[Vec<f64>]) -> (Vec<Vec<usize>>, usize) {
    let mut all: Vec<f64> = keys.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let levels = keys
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| all.binary_search_by(|x| x.total_cmp(v)).expect("key present"))
                .collect()
        })
        .collect();
    (levels, all.len())
}

impl Policy {
    pub fn new(kind: PolicyKind, config: &SystemConfig) -> Result<Self> {
        let indices = config
            .classes
            .iter()
            .map(|c| whittle_algorithm1(c, config.buffer).map(|t| t.values))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<Vec<f64>> = match kind {
            PolicyKind::MaxWeight => config
                .classes
                .iter()
                .map(|c| (0..=config.buffer).map(|q| c.weight() * q as f64).collect())
                .collect(),
            _ => indices.clone(),
        };
        let (levels, level_count) = rank_levels(&keys);
        let solution = match kind {
            PolicyKind::RelaxedRandomized => Some(solve_relaxed(config)?),
            _ => None,
        };
        Ok(Policy {
            kind,
            levels,
            level_count,
            indices,
            solution,
        })
    }

    pub fn indices(&self) -> &[Vec<f64>] {
        &self.indices
    }

    /// Transmission decision of every user in the current slot.
    pub fn schedule(&self, state: &mut SimState) -> Vec<bool> {
        let budget = state.config.budget;
        match self.kind {
            PolicyKind::Whittle | PolicyKind::MaxWeight => self.top_by_level(state, budget),
            PolicyKind::FairTheta => {
                let avg = state.average_costs();
                let keys: Vec<f64> = (0..state.users())
                    .map(|i| self.indices[state.classes[i]][state.queues[i]] * avg[i])
                    .collect();
                top_by_key(&keys, budget, &mut state.rng)
            }
            PolicyKind::RelaxedRandomized => {
                let s = self.solution.as_ref().expect("relaxed policy has a solution");
                let m = s.m_index();
                let lm = s.l[m];
                let p = 1.0 - s.theta;
                (0..state.users())
                    .map(|i| {
                        let k = state.classes[i];
                        let q = state.queues[i] as i64;
                        if k == m && q == lm {
                            state.rng.random_bool(p.clamp(0.0, 1.0))
                        } else {
                            q > s.l[k]
                        }
                    })
                    .collect()
            }
        }
    }

    /// The `budget` users with the highest level, ties at the boundary level
    /// drawn uniformly.
    fn top_by_level(&self, state: &mut SimState, budget: usize) -> Vec<bool> {
        let n = state.users();
        let user_level: Vec<usize> = (0..n).map(|i| self.levels[state.classes[i]][state.queues[i]]).collect();
        let mut counts = vec![0usize; self.level_count];
        for &l in &user_level {
            counts[l] += 1;
        }
        let mut above = 0;
        let mut boundary = 0;
        for level in (0..self.level_count).rev() {
            if above + counts[level] >= budget {
                boundary = level;
                break;
            }
            above += counts[level];
        }
        let need = budget - above;
        let mut chosen = vec![false; n];
        let mut tied = Vec::with_capacity(counts[boundary]);
        for (i, &l) in user_level.iter().enumerate() {
            if l > boundary {
                chosen[i] = true;
            } else if l == boundary {
                tied.push(i);
            }
        }
        pick(&tied, need, &mut chosen, &mut state.rng);
        chosen
    }
}

fn pick(tied: &[usize], need: usize, chosen: &mut [bool], rng: &mut ChaCha8Rng) {
    if need == tied.len() {
        for &i in tied {
            chosen[i] = true;
        }
    } else {
        for j in sample(rng, tied.len(), need) {
            chosen[tied[j]] = true;
        }
    }
}

/// Top `budget` users by a real key, random among equal keys at the cut.
fn top_by_key(keys: &[f64], budget: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = keys.len();
    let mut order: Vec<usize> = (0..n).collect();
    let (_, cut, _) = order.select_nth_unstable_by(budget - 1, |a, b| keys[*b].total_cmp(&keys[*a]));
    let cut = keys[*cut];
    let mut chosen = vec![false; n];
    let mut above = 0;
    let mut tied = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        if *k > cut {
            chosen[i] = true;
            above += 1;
        } else if *k == cut {
            tied.push(i);
        }
    }
    pick(&tied, budget - above, &mut chosen, rng);
    chosen
}

/// Runs `horizon` slots of `policy` from `options.initial`.
pub fn simulate(config: &SystemConfig, kind: PolicyKind, horizon: usize, seed: u64, options: &SimOptions) -> Result<SimTrace> {
    let policy = Policy::new(kind, config)?;
    simulate_with(config, &policy, horizon, seed, options)
}

pub fn simulate_with(
    config: &SystemConfig,
    policy: &Policy,
    horizon: usize,
    seed: u64,
    options: &SimOptions,
) -> Result<SimTrace> {
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least one slot".into()));
    }
    let mut state = SimState::new(config, &options.initial, seed)?;
    let users = state.users();
    let counts = config.class_counts();
    let mut total = 0.0;
    let mut per_class = vec![0.0; config.classes.len()];
    let mut transmissions = 0usize;
    let mut hitting_time = None;
    let mut z_series = options.record_z.then(Vec::new);
    let mut slots = 0;
    for t in 0..horizon {
        let (cost, class_cost) = state.holding_costs();
        total += cost;
        for (acc, c) in per_class.iter_mut().zip(class_cost) {
            *acc += c;
        }
        slots += 1;
        if z_series.is_some() || (options.hit.is_some() && hitting_time.is_none()) {
            let z = state.proportions();
            if let (Some(target), None) = (&options.hit, hitting_time) {
                if crate::fluid::max_distance(&z, &target.z_star) < target.epsilon {
                    hitting_time = Some(t);
                }
            }
            if let Some(series) = z_series.as_mut() {
                series.push(z);
            }
            if hitting_time.is_some() && options.hit.as_ref().is_some_and(|h| h.stop) {
                break;
            }
        }
        let actions = policy.schedule(&mut state);
        transmissions += actions.iter().filter(|a| **a).count();
        state.advance(&actions);
    }
    let slots_f = slots as f64;
    Ok(SimTrace {
        policy: policy.kind,
        users,
        horizon: slots,
        seed,
        cost_per_user: total / slots_f / users as f64,
        per_class_costs: per_class
            .iter()
            .zip(&counts)
            .map(|(c, &n)| if n == 0 { 0.0 } else { c / slots_f / n as f64 })
            .collect(),
        hitting_time,
        scheduled_fraction: transmissions as f64 / slots_f / users as f64,
        z: z_series,
    })
}

/// One replication request.
#[derive(Debug, Clone)]
pub struct SimJob {
    pub config: SystemConfig,
    pub policy: PolicyKind,
    pub horizon: usize,
    pub seed: u64,
    pub options: SimOptions,
}

/// Runs independent jobs in parallel; results come back in job order.
pub fn simulate_batch(jobs: &[SimJob]) -> Vec<Result<SimTrace>> {
    jobs.par_iter()
        .map(|j| simulate(&j.config, j.policy, j.horizon, j.seed, &j.options))
        .collect()
}

/// First recorded slot with `|Z(t) - z*|_inf < epsilon`.
pub fn hitting_time(trace: &SimTrace, z_star: &[Vec<f64>], epsilon: f64) -> Result<Option<usize>> {
    let z = trace
        .z
        .as_ref()
        .ok_or_else(|| Error::Usage("trace was run without recording Z".into()))?;
    Ok(z.iter().position(|zt| crate::fluid::max_distance(zt, z_star) < epsilon))
}

/// Summary record of a run, without the time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub users: usize,
    pub horizon: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub cost_per_user: f64,
    pub per_class_costs: Vec<f64>,
    pub hitting_time: Option<usize>,
}

impl From<&SimTrace> for SimSummary {
    fn from(t: &SimTrace) -> Self {
        SimSummary {
            users: t.users,
            horizon: t.horizon,
            seed: t.seed,
            policy: t.policy,
            cost_per_user: t.cost_per_user,
            per_class_costs: t.per_class_costs.clone(),
            hitting_time: t.hitting_time,
        }
    }
}
