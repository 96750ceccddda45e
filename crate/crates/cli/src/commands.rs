use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use delaysched::dp_oracle::{relative_value_iteration, verify_structure, StructureReport, DEFAULT_MAX_ITER};
use delaysched::fluid::{build_fluid_map, iterate_fluid, perturbed, spectral_radius};
use delaysched::relaxed::{dual_threshold, solve_relaxed_for};
use delaysched::simulator::{simulate_batch, HitTarget, InitialState, PolicyKind, SimJob, SimOptions, SimSummary};
use delaysched::stationary::{stationary_by_solve, stationary_closed_form};
use delaysched::whittle::{compare_indices, whittle_algorithm1};
use delaysched::{ClassSpec, RelaxedSolution};

use crate::config::{ConfigFile, ExperimentConfig, Preset};
use crate::error::{CliError, CliResult};

/// Where tabular output goes: a file, or stdout.
pub fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).map_err(|e| CliError::io(p, e))?;
            Ok(Box::new(std::io::BufWriter::new(file)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path.unwrap_or(Path::new("<stdout>")), e))
}

/// Class, buffer and budget fraction from a config file.
pub fn load_system(path: &Path) -> CliResult<(Vec<ClassSpec>, usize, f64)> {
    let file = ConfigFile::load(path)?;
    let missing = |field: &str| CliError::Parse(format!("{}: missing field `{field}`", path.display()));
    let classes = file.classes.ok_or_else(|| missing("classes"))?;
    let buffer = file.buffer.ok_or_else(|| missing("buffer"))?;
    let alpha = file.alpha.ok_or_else(|| missing("alpha"))?;
    delaysched::model::validate_classes(&classes)?;
    Ok((classes, buffer, alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhittleRow {
    pub state: usize,
    pub closed_form_index: f64,
    pub algorithm1_index: f64,
    #[serde(rename = "match")]
    pub matches: bool,
    /// The closed form disagrees somewhere in the table; Algorithm 1 is the
    /// reference.
    pub advisory: bool,
}

pub fn whittle_table(rate: u32, weight: f64, buffer: usize) -> CliResult<Vec<WhittleRow>> {
    let class = ClassSpec::single(rate, weight)?;
    let cmp = compare_indices(&class, buffer)?;
    Ok((0..=buffer)
        .map(|q| WhittleRow {
            state: q,
            closed_form_index: cmp.closed_form.values[q],
            algorithm1_index: cmp.algorithm.values[q],
            matches: cmp.agrees(q),
            advisory: cmp.advisory,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryRow {
    pub state: usize,
    pub closed_form: f64,
    pub linear_solve: f64,
    pub abs_diff: f64,
}

pub fn stationary_table(rate: u32, buffer: usize, threshold: i64) -> CliResult<Vec<StationaryRow>> {
    let class = ClassSpec::single(rate, 1.0)?;
    let closed = stationary_closed_form(&class, threshold, buffer)?;
    let solved = stationary_by_solve(&class, threshold, buffer)?;
    Ok(closed
        .u
        .iter()
        .zip(&solved.u)
        .enumerate()
        .map(|(state, (&c, &s))| StationaryRow { state, closed_form: c, linear_solve: s, abs_diff: (c - s).abs() })
        .collect())
}

pub fn write_csv<T: Serialize>(rows: &[T], path: Option<&Path>) -> CliResult<()> {
    let mut writer = csv::Writer::from_writer(open_output(path)?);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| CliError::io(path.unwrap_or(Path::new("<stdout>")), e))
}

pub fn relaxed_solve(path: &Path) -> CliResult<RelaxedSolution> {
    let (classes, buffer, alpha) = load_system(path)?;
    Ok(solve_relaxed_for(&classes, buffer, alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidReport {
    pub spectral_radius: f64,
    /// `l_m rho_m`.
    pub predicted_rate: f64,
    pub power_iteration_converged: bool,
    /// Holding cost at the fixed point of the affine map.
    pub fixed_point_cost: f64,
    pub perturbation: f64,
    pub started_in_region: bool,
    /// Max-norm distance to `z*` at every step.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub class: usize,
    pub state: usize,
    pub z: f64,
}

pub fn fluid(path: &Path, steps: usize, eps: f64) -> CliResult<(FluidReport, Vec<TrajectoryRow>)> {
    let (classes, buffer, alpha) = load_system(path)?;
    let solution = solve_relaxed_for(&classes, buffer, alpha)?;
    let system = build_fluid_map(&solution, &classes, buffer)?;
    let spectral = spectral_radius(&system.q)?;
    let m = solution.m_index();
    let fixed = system.expand(&system.fixed_point()?);
    let fixed_point_cost = fixed
        .iter()
        .zip(&classes)
        .map(|(row, c)| row.iter().enumerate().map(|(j, z)| c.weight() * j as f64 * z).sum::<f64>())
        .sum();
    let trajectory = iterate_fluid(&system, &perturbed(&solution.z_star, eps), steps)?;
    let report = FluidReport {
        spectral_radius: spectral.radius,
        predicted_rate: solution.l[m] as f64 * classes[m].rho(),
        power_iteration_converged: spectral.converged,
        fixed_point_cost,
        perturbation: eps,
        started_in_region: trajectory.started_in_region,
        distances: trajectory.distances(&solution.z_star),
    };
    let rows = trajectory.rows().map(|(t, class, state, z)| TrajectoryRow { t, class, state, z }).collect();
    Ok((report, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpRow {
    pub subsidy: f64,
    pub threshold: Option<i64>,
    /// Largest passive state of the index table at this subsidy.
    pub index_threshold: i64,
    pub matches: bool,
    pub average_cost: f64,
    pub iterations: usize,
    pub structure: StructureReport,
}

/// Value iteration at `subsidy`, or at the midpoint of every gap between
/// consecutive index values.
pub fn dp_verify(rate: u32, weight: f64, buffer: usize, subsidy: Option<f64>, tol: f64) -> CliResult<Vec<DpRow>> {
    let class = ClassSpec::single(rate, weight)?;
    let table = whittle_algorithm1(&class, buffer)?;
    let subsidies = match subsidy {
        Some(w) => vec![w],
        None => {
            let mut levels = table.values.clone();
            levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            levels.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect()
        }
    };
    subsidies
        .into_iter()
        .map(|w| {
            let sol = relative_value_iteration(&class, w, buffer, tol, DEFAULT_MAX_ITER)?;
            let index_threshold = dual_threshold(w, &table).upper();
            Ok(DpRow {
                subsidy: w,
                threshold: sol.threshold(),
                index_threshold,
                matches: sol.threshold() == Some(index_threshold),
                average_cost: sol.theta_avg,
                iterations: sol.iterations,
                structure: verify_structure(&sol),
            })
        })
        .collect()
}

/// One simulation run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub initial: InitialState,
    #[serde(flatten)]
    pub summary: SimSummary,
}

/// Figure data: named columns, one row per `N` (and seed for hitting times).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Series {
    pub fn write_csv(&self, path: Option<&Path>) -> CliResult<()> {
        let mut writer = csv::Writer::from_writer(open_output(path)?);
        writer.write_record(&self.columns)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))?;
        }
        writer.flush().map_err(|e| CliError::io(path.unwrap_or(Path::new("<stdout>")), e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub config: ExperimentConfig,
    /// Relaxed lower bound, when the relaxed problem is solvable.
    pub rp_bound: Option<f64>,
    pub series: Series,
    pub runs: Vec<RunRecord>,
}

fn initial_name(initial: &InitialState) -> &'static str {
    match initial {
        InitialState::Empty => "empty",
        InitialState::Full => "full",
        InitialState::Queues(_) => "custom",
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

pub fn simulate(config: &ExperimentConfig) -> CliResult<SimulateReport> {
    config.validate()?;
    let relaxed = solve_relaxed_for(&config.classes, config.buffer, config.alpha);
    let hitting = config.preset == Some(Preset::Fig2);
    let hit = if hitting {
        let solution = relaxed.clone()?;
        Some(HitTarget { z_star: solution.z_star, epsilon: config.epsilon, stop: true })
    } else {
        None
    };
    let policies: &[PolicyKind] = if hitting { &config.policies[..1] } else { &config.policies };

    let mut jobs = Vec::new();
    let mut initials = Vec::new();
    for &policy in policies {
        for initial in &config.initial_states {
            for &n in &config.n_sweep {
                for &seed in &config.seeds {
                    jobs.push(SimJob {
                        config: config.system(n)?,
                        policy,
                        horizon: config.horizon,
                        seed,
                        options: SimOptions { initial: initial.clone(), record_z: false, hit: hit.clone() },
                    });
                    initials.push(initial.clone());
                }
            }
        }
    }
    let mut runs = Vec::with_capacity(jobs.len());
    for (trace, initial) in simulate_batch(&jobs).into_iter().zip(initials) {
        runs.push(RunRecord { initial, summary: SimSummary::from(&trace?) });
    }

    let rp_bound = relaxed.as_ref().ok().map(|s| s.cost_per_user);
    let series = if hitting {
        hitting_series(config, &runs)
    } else if config.preset == Some(Preset::Fig5) {
        class_cost_series(config, policies, &runs)
    } else {
        cost_series(config, policies, &runs, rp_bound)
    };
    Ok(SimulateReport { config: config.clone(), rp_bound, series, runs })
}

fn select<'a>(
    runs: &'a [RunRecord],
    policy: PolicyKind,
    initial: &'a InitialState,
    n: usize,
) -> impl Iterator<Item = &'a SimSummary> + 'a {
    runs.iter()
        .filter(move |r| r.summary.policy == policy && &r.initial == initial && r.summary.users == n)
        .map(|r| &r.summary)
}

fn hitting_series(config: &ExperimentConfig, runs: &[RunRecord]) -> Series {
    let mut columns = vec!["n".to_string(), "seed".to_string()];
    columns.extend(config.initial_states.iter().map(|i| format!("hit_{}", initial_name(i))));
    let policy = config.policies[0];
    let mut rows = Vec::new();
    for &n in &config.n_sweep {
        for &seed in &config.seeds {
            let mut row = vec![Some(n as f64), Some(seed as f64)];
            for initial in &config.initial_states {
                let hit = select(runs, policy, initial, n).find(|s| s.seed == seed).and_then(|s| s.hitting_time);
                row.push(hit.map(|h| h as f64));
            }
            rows.push(row);
        }
    }
    Series { columns, rows }
}

fn cost_series(config: &ExperimentConfig, policies: &[PolicyKind], runs: &[RunRecord], rp_bound: Option<f64>) -> Series {
    let several = config.initial_states.len() > 1;
    let mut columns = vec!["n".to_string()];
    for policy in policies {
        for initial in &config.initial_states {
            columns.push(if several {
                format!("{}_{}_cost", policy.name(), initial_name(initial))
            } else {
                format!("{}_cost", policy.name())
            });
        }
    }
    if rp_bound.is_some() {
        columns.push("rp_bound".into());
    }
    let rows = config
        .n_sweep
        .iter()
        .map(|&n| {
            let mut row = vec![Some(n as f64)];
            for &policy in policies {
                for initial in &config.initial_states {
                    row.push(Some(mean(select(runs, policy, initial, n).map(|s| s.cost_per_user))));
                }
            }
            if rp_bound.is_some() {
                row.push(rp_bound);
            }
            row
        })
        .collect();
    Series { columns, rows }
}

fn class_cost_series(config: &ExperimentConfig, policies: &[PolicyKind], runs: &[RunRecord]) -> Series {
    let initial = &config.initial_states[0];
    let mut columns = vec!["n".to_string()];
    for policy in policies {
        for k in 1..=config.classes.len() {
            columns.push(format!("{}_c{k}", policy.name()));
        }
    }
    let rows = config
        .n_sweep
        .iter()
        .map(|&n| {
            let mut row = vec![Some(n as f64)];
            for &policy in policies {
                for k in 0..config.classes.len() {
                    row.push(Some(mean(select(runs, policy, initial, n).map(|s| s.per_class_costs[k]))));
                }
            }
            row
        })
        .collect();
    Series { columns, rows }
}

/// Writes `<name>.json` and `<name>.csv` into `dir`.
pub fn write_simulation_files(report: &SimulateReport, dir: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = report.config.preset.map_or("simulate", Preset::name);
    let json = dir.join(format!("{name}.json"));
    let csv = dir.join(format!("{name}.csv"));
    write_json(report, Some(&json))?;
    report.series.write_csv(Some(&csv))?;
    Ok(vec![json, csv])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRow {
    policy: PolicyKind,
    initial: String,
    users: usize,
    seed: u64,
    horizon: usize,
    cost_per_user: f64,
    per_class_costs: String,
    hitting_time: Option<usize>,
}

/// One CSV row per run; class costs are `;`-separated.
pub fn write_runs_csv(runs: &[RunRecord], path: &Path) -> CliResult<()> {
    let rows: Vec<RunRow> = runs
        .iter()
        .map(|r| RunRow {
            policy: r.summary.policy,
            initial: initial_name(&r.initial).into(),
            users: r.summary.users,
            seed: r.summary.seed,
            horizon: r.summary.horizon,
            cost_per_user: r.summary.cost_per_user,
            per_class_costs: r.summary.per_class_costs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            hitting_time: r.summary.hitting_time,
        })
        .collect();
    write_csv(&rows, Some(path))
}
