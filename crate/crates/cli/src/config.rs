//! Experiment configuration files and the figure presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use delaysched::simulator::{InitialState, PolicyKind};
use delaysched::{ClassSpec, SystemConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Hitting time of the relaxed optimum against N.
    Fig2,
    /// Cost against N for the index policy, Max-Weight and the relaxed bound.
    Fig4,
    /// Per-class costs under the fairness policy and the index policy.
    Fig5,
    /// Short buffer, L=10 and R=(20,30).
    Fig6,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Fig4 => "fig4",
            Preset::Fig5 => "fig5",
            Preset::Fig6 => "fig6",
        }
    }
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub classes: Vec<ClassSpec>,
    pub buffer: usize,
    pub alpha: f64,
    pub policies: Vec<PolicyKind>,
    pub n_sweep: Vec<usize>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub initial_states: Vec<InitialState>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
}

/// Contents of a config file; every field overrides the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub classes: Option<Vec<ClassSpec>>,
    pub buffer: Option<usize>,
    pub alpha: Option<f64>,
    pub policies: Option<Vec<PolicyKind>>,
    pub n_sweep: Option<Vec<usize>>,
    pub horizon: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub epsilon: Option<f64>,
    pub initial_states: Option<Vec<InitialState>>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
}

pub const DEFAULT_SWEEP: [usize; 5] = [200, 400, 800, 1600, 3200];
pub const DEFAULT_HORIZON: usize = 20_000;

fn reference_classes() -> Vec<ClassSpec> {
    vec![ClassSpec::new(5, 1.0, 0.5).unwrap(), ClassSpec::new(10, 1.0, 0.5).unwrap()]
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    /// The preset's parameters as a config file.
    pub fn preset(preset: Preset) -> Self {
        let mut base = ConfigFile {
            classes: Some(reference_classes()),
            buffer: Some(50),
            alpha: Some(0.5),
            n_sweep: Some(DEFAULT_SWEEP.to_vec()),
            horizon: Some(DEFAULT_HORIZON),
            seeds: Some(vec![1, 2, 3]),
            epsilon: Some(0.05),
            initial_states: Some(vec![InitialState::Empty]),
            preset: Some(preset),
            ..ConfigFile::default()
        };
        match preset {
            Preset::Fig2 => {
                base.policies = Some(vec![PolicyKind::Whittle]);
                base.n_sweep = Some(vec![400, 800, 1600, 3200]);
                base.seeds = Some(vec![1]);
                base.initial_states = Some(vec![InitialState::Empty, InitialState::Full]);
            }
            Preset::Fig4 => base.policies = Some(vec![PolicyKind::Whittle, PolicyKind::MaxWeight]),
            Preset::Fig5 => base.policies = Some(vec![PolicyKind::Whittle, PolicyKind::FairTheta]),
            Preset::Fig6 => {
                base.classes = Some(vec![ClassSpec::new(20, 1.0, 0.5).unwrap(), ClassSpec::new(30, 1.0, 0.5).unwrap()]);
                base.buffer = Some(10);
                base.policies = Some(vec![PolicyKind::Whittle, PolicyKind::MaxWeight]);
            }
        }
        base
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: ConfigFile) -> ConfigFile {
        ConfigFile {
            classes: self.classes.or(base.classes),
            buffer: self.buffer.or(base.buffer),
            alpha: self.alpha.or(base.alpha),
            policies: self.policies.or(base.policies),
            n_sweep: self.n_sweep.or(base.n_sweep),
            horizon: self.horizon.or(base.horizon),
            seeds: self.seeds.or(base.seeds),
            epsilon: self.epsilon.or(base.epsilon),
            initial_states: self.initial_states.or(base.initial_states),
            output_dir: self.output_dir.or(base.output_dir),
            preset: self.preset.or(base.preset),
        }
    }

    pub fn resolve(self) -> CliResult<ExperimentConfig> {
        let missing = |field: &str| CliError::Parse(format!("missing field `{field}` (no preset supplies it)"));
        let config = ExperimentConfig {
            classes: self.classes.ok_or_else(|| missing("classes"))?,
            buffer: self.buffer.ok_or_else(|| missing("buffer"))?,
            alpha: self.alpha.ok_or_else(|| missing("alpha"))?,
            policies: self.policies.unwrap_or_else(|| vec![PolicyKind::Whittle]),
            n_sweep: self.n_sweep.unwrap_or_else(|| DEFAULT_SWEEP.to_vec()),
            horizon: self.horizon.unwrap_or(DEFAULT_HORIZON),
            seeds: self.seeds.unwrap_or_else(|| vec![1, 2, 3]),
            epsilon: self.epsilon.unwrap_or(0.05),
            initial_states: self.initial_states.unwrap_or_else(|| vec![InitialState::Empty]),
            output_dir: self.output_dir,
            preset: self.preset,
        };
        config.validate()?;
        Ok(config)
    }
}

impl ExperimentConfig {
    /// System invariants for every `N` of the sweep, and the run settings.
    pub fn validate(&self) -> CliResult<()> {
        delaysched::model::validate_classes(&self.classes)?;
        for &n in &self.n_sweep {
            self.system(n)?;
        }
        let domain = |msg: String| CliError::Model(delaysched::Error::Domain(msg));
        if self.n_sweep.is_empty() || self.seeds.is_empty() || self.policies.is_empty() || self.initial_states.is_empty() {
            return Err(domain("n_sweep, seeds, policies and initial_states must be non-empty".into()));
        }
        if self.horizon == 0 {
            return Err(domain("horizon must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn system(&self, users: usize) -> CliResult<SystemConfig> {
        Ok(SystemConfig::new(self.classes.clone(), self.buffer, users, self.alpha)?)
    }
}
