//! Run configuration.
//!
//! A run is described by one TOML document with a section per component.
//! Missing keys fall back to the defaults, so a file only needs to name what
//! it changes. Overrides given as `section.key=value` are applied on top of
//! the file, and magnet overrides take the short form `Q5=0`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::ddpg::{CurriculumConfig, CurriculumPlan, DdpgConfig, Disturbance, Phase};
use crate::error::{Error, Result};
use crate::es::{golden_ratios, EsConfig};
use crate::experiments::{PerturbationSchedule, Study1dConfig, VariantKind};
use crate::hybrid::SupervisorConfig;
use crate::kv::{BeamInit, Lattice};
use crate::reward::RewardConfig;

/// Prefix that selects a lattice bundled with the library.
pub const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Restrict the curriculum to one phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    /// Stop after this many episodes in total, counting resumed ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_episodes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub episodes: usize,
    /// Also measure a uniformly random policy on the same episodes.
    pub random_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    pub variants: Vec<VariantKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Inclusive `[start, end]` windows for the summary means.
    pub windows: Vec<[usize; 2]>,
    /// Also run the scalar unknown-direction study.
    pub scalar_study: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Lattice file, or `builtin:default`, `builtin:desk`, `builtin:reduced`.
    pub lattice: String,
    /// Output directory. Relative paths are taken under the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    /// Nominal strength overrides keyed `Q1`..`QN`, tesla/meter.
    pub settings: BTreeMap<String, f64>,
    pub init: BeamInit,
    pub reward: RewardConfig,
    /// An empty `ratios` list means the golden-ratio ladder sized to the lattice.
    pub es: EsConfig,
    pub ddpg: DdpgConfig,
    pub curriculum: CurriculumConfig,
    /// Exogenous drives applied while training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<Disturbance>,
    pub supervisor: SupervisorConfig,
    pub schedule: PerturbationSchedule,
    pub study1d: Study1dConfig,
    pub train: TrainOptions,
    pub evaluate: EvaluateOptions,
    pub experiment: ExperimentOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut es = EsConfig::with_defaults(0, 2e-3);
        es.gain = 15.0;
        Self {
            seed: 0,
            lattice: "builtin:desk".into(),
            output: None,
            settings: BTreeMap::new(),
            init: BeamInit::new(3e-3, 3e-3, 0.0, 0.0),
            reward: RewardConfig::default(),
            es,
            ddpg: DdpgConfig::default(),
            curriculum: CurriculumConfig::default(),
            disturbance: None,
            supervisor: SupervisorConfig::default(),
            schedule: PerturbationSchedule::default(),
            study1d: Study1dConfig::default(),
            train: TrainOptions {
                phase: None,
                max_episodes: None,
            },
            evaluate: EvaluateOptions {
                checkpoint: None,
                episodes: 20,
                random_baseline: true,
            },
            experiment: ExperimentOptions {
                variants: VariantKind::ALL.to_vec(),
                checkpoint: None,
                windows: vec![[0, 99], [100, 400], [401, 500]],
                scalar_study: false,
            },
        }
    }
}

/// Sections that are absent from the defaults and are filled from their own
/// defaults when a file mentions them.
fn optional_section_default(key: &str) -> Option<Value> {
    match key {
        "disturbance" => Value::try_from(Disturbance::default()).ok(),
        _ => None,
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (None, Value::Table(t)) if optional_section_default(&k).is_some() => {
                let Some(Value::Table(mut b)) = optional_section_default(&k) else {
                    unreachable!()
                };
                merge(&mut b, t);
                base.insert(k, Value::Table(b));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> Value {
    let text = text.trim();
    match toml::from_str::<Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

fn is_magnet_key(key: &str) -> bool {
    key.strip_prefix('Q')
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Applies one `path=value` override to a configuration table.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path = path.trim();
    let mut keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    if keys.len() == 1 && is_magnet_key(keys[0]) {
        keys.insert(0, "settings");
    }
    let last = keys.pop().expect("split yields at least one key");
    let mut node = table;
    for k in keys {
        if !node.contains_key(k) {
            let fresh = optional_section_default(k).unwrap_or_else(|| Value::Table(Table::new()));
            node.insert(k.into(), fresh);
        }
        node = match node.get_mut(k) {
            Some(Value::Table(t)) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override `{spec}`: `{k}` is not a section"
                )))
            }
        };
    }
    node.insert(last.into(), parse_value(value));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `text`, then each override in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let Value::Table(mut table) = Value::try_from(Self::default())? else {
            unreachable!("a struct serializes to a table")
        };
        merge(&mut table, toml::from_str(text)?);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Ok(Value::Table(table).try_into()?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Reads a file and rebases its relative paths on the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config file {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut String| {
            if !p.starts_with(BUILTIN_PREFIX) && Path::new(p.as_str()).is_relative() {
                *p = dir.join(&*p).to_string_lossy().into_owned();
            }
        };
        fix(&mut self.lattice);
        self.evaluate.checkpoint.as_mut().map(fix);
        self.experiment.checkpoint.as_mut().map(fix);
    }

    /// The lattice with the nominal strength overrides applied.
    pub fn lattice(&self) -> Result<Lattice> {
        let mut lattice = match self.lattice.strip_prefix(BUILTIN_PREFIX) {
            Some("default") => Lattice::default_beamline(),
            Some("desk") => Lattice::desk_beamline(),
            Some("reduced") => Lattice::reduced_beamline(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown bundled lattice `{other}`; expected default, desk or reduced"
                )))
            }
            None => {
                let path = Path::new(&self.lattice);
                if !path.exists() {
                    return Err(Error::MissingArtifact(format!(
                        "lattice file {}",
                        path.display()
                    )));
                }
                Lattice::load(path)?
            }
        };
        for (key, &value) in &self.settings {
            let i: usize = key
                .strip_prefix('Q')
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "setting `{key}` must be named Q1..Q{}",
                        lattice.len()
                    ))
                })?;
            if i == 0 || i > lattice.len() {
                return Err(Error::Config(format!(
                    "setting `{key}` refers to a magnet outside Q1..Q{}",
                    lattice.len()
                )));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("setting {key}")));
            }
            lattice.magnets[i - 1].nominal_strength = value;
        }
        lattice.validate()?;
        Ok(lattice)
    }

    /// Files the run reads, by role.
    pub fn input_files(&self) -> BTreeMap<&'static str, PathBuf> {
        let mut out = BTreeMap::new();
        if !self.lattice.starts_with(BUILTIN_PREFIX) {
            out.insert("lattice", PathBuf::from(&self.lattice));
        }
        if let Some(p) = &self.evaluate.checkpoint {
            out.insert("evaluate.checkpoint", PathBuf::from(p));
        }
        if let Some(p) = &self.experiment.checkpoint {
            out.insert("experiment.checkpoint", PathBuf::from(p));
        }
        out
    }

    /// The ES settings with the ratios filled in for `n` magnets.
    pub fn es_for(&self, n: usize) -> Result<EsConfig> {
        let mut es = self.es.clone();
        if es.ratios.is_empty() {
            es.ratios = golden_ratios(n);
        }
        if es.len() != n {
            return Err(Error::Config(format!(
                "es.ratios has {} entries for {n} magnets",
                es.len()
            )));
        }
        es.validate()?;
        Ok(es)
    }

    /// Checks shared by every job. Returns the lattice built along the way.
    pub fn validate(&self) -> Result<Lattice> {
        // TOML integers are signed 64-bit; a larger seed could not be recorded.
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!(
                "seed must be at most {}, got {}",
                i64::MAX,
                self.seed
            )));
        }
        let lattice = self.lattice()?;
        self.init.validate()?;
        self.reward.validate()?;
        self.es_for(lattice.len())?;
        self.ddpg.validate()?;
        self.supervisor.validate()?;
        self.study1d.validate()?;
        if self.evaluate.episodes == 0 {
            return Err(Error::Config("evaluate.episodes must be positive".into()));
        }
        if self.experiment.variants.is_empty() {
            return Err(Error::Config("experiment.variants is empty".into()));
        }
        if self.experiment.windows.iter().any(|w| w[0] > w[1]) {
            return Err(Error::Config("experiment.windows need start <= end".into()));
        }
        Ok(lattice)
    }

    /// Checks for training: the curriculum must partition the lattice.
    pub fn validate_training(&self, lattice: &Lattice) -> Result<CurriculumPlan> {
        if let Some(d) = &self.disturbance {
            d.validate(lattice)?;
        }
        let mut curriculum = self.curriculum.clone();
        if let Some(p) = self.train.phase {
            curriculum.phases = vec![p];
        }
        CurriculumPlan::new(curriculum, lattice.len())
    }

    /// Checks for the perturbation study.
    pub fn validate_experiment(&self, lattice: &Lattice) -> Result<()> {
        self.schedule.validate(lattice)
    }
}

/// Parses a comma-separated variant list such as `es,hybrid`.
pub fn parse_variants(text: &str) -> Result<Vec<VariantKind>> {
    text.split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<_>>>()
}
