use std::path::{Path, PathBuf};

use rvla_core::data::ManeuverKind;
use rvla_core::model::ModelConfig;
use rvla_core::rewards::RewardConfig;
use rvla_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Synthetic corpus used when no `corpus` path is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub history_len: usize,
    pub kinds: Vec<ManeuverKind>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            count: 2000,
            history_len: 7,
            kinds: ManeuverKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub replan_hz: f64,
    /// JSON array of scenario specs; the built-in suite when absent.
    pub scenarios: Option<PathBuf>,
    /// Lateral offset of the two neighbour-lane boxes used for open-loop
    /// collision rate.
    pub lane_offset: f64,
    pub ego_half_extents: [f64; 2],
    pub plot_clips: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            replan_hz: 2.0,
            scenarios: None,
            lane_offset: 3.5,
            ego_half_extents: rvla_core::eval::EGO_HALF_EXTENTS,
            plot_clips: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    /// JSON-lines corpus; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub val_fraction: f64,
    pub include_origin_row: bool,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rewards: RewardConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            corpus: None,
            val_fraction: 0.2,
            include_origin_row: false,
            synth: SynthSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rewards: RewardConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; unknown or mistyped fields are reported with
    /// their path.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let at = if at == "." { "<root>".to_string() } else { at };
            CliError::Input(format!("config {}: {at}: {}", path.display(), e.inner()))
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Every problem as `field.path: message`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, path: &str, what: String| {
            if !ok {
                v.push(format!("{path}: {what}"));
            }
        };
        need(self.threads >= 1, "threads", "must be >= 1".into());
        need(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction",
            format!("must be in (0, 1), got {}", self.val_fraction),
        );
        need(
            self.train.seed == 0 || self.train.seed == self.seed,
            "train.seed",
            "conflicts with the top-level seed; set only `seed`".into(),
        );
        if let Some(c) = &self.corpus {
            need(c.is_file(), "corpus", format!("file not found: {}", c.display()));
        }
        need(self.synth.count >= 2, "synth.count", "must be >= 2".into());
        need(self.synth.history_len >= 1, "synth.history_len", "must be >= 1".into());
        need(!self.synth.kinds.is_empty(), "synth.kinds", "must list at least one maneuver".into());
        need(
            self.eval.replan_hz > 0.0 && self.eval.replan_hz.is_finite(),
            "eval.replan_hz",
            "must be a finite value > 0".into(),
        );
        need(self.eval.lane_offset > 0.0, "eval.lane_offset", "must be > 0".into());
        need(
            self.eval.ego_half_extents.iter().all(|h| *h > 0.0),
            "eval.ego_half_extents",
            "must be positive".into(),
        );
        if let Some(s) = &self.eval.scenarios {
            need(s.is_file(), "eval.scenarios", format!("file not found: {}", s.display()));
        }
        if let Err(e) = self.model.validate() {
            v.push(strip_kind(e));
        }
        if let Err(e) = self.rewards.validate() {
            v.push(strip_kind(e));
        }
        v.extend(self.train.violations());
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Input(format!("invalid config:\n  {}", v.join("\n  "))))
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }
}

/// Core contract messages already start with the field path.
fn strip_kind(e: rvla_core::Error) -> String {
    match e {
        rvla_core::Error::Contract(m) => m,
        other => other.to_string(),
    }
}
