//! Run configuration: one TOML file holding every experiment parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{make_schedule, ModelConfig, NoiseSchedule, PretrainConfig, ScheduleKind};
use crate::error::{field, Result, RpoError};
use crate::eval::EvalConfig;
use crate::reward::RewardConfig;
use crate::rpo::TrainConfig;
use crate::world::{build_world, SubjectWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 12,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> Result<SubjectWorld> {
        build_world(self.n_subjects, self.seed).map_err(|e| field("n_subjects", e.to_string()).in_section("world"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub horizon: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            kind: ScheduleKind::Cosine,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.horizon, self.kind).map_err(|e| field("horizon", e.to_string()).in_section("schedule"))
    }
}

/// Everything an experiment needs. `output` only says where run directories
/// go and is excluded from the content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RpoError::Config {
            path: e.span().map_or_else(|| "<file>".into(), |s| locate(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RpoError::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.n_subjects < 2 {
            return Err(field("world.n_subjects", "must be at least 2"));
        }
        if self.schedule.horizon < 2 {
            return Err(field("schedule.horizon", "must be at least 2"));
        }
        self.model.validate().map_err(|e| e.in_section("model"))?;
        self.pretrain.validate().map_err(|e| e.in_section("pretrain"))?;
        self.train.validate().map_err(|e| e.in_section("train"))?;
        self.reward.validate().map_err(|e| e.in_section("reward"))?;
        self.eval.validate().map_err(|e| e.in_section("eval"))?;
        for (name, steps) in [
            ("train.gen_steps", self.train.gen_steps),
            ("train.val_steps", self.train.val_steps),
            ("eval.sampler_steps", self.eval.sampler_steps),
        ] {
            if steps > self.schedule.horizon {
                return Err(field(
                    name,
                    format!("must not exceed schedule.horizon ({})", self.schedule.horizon),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every field except `output`.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

/// `line L, column C` for a byte offset, used when the parser has no key path.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, str::len) + 1;
    let key = text
        .lines()
        .nth(line - 1)
        .and_then(|l| l.split('=').next())
        .map(str::trim)
        .filter(|k| !k.is_empty() && !k.starts_with('['));
    let section = before
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')));
    match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k} (line {line}, column {column})"),
        (None, Some(k)) => format!("{k} (line {line}, column {column})"),
        _ => format!("line {line}, column {column}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[train]\nbeta = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.beta, 0.5);
        assert_eq!(cfg.train.max_steps, 400);
        assert_eq!(cfg.reward.lambda_val, 0.3);
    }

    #[test]
    fn hash_tracks_content_but_not_output() {
        let a = RunConfig::default();
        let b = RunConfig {
            output: Some("/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.content_hash(), b.content_hash());
        let mut c = a.clone();
        c.train.beta = 2.0;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn errors_name_the_field() {
        let msg = |text: &str| RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(msg("[train]\nbeta = -1.0\n").contains("train.beta"));
        assert!(msg("[train]\nmax_steps = 100\nvalidate_every = 30\n").contains("train.validate_every"));
        assert!(msg("[reward]\nlambda_val = 2.0\n").contains("reward.lambda_val"));
        assert!(msg("[train]\nbeta = \"high\"\n").contains("train.beta"));
        assert!(msg("[train]\nbetta = 1.0\n").contains("train.betta"));
        assert!(msg("[world]\nn_subjects = 1\n").contains("world.n_subjects"));
    }
}
