use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xsight::model::{Mode, TrainingConfig};
use xsight::{Error, Result};

/// Learning rates below this run the low-rate regime (decoder warm-up first).
const LOW_RATE_CUTOFF: f64 = 1e-3;

/// Every knob of a run. Config files hold any subset of these fields; flags
/// override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Fine-tuned model checkpoint. Defaults to `model-<mode>.xsgt` in the
    /// data directory.
    pub checkpoint: Option<PathBuf>,
    pub port: u16,
    pub mode: Mode,
    pub lr: f64,
    pub epochs: usize,
    /// Warm-up epochs before the main ones; by default 10 in the low-rate
    /// regime and none otherwise.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub splits: usize,
    pub q: f64,
    pub k_max: usize,
    pub epsilon: f64,
    pub steps: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub image_size: usize,
    pub image_stages: usize,
    pub image_base_channels: usize,
    pub embedding_dim: usize,
    pub skipgram_epochs: usize,
    pub filters: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dir: PathBuf::from("xsight-data"),
            checkpoint: None,
            port: 7860,
            mode: Mode::Multimodal,
            lr: 1e-2,
            epochs: 10,
            warmup_epochs: None,
            batch_size: 16,
            splits: 3,
            q: 0.98,
            k_max: xsight::detection::DEFAULT_K_MAX,
            epsilon: xsight::detection::DEFAULT_EPSILON,
            steps: xsight::attribution::DEFAULT_STEPS,
            n_source: 400,
            n_target: 600,
            image_size: xsight::synth::DEFAULT_IMAGE_SIZE,
            image_stages: 3,
            image_base_channels: 4,
            embedding_dim: 32,
            skipgram_epochs: 5,
            filters: 8,
            hidden: xsight::model::DEFAULT_HIDDEN,
            max_len: xsight::text::DEFAULT_MAX_LEN,
            pretrain_lr: 1e-2,
            pretrain_epochs: 20,
        }
    }
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub port: Option<u16>,
    pub mode: Option<Mode>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub q: Option<f64>,
    pub k_max: Option<usize>,
    pub epsilon: Option<f64>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))
    }

    /// File values (or defaults) with the flags applied on top.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &flags.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        apply!(seed, data_dir, port, mode, lr, epochs, q, k_max, epsilon, steps);
        if flags.checkpoint.is_some() {
            cfg.checkpoint = flags.checkpoint.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("--lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::Usage(format!("--q must lie in [0, 1), got {}", self.q)));
        }
        if self.k_max == 0 {
            return Err(Error::Usage("--k-max must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Usage(format!("--epsilon must be positive, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Usage("--steps must be at least 1".into()));
        }
        if self.splits == 0 {
            return Err(Error::Usage("splits must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn is_low_rate(&self) -> bool {
        self.lr < LOW_RATE_CUTOFF
    }

    /// Fine-tuning protocol for `lr`/`epochs`: the low-rate regime keeps its
    /// decoder warm-up, the high-rate one trains everything from the start.
    pub fn training_config(&self) -> TrainingConfig {
        let mut t = if self.is_low_rate() {
            TrainingConfig::low_rate()
        } else {
            TrainingConfig::high_rate()
        };
        t.learning_rate = self.lr;
        t.epochs = self.epochs;
        t.batch_size = self.batch_size;
        t.splits = self.splits;
        t.seed = self.seed;
        if let Some(w) = self.warmup_epochs {
            t.warmup_epochs = w;
        }
        t
    }

    pub fn pretrain_config(&self) -> TrainingConfig {
        let mut t = TrainingConfig::pretrain();
        t.learning_rate = self.pretrain_lr;
        t.epochs = self.pretrain_epochs;
        t.batch_size = self.batch_size;
        t.seed = self.seed;
        t
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data_dir.join("source")
    }

    pub fn target_dir(&self) -> PathBuf {
        self.data_dir.join("target")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir.join("vocab.json")
    }

    pub fn embedding_path(&self) -> PathBuf {
        self.data_dir.join("embedding.txt")
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.data_dir.join("encoder.xsgt")
    }

    pub fn pretrain_history_path(&self) -> PathBuf {
        self.data_dir.join("pretrain-history.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.data_dir.join(format!("model-{}.xsgt", self.mode)))
    }

    /// Architecture description stored beside the checkpoint.
    pub fn model_config_path(&self) -> PathBuf {
        self.checkpoint_path().with_extension("json")
    }

    pub fn history_path(&self) -> PathBuf {
        self.checkpoint_path().with_extension("history.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("xsight-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        fs::write(&path, r#"{"seed": 3, "q": 0.9, "epochs": 50, "lr": 1e-5}"#).unwrap();
        let flags = Overrides {
            q: Some(0.99),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!((cfg.seed, cfg.q, cfg.epochs), (3, 0.99, 50));
        assert!(cfg.is_low_rate());
        let t = cfg.training_config();
        assert_eq!((t.learning_rate, t.epochs, t.warmup_epochs), (1e-5, 50, 10));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_field_and_bad_q_are_usage_errors() {
        let dir = std::env::temp_dir().join(format!("xsight-cfg-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        fs::write(&path, r#"{"sede": 3}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &Overrides::default()), Err(Error::Usage(_))));
        let flags = Overrides {
            q: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(RunConfig::resolve(None, &flags), Err(Error::Usage(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn paths_follow_checkpoint() {
        let cfg = RunConfig {
            checkpoint: Some(PathBuf::from("/tmp/x/m.xsgt")),
            ..Default::default()
        };
        assert_eq!(cfg.model_config_path(), PathBuf::from("/tmp/x/m.json"));
        assert_eq!(cfg.history_path(), PathBuf::from("/tmp/x/m.history.csv"));
        let cfg = RunConfig {
            mode: Mode::TextOnly,
            ..Default::default()
        };
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("xsight-data/model-text-only.xsgt"));
    }
}
