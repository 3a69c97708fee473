//! Run configuration.
//!
//! Sources, later ones winning: built-in task defaults, a UTF-8 key/value
//! config file with dotted keys (`model.k_slots=6`), environment variables
//! (`STRM_MODEL_K_SLOTS=6`), and CLI `--set key=value` pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use stremn_core::memory::PolicyKind;
use stremn_core::model::{ModelConfig, ScoreSource, TaskKind};
use stremn_core::Dtype;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "STRM_";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskKind,
    pub policy: PolicyKind,
    pub seed: u64,
    pub precision: Dtype,

    // model
    pub k_slots: usize,
    pub blocks: usize,
    pub base_width: usize,
    pub downsample: usize,
    pub groups: usize,
    pub d_u: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tau: f64,
    pub scale_logits: bool,
    pub score_source: ScoreSource,
    pub shared_vos_encoders: bool,
    pub fusion: bool,

    // training
    pub lr: f64,
    pub steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr_hi: f64,
    pub finetune_lr_lo: f64,
    pub clip_len: usize,
    pub checkpoint_every: usize,
    pub train_sequences: usize,
    pub average_checkpoints: bool,
    pub average_min_ssim: f64,

    // data
    pub data_root: Option<PathBuf>,
    pub synth_canvas: usize,
    pub synth_frames: usize,
    pub synth_objects: usize,
    pub synth_switches: Vec<usize>,
    pub synth_occlusion_start: usize,
    pub synth_occlusion_len: usize,
    pub synth_noise: f64,

    // evaluation
    pub eval_sequences: usize,
    pub eval_observed: usize,
    pub log_memory: bool,

    // io
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(task: TaskKind) -> Self {
        let model = match task {
            TaskKind::Vos => ModelConfig::vos_default(),
            TaskKind::Pred => ModelConfig::pred_default(),
        };
        RunConfig {
            task,
            policy: PolicyKind::Learned,
            seed: 0,
            precision: Dtype::F32,
            k_slots: model.k_slots,
            blocks: model.blocks,
            base_width: model.base_width,
            downsample: model.downsample,
            groups: model.groups,
            d_u: 0,
            d_k: 0,
            d_v: 0,
            tau: 1.0,
            scale_logits: false,
            score_source: ScoreSource::Memory,
            shared_vos_encoders: false,
            fusion: false,
            lr: if task == TaskKind::Vos { 1e-4 } else { 1e-3 },
            steps: 200,
            finetune_steps: 0,
            finetune_lr_hi: 1e-5,
            finetune_lr_lo: 1e-7,
            clip_len: 10,
            checkpoint_every: 0,
            train_sequences: 16,
            average_checkpoints: false,
            average_min_ssim: 0.0,
            data_root: None,
            synth_canvas: 64,
            synth_frames: 40,
            synth_objects: 2,
            synth_switches: vec![20],
            synth_occlusion_start: 25,
            synth_occlusion_len: 5,
            synth_noise: 0.0,
            eval_sequences: 8,
            eval_observed: 4,
            log_memory: false,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }

    /// Apply one dotted-key assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_usize = || -> Result<usize> {
            v.parse().map_err(|_| Error::config_key(key, v, "expected a non-negative integer"))
        };
        let parse_f64 = || -> Result<f64> {
            v.parse().map_err(|_| Error::config_key(key, v, "expected a number"))
        };
        let parse_bool = || -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::config_key(key, v, "expected true/false")),
            }
        };
        match key {
            "task" => {
                self.task = match v {
                    "vos" => TaskKind::Vos,
                    "pred" => TaskKind::Pred,
                    _ => return Err(Error::config_key(key, v, "expected vos|pred")),
                }
            }
            "seed" => self.seed = v.parse().map_err(|_| Error::config_key(key, v, "expected u64"))?,
            "precision" => {
                self.precision = match v {
                    "32" | "f32" => Dtype::F32,
                    "64" | "f64" => Dtype::F64,
                    _ => return Err(Error::config_key(key, v, "expected 32|64")),
                }
            }
            "memory.policy" => self.policy = PolicyKind::from_name(v).map_err(Error::from)?,
            "memory.fusion" => self.fusion = parse_bool()?,
            "memory.score_source" => {
                self.score_source = match v {
                    "memory" => ScoreSource::Memory,
                    "query" => ScoreSource::Query,
                    _ => return Err(Error::config_key(key, v, "expected memory|query")),
                }
            }
            "model.k_slots" => self.k_slots = parse_usize()?,
            "model.blocks" => self.blocks = parse_usize()?,
            "model.base_width" => self.base_width = parse_usize()?,
            "model.downsample" => self.downsample = parse_usize()?,
            "model.groups" => self.groups = parse_usize()?,
            "model.update_key_channels" => self.d_u = parse_usize()?,
            "model.shared_vos_encoders" => self.shared_vos_encoders = parse_bool()?,
            "attention.d_k" => self.d_k = parse_usize()?,
            "attention.d_v" => self.d_v = parse_usize()?,
            "attention.scale_logits" => self.scale_logits = parse_bool()?,
            "gumbel.tau" => self.tau = parse_f64()?,
            "train.lr" => self.lr = parse_f64()?,
            "train.steps" => self.steps = parse_usize()?,
            "train.finetune_steps" => self.finetune_steps = parse_usize()?,
            "train.finetune_lr_hi" => self.finetune_lr_hi = parse_f64()?,
            "train.finetune_lr_lo" => self.finetune_lr_lo = parse_f64()?,
            "train.clip_len" => self.clip_len = parse_usize()?,
            "train.checkpoint_every" => self.checkpoint_every = parse_usize()?,
            "train.sequences" => self.train_sequences = parse_usize()?,
            "train.average_checkpoints" => self.average_checkpoints = parse_bool()?,
            "train.average_min_ssim" => self.average_min_ssim = parse_f64()?,
            "data.root" => self.data_root = Some(PathBuf::from(v)),
            "synth.canvas" => self.synth_canvas = parse_usize()?,
            "synth.frames" => self.synth_frames = parse_usize()?,
            "synth.objects" => self.synth_objects = parse_usize()?,
            "synth.switches" => {
                self.synth_switches = if v.is_empty() {
                    vec![]
                } else {
                    v.split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                Error::config_key(key, v, "expected comma-separated frame indices")
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?
                }
            }
            "synth.occlusion_start" => self.synth_occlusion_start = parse_usize()?,
            "synth.occlusion_len" => self.synth_occlusion_len = parse_usize()?,
            "synth.noise" => self.synth_noise = parse_f64()?,
            "eval.sequences" => self.eval_sequences = parse_usize()?,
            "eval.observed" => self.eval_observed = parse_usize()?,
            "eval.log_memory" => self.log_memory = parse_bool()?,
            "paths.out" => self.out_dir = PathBuf::from(v),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }

    /// Every dotted key `set` accepts, used for env-var scanning and docs.
    pub fn known_keys() -> &'static [&'static str] {
        &[
            "task",
            "seed",
            "precision",
            "memory.policy",
            "memory.fusion",
            "memory.score_source",
            "model.k_slots",
            "model.blocks",
            "model.base_width",
            "model.downsample",
            "model.groups",
            "model.update_key_channels",
            "model.shared_vos_encoders",
            "attention.d_k",
            "attention.d_v",
            "attention.scale_logits",
            "gumbel.tau",
            "train.lr",
            "train.steps",
            "train.finetune_steps",
            "train.finetune_lr_hi",
            "train.finetune_lr_lo",
            "train.clip_len",
            "train.checkpoint_every",
            "train.sequences",
            "train.average_checkpoints",
            "train.average_min_ssim",
            "data.root",
            "synth.canvas",
            "synth.frames",
            "synth.objects",
            "synth.switches",
            "synth.occlusion_start",
            "synth.occlusion_len",
            "synth.noise",
            "eval.sequences",
            "eval.observed",
            "eval.log_memory",
            "paths.out",
            "paths.checkpoint",
        ]
    }

    pub fn env_var_for(key: &str) -> String {
        format!("{}{}", ENV_PREFIX, key.replace('.', "_").to_ascii_uppercase())
    }

    /// Parse a config file (`key=value` lines, `#` comments).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got '{}'",
                    path.display(),
                    lineno + 1,
                    line
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        for key in Self::known_keys() {
            if let Ok(v) = std::env::var(Self::env_var_for(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for pair in sets {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::Config(format!("--set expects key=value, got '{}'", pair)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Build: defaults(task in file/env/sets if present) then layered sources.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        // peek at the task so defaults fit before the other keys land
        let mut task = TaskKind::Vos;
        let mut probe = |key: &str, value: &str| {
            if key.trim() == "task" && value.trim() == "pred" {
                task = TaskKind::Pred;
            }
        };
        if let Some(path) = file {
            if let Ok(text) = std::fs::read_to_string(path) {
                for line in text.lines() {
                    if let Some((k, v)) = line.split_once('=') {
                        probe(k, v);
                    }
                }
            }
        }
        if let Ok(v) = std::env::var(Self::env_var_for("task")) {
            probe("task", &v);
        }
        for pair in sets {
            if let Some((k, v)) = pair.split_once('=') {
                probe(k, v);
            }
        }

        let mut cfg = Self::defaults(task);
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env()?;
        cfg.apply_sets(sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy == PolicyKind::Learned && self.k_slots < 3 {
            return Err(Error::Config(format!(
                "learned policy needs model.k_slots >= 3, got {}",
                self.k_slots
            )));
        }
        if self.k_slots < 1 {
            return Err(Error::Config("model.k_slots must be >= 1".into()));
        }
        if self.clip_len < 2 {
            return Err(Error::Config(format!(
                "train.clip_len must be >= 2, got {}",
                self.clip_len
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("gumbel.tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            k_slots: self.k_slots,
            blocks: self.blocks,
            base_width: self.base_width,
            downsample: self.downsample,
            groups: self.groups,
            d_u: self.d_u,
            d_k: self.d_k,
            d_v: self.d_v,
            tau: self.tau,
            scale_logits: self.scale_logits,
            score_source: self.score_source,
            shared_vos_encoders: self.shared_vos_encoders,
            fusion: self.fusion,
        }
    }

    pub fn synth_config(&self) -> stremn_tasks::SyntheticConfig {
        stremn_tasks::SyntheticConfig {
            canvas: self.synth_canvas,
            object_count: self.synth_objects,
            frames: self.synth_frames,
            appearance_switches: self.synth_switches.clone(),
            occlusions: if self.synth_occlusion_len > 0 {
                vec![(self.synth_occlusion_start, self.synth_occlusion_len)]
            } else {
                vec![]
            },
            noise: self.synth_noise,
            speed: 1.6,
        }
    }

    /// Canonical serialization (sorted dotted keys), the basis of the
    /// provenance hash in reports.
    pub fn canonical(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("task", self.task.name().to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("precision", self.precision.name().to_string());
        kv.insert("memory.policy", self.policy.name().to_string());
        kv.insert("memory.fusion", self.fusion.to_string());
        kv.insert(
            "memory.score_source",
            match self.score_source {
                ScoreSource::Memory => "memory".into(),
                ScoreSource::Query => "query".into(),
            },
        );
        kv.insert("model.k_slots", self.k_slots.to_string());
        kv.insert("model.blocks", self.blocks.to_string());
        kv.insert("model.base_width", self.base_width.to_string());
        kv.insert("model.downsample", self.downsample.to_string());
        kv.insert("model.groups", self.groups.to_string());
        kv.insert("model.update_key_channels", self.d_u.to_string());
        kv.insert("model.shared_vos_encoders", self.shared_vos_encoders.to_string());
        kv.insert("attention.d_k", self.d_k.to_string());
        kv.insert("attention.d_v", self.d_v.to_string());
        kv.insert("attention.scale_logits", self.scale_logits.to_string());
        kv.insert("gumbel.tau", format!("{}", self.tau));
        kv.insert("train.lr", format!("{}", self.lr));
        kv.insert("train.steps", self.steps.to_string());
        kv.insert("train.finetune_steps", self.finetune_steps.to_string());
        kv.insert("train.finetune_lr_hi", format!("{}", self.finetune_lr_hi));
        kv.insert("train.finetune_lr_lo", format!("{}", self.finetune_lr_lo));
        kv.insert("train.clip_len", self.clip_len.to_string());
        kv.insert("train.checkpoint_every", self.checkpoint_every.to_string());
        kv.insert("train.sequences", self.train_sequences.to_string());
        kv.insert("train.average_checkpoints", self.average_checkpoints.to_string());
        kv.insert("train.average_min_ssim", format!("{}", self.average_min_ssim));
        kv.insert(
            "data.root",
            self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.insert("synth.canvas", self.synth_canvas.to_string());
        kv.insert("synth.frames", self.synth_frames.to_string());
        kv.insert("synth.objects", self.synth_objects.to_string());
        kv.insert(
            "synth.switches",
            self.synth_switches.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert("synth.occlusion_start", self.synth_occlusion_start.to_string());
        kv.insert("synth.occlusion_len", self.synth_occlusion_len.to_string());
        kv.insert("synth.noise", format!("{}", self.synth_noise));
        kv.insert("eval.sequences", self.eval_sequences.to_string());
        kv.insert("eval.observed", self.eval_observed.to_string());
        kv.insert("eval.log_memory", self.log_memory.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{}={}", k, v);
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            let _ = write!(out, "{:02x}", b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    // process environment is shared across test threads
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    #[test]
    fn file_env_set_precedence() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nmodel.k_slots=4\ngumbel.tau=0.5\n").unwrap();

        let sets = vec!["gumbel.tau=2.0".to_string()];
        let cfg = RunConfig::load(Some(&path), &sets).unwrap();
        assert_eq!(cfg.k_slots, 4);
        assert_eq!(cfg.tau, 2.0, "--set overrides the file");
    }

    #[test]
    fn env_override_layer() {
        let _guard = ENV_LOCK.lock().unwrap();
        let mut cfg = RunConfig::defaults(TaskKind::Vos);
        std::env::set_var("STRM_MODEL_K_SLOTS", "7");
        cfg.apply_env().unwrap();
        std::env::remove_var("STRM_MODEL_K_SLOTS");
        assert_eq!(cfg.k_slots, 7);
        assert_eq!(RunConfig::env_var_for("memory.policy"), "STRM_MEMORY_POLICY");
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        let mut cfg = RunConfig::defaults(TaskKind::Vos);
        assert!(cfg.set("memory.policyy", "learned").is_err());
        assert!(cfg.set("model.k_slots", "many").is_err());
        assert!(cfg.set("memory.policy", "lru").is_err());
    }

    #[test]
    fn learned_policy_with_k2_rejected_before_any_step() {
        let mut cfg = RunConfig::defaults(TaskKind::Vos);
        cfg.set("model.k_slots", "2").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.set("memory.policy", "oldest").unwrap();
        assert!(cfg.validate().is_ok(), "rule policies may run with small K");
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = RunConfig::defaults(TaskKind::Vos);
        let mut b = RunConfig::defaults(TaskKind::Vos);
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "9").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn pred_task_defaults_differ() {
        let _guard = ENV_LOCK.lock().unwrap();
        let cfg = RunConfig::load(None, &["task=pred".to_string()]).unwrap();
        assert_eq!(cfg.k_slots, 5);
        assert_eq!(cfg.blocks, 6);
    }
}
