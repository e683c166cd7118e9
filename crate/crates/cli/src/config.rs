use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mslam_core::corpus::{SynthLanguage, SynthSpec};
use mslam_core::evalkit::{ClassifierConfig, Grid, Seq2SeqConfig};
use mslam_core::model::ModelConfig;
use mslam_core::probe::ProbeConfig;
use mslam_core::trainer::{TrainConfig, Variant};
use sha2::{Digest, Sha256};

/// Synthetic corpus settings; `frame_dim` follows the model.
#[derive(Clone, Debug)]
pub struct DataConfig {
    pub spec: SynthSpec,
    pub sentences: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ClassifyConfig {
    pub base: ClassifierConfig,
    pub grid: Grid,
    pub langs: Vec<String>,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug)]
pub struct TranslateConfig {
    pub s2s: Seq2SeqConfig,
    pub src: String,
    /// `None` trains the copy task.
    pub tgt: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub joint_mt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Translate,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub checkpoint: Option<PathBuf>,
    pub probe: ProbeConfig,
    pub probe_samples: usize,
    pub classify: ClassifyConfig,
    pub translate: TranslateConfig,
    pub task: Task,
    pub gradcheck_coords: usize,
    /// SHA-256 of the config file bytes.
    pub hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let spec = SynthSpec {
            frame_dim: model.frame_dim,
            ..SynthSpec::default()
        };
        Self {
            train: TrainConfig::for_preset(&model.preset),
            model,
            data: DataConfig {
                spec,
                sentences: 200,
                seed: 1,
            },
            checkpoint: None,
            probe: ProbeConfig::default(),
            probe_samples: 3,
            classify: ClassifyConfig {
                base: ClassifierConfig {
                    n_classes: 8,
                    epochs: 100,
                    lr: 1e-2,
                    train_encoder: false,
                    ..ClassifierConfig::default()
                },
                grid: Grid {
                    batch_sizes: vec![16],
                    lrs: vec![1e-2],
                    projections: vec![false, true],
                },
                langs: vec!["aa".into(), "bb".into()],
                train_per_class: 20,
                dev_per_class: 5,
                test_per_class: 25,
            },
            translate: TranslateConfig {
                s2s: Seq2SeqConfig::default(),
                src: "aa".into(),
                tgt: None,
                n_train: 1000,
                n_test: 100,
                joint_mt: false,
            },
            task: Task::Classify,
            gradcheck_coords: 50,
            hash: String::new(),
        }
    }
}

fn list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
    value.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// `tag:flags` entries where flags draw from `s` (speech), `t` (text) and
/// `p` (paired), e.g. `aa:stp,cc:st`.
fn languages(value: &str) -> Option<Vec<SynthLanguage>> {
    value
        .split(',')
        .map(|entry| {
            let (tag, flags) = entry.trim().split_once(':')?;
            if tag.is_empty() || flags.chars().any(|c| !"stp".contains(c)) {
                return None;
            }
            Some(SynthLanguage::new(tag, flags.contains('s'), flags.contains('t'), flags.contains('p')))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        // a preset replaces the whole model block, so it goes first
        if let Some((n, _, v)) = entries.iter().rev().find(|e| e.1 == "model.preset") {
            cfg.model = ModelConfig::preset(v).with_context(|| format!("line {n}"))?;
            cfg.train = TrainConfig::for_preset(v);
            cfg.data.spec.frame_dim = cfg.model.frame_dim;
        }
        for (n, k, v) in &entries {
            if k == "model.preset" {
                continue;
            }
            cfg.set(k, v).with_context(|| format!("line {n}"))?;
        }
        cfg.data.spec.frame_dim = cfg.model.frame_dim;
        cfg.hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || anyhow!("bad value {value:?} for {key}");
        let z = || value.parse::<usize>().map_err(|_| bad());
        let u = || value.parse::<u64>().map_err(|_| bad());
        let f = || value.parse::<f64>().map_err(|_| bad());
        let b = || value.parse::<bool>().map_err(|_| bad());
        let (ns, rest) = key.split_once('.').ok_or_else(|| anyhow!("key {key} lacks a namespace"))?;
        match ns {
            "model" => self.model.set(rest, value)?,
            "train" | "loss" | "mask" => self.train.set(key, value)?,
            "data" => match rest {
                "sentences" => self.data.sentences = z()?,
                "seed" => self.data.seed = u()?,
                "noise_std" => self.data.spec.noise_std = f()?,
                "chars_per_language" => self.data.spec.chars_per_language = z()?,
                "frames_per_char" => self.data.spec.frames_per_char = z()?,
                "min_len" => self.data.spec.min_len = z()?,
                "max_len" => self.data.spec.max_len = z()?,
                "languages" => self.data.spec.languages = languages(value).ok_or_else(bad)?,
                _ => bail!("unknown key {key}"),
            },
            "encoder" => match rest {
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
                _ => bail!("unknown key {key}"),
            },
            "probe" => match rest {
                "steps" => self.probe.steps = z()?,
                "lr" => self.probe.lr = f()?,
                "batch" => self.probe.batch = z()?,
                "samples" => self.probe_samples = z()?,
                _ => bail!("unknown key {key}"),
            },
            "classify" => {
                let c = &mut self.classify;
                match rest {
                    "classes" => c.base.n_classes = z()?,
                    "epochs" => c.base.epochs = z()?,
                    "train_encoder" => c.base.train_encoder = b()?,
                    "batch_sizes" => c.grid.batch_sizes = list(value).ok_or_else(bad)?,
                    "lrs" => c.grid.lrs = list(value).ok_or_else(bad)?,
                    "projections" => c.grid.projections = list(value).ok_or_else(bad)?,
                    "langs" => c.langs = list(value).ok_or_else(bad)?,
                    "train_per_class" => c.train_per_class = z()?,
                    "dev_per_class" => c.dev_per_class = z()?,
                    "test_per_class" => c.test_per_class = z()?,
                    _ => bail!("unknown key {key}"),
                }
            }
            "translate" => {
                let t = &mut self.translate;
                match rest {
                    "src" => t.src = value.to_string(),
                    "tgt" => t.tgt = (value != "none").then(|| value.to_string()),
                    "n_train" => t.n_train = z()?,
                    "n_test" => t.n_test = z()?,
                    "joint_mt" => t.joint_mt = b()?,
                    "layers" => t.s2s.layers = z()?,
                    "dim" => t.s2s.dim = z()?,
                    "heads" => t.s2s.heads = z()?,
                    "ff_dim" => t.s2s.ff_dim = z()?,
                    "max_len" => t.s2s.max_len = z()?,
                    "dropout_st" => t.s2s.dropout_st = f()?,
                    "dropout_joint" => t.s2s.dropout_joint = f()?,
                    "mt_weight" => t.s2s.mt_weight = f()?,
                    "steps" => t.s2s.steps = z()?,
                    "batch" => t.s2s.batch = z()?,
                    "lr" => t.s2s.lr = f()?,
                    "warmup" => t.s2s.warmup = u()?,
                    "train_encoder" => t.s2s.train_encoder = b()?,
                    _ => bail!("unknown key {key}"),
                }
            }
            "finetune" => match (rest, value) {
                ("task", "classify") => self.task = Task::Classify,
                ("task", "translate") => self.task = Task::Translate,
                ("task", _) => return Err(bad()),
                _ => bail!("unknown key {key}"),
            },
            "gradcheck" => match rest {
                "coords" => self.gradcheck_coords = z()?,
                _ => bail!("unknown key {key}"),
            },
            _ => bail!("unknown namespace in {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.spec.validate()?;
        if self.data.sentences == 0 {
            bail!("data.sentences must be positive");
        }
        self.translate.s2s.validate()?;
        Ok(())
    }

    /// Applies the command-line overrides.
    pub fn override_with(&mut self, seed: Option<u64>, variant: Option<Variant>) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(v) = variant {
            self.train.variant = v;
        }
        let s = self.train.seed;
        self.classify.base.seed = s;
        self.probe.seed = s;
        self.translate.s2s.seed = s;
    }
}
