//! Run configuration: built-in defaults, then an optional `key=value` file, then `--set` flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use epimem::eval::RetrievalConfig;
use epimem::model::{parse_kv, ModelConfig, TrainConfig};
use epimem::synthetic::DatasetConfig;
use epimem::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Steps per decay period; 0 means one epoch.
    pub decay_period: u64,
    pub clip_norm: f64,
    /// 0 evaluates every validation episode.
    pub validation_limit: usize,
    pub folds: usize,
    pub memory_fraction: f64,
    pub top_n: usize,
    /// 0 keeps every component the class count supports.
    pub pca_components: usize,
    pub seed: u64,
    /// Model keys given explicitly by the file or flags.
    pub model_overrides: Vec<String>,
    /// Subcommand and path arguments, echoed alongside the settings.
    pub invocation: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let t = TrainConfig::default();
        let r = RetrievalConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr0,
            lr_decay: t.lr_decay,
            decay_period: 0,
            clip_norm: t.clip_norm,
            validation_limit: 0,
            folds: r.folds,
            memory_fraction: r.memory_fraction,
            top_n: r.top_n,
            pca_components: 0,
            seed: 0,
            model_overrides: Vec::new(),
            invocation: Vec::new(),
        }
    }
}

fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim().parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any) and then with `sets` (`key=value` strings).
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_kv(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_per_class" => self.train_per_class = num(key, value)?,
            "val_per_class" => self.val_per_class = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "decay_period" => self.decay_period = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "validation_limit" => self.validation_limit = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "memory_fraction" => self.memory_fraction = num(key, value)?,
            "top_n" => self.top_n = num(key, value)?,
            "pca_components" => self.pca_components = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ if ModelConfig::KEYS.contains(&key) => {
                self.model.set(key, value)?;
                if !self.model_overrides.iter().any(|k| k == key) {
                    self.model_overrides.push(key.to_string());
                }
            }
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.invocation {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str(&self.model.to_text());
        let _ = writeln!(s, "train_per_class={}", self.train_per_class);
        let _ = writeln!(s, "val_per_class={}", self.val_per_class);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_decay={}", self.lr_decay);
        let _ = writeln!(s, "decay_period={}", self.decay_period);
        let _ = writeln!(s, "clip_norm={}", self.clip_norm);
        let _ = writeln!(s, "validation_limit={}", self.validation_limit);
        let _ = writeln!(s, "folds={}", self.folds);
        let _ = writeln!(s, "memory_fraction={}", self.memory_fraction);
        let _ = writeln!(s, "top_n={}", self.top_n);
        let _ = writeln!(s, "pca_components={}", self.pca_components);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// `(key, value)` pairs in [`RunConfig::to_text`] order.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn dataset(&self) -> DatasetConfig {
        let mut d = DatasetConfig { train_per_class: self.train_per_class, val_per_class: self.val_per_class, ..Default::default() };
        d.render.frame_size = self.model.frame_size;
        d.render.channels = self.model.channels;
        d.render.seq_len = self.model.seq_len;
        d
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            lr_decay: self.lr_decay,
            decay_period: (self.decay_period > 0).then_some(self.decay_period),
            clip_norm: self.clip_norm,
            seed: self.seed,
            validation_limit: (self.validation_limit > 0).then_some(self.validation_limit),
            ..Default::default()
        }
    }

    pub fn retrieval(&self, use_pca: bool) -> RetrievalConfig {
        RetrievalConfig {
            folds: self.folds,
            memory_fraction: self.memory_fraction,
            top_n: self.top_n,
            seed: self.seed,
            use_pca,
            pca_components: if self.pca_components == 0 { usize::MAX } else { self.pca_components },
        }
    }

    /// Rejects a checkpoint whose model settings contradict explicitly configured ones.
    pub fn check_model(&self, loaded: &ModelConfig) -> Result<()> {
        let ours: BTreeMap<String, String> = parse_kv(&self.model.to_text())?;
        let theirs: BTreeMap<String, String> = parse_kv(&loaded.to_text())?;
        for key in &self.model_overrides {
            if ours.get(key) != theirs.get(key) {
                return Err(Error::Contract(format!(
                    "checkpoint has {key}={} but the configuration asks for {key}={}",
                    theirs.get(key).map(String::as_str).unwrap_or("?"),
                    ours.get(key).map(String::as_str).unwrap_or("?")
                )));
            }
        }
        Ok(())
    }
}
