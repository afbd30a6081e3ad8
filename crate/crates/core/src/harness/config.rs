//! Experiment configuration and its flat `key = value` text form.
//!
//! Files hold `[section]` headers followed by `key = value` lines; `#` and
//! `;` start comments. Keys before the first header belong to `[run]`.
//! Every key can also be addressed as `section.key` (the form used by
//! `--set` and by the config echo in a run report).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::channel::ChannelConfig;
use crate::conformal::CPConfig;
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::nn::{ModelConfig, OptimizerKind};
use crate::split::CutPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Monolithic model trained from scratch on the test task.
    Dnn,
    /// Split model trained from scratch on the test task.
    Sl,
    /// Meta-trained split model adapted to the test task.
    Msl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dnn => "dnn",
            Mode::Sl => "sl",
            Mode::Msl => "msl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn" => Ok(Mode::Dnn),
            "sl" => Ok(Mode::Sl),
            "msl" => Ok(Mode::Msl),
            _ => Err(Error::config(format!("unknown mode {s:?} (dnn, sl, msl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth,
    Omniglot(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synth => f.write_str("synth"),
            DataSource::Omniglot(p) => write!(f, "omniglot:{}", p.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" {
            Ok(DataSource::Synth)
        } else if let Some(path) = s.strip_prefix("omniglot:") {
            if path.is_empty() {
                return Err(Error::config("omniglot data source needs a path"));
            }
            Ok(DataSource::Omniglot(PathBuf::from(path)))
        } else {
            Err(Error::config(format!("unknown data source {s:?} (synth or omniglot:<path>)")))
        }
    }
}

/// Synthetic glyph knobs; images per class come from `meta.images_per_class`
/// and the generator seed from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub strokes_min: usize,
    pub strokes_max: usize,
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 100,
            strokes_min: 3,
            strokes_max: 6,
            jitter: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub cut: CutPoint,
    pub meta: MetaConfig,
    pub channel: ChannelConfig,
    pub cp: CPConfig,
    pub data: DataSource,
    pub synth: SynthConfig,
    pub meta_test_fraction: f64,
    /// Meta-test episodes evaluated per run.
    pub eval_tasks: usize,
    /// Query examples per class at meta-test time.
    pub test_queries: usize,
    /// SGD rate at meta-test time.
    pub test_lr: f64,
    /// P1 weighting of the sampling penalty.
    pub zeta: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        Self {
            mode: Mode::Msl,
            cut: CutPoint::new(2).expect("nonzero cut"),
            test_lr: meta.inner_lr,
            test_queries: meta.queries,
            meta,
            channel: ChannelConfig::identity(),
            cp: CPConfig::default(),
            data: DataSource::Synth,
            synth: SynthConfig::default(),
            meta_test_fraction: 0.2,
            eval_tasks: 10,
            zeta: 0.0,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} expects true or false, got {value:?}"))),
    }
}

fn parse_snr(value: &str) -> Result<f64> {
    match value {
        "inf" | "+inf" | "infinity" | "none" => Ok(f64::INFINITY),
        _ => parse("channel.snr_db", value),
    }
}

fn fmt_snr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

impl ExperimentConfig {
    /// Named starting points: `full` (the full-scale hyperparameters) and
    /// `desk` (a laptop-sized protocol that meta-learns within minutes).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::config(format!("unknown preset {name:?} (full, desk)"))),
        }
    }

    /// 5-way, 5-shot, 10 tasks × 100 epochs at cut 2, 20 test steps.
    pub fn desk() -> Self {
        let meta = MetaConfig {
            tasks: 10,
            ways: 5,
            images_per_class: 20,
            shots: 5,
            queries: 5,
            inner_steps: 5,
            inner_lr: 0.01,
            outer_lr: 0.001,
            outer_optimizer: OptimizerKind::Adam,
            epochs: 100,
            test_steps: 20,
            first_order: true,
            seed: 0,
        };
        Self {
            test_lr: 0.01,
            test_queries: 15,
            meta,
            ..Self::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::default_cnn(self.meta.ways)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.channel.validate()?;
        self.cp.validate()?;
        self.cut.layer_index(&self.model())?;
        if self.meta.shots + self.test_queries > self.meta.images_per_class {
            return Err(Error::config(format!(
                "K + test queries = {} exceeds images per class M = {}",
                self.meta.shots + self.test_queries,
                self.meta.images_per_class
            )));
        }
        if self.test_queries == 0 {
            return Err(Error::config("meta-test needs at least one query example per class"));
        }
        if self.eval_tasks == 0 {
            return Err(Error::config("eval_tasks must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.meta_test_fraction) {
            return Err(Error::config(format!(
                "meta_test_fraction must lie in [0, 1), got {}",
                self.meta_test_fraction
            )));
        }
        if !(self.test_lr >= 0.0 && self.test_lr.is_finite()) {
            return Err(Error::config(format!("test_lr must be finite and non-negative, got {}", self.test_lr)));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::config(format!("zeta must be finite and non-negative, got {}", self.zeta)));
        }
        if self.synth.strokes_min < 2 || self.synth.strokes_min > self.synth.strokes_max {
            return Err(Error::config("synth strokes need 2 <= strokes_min <= strokes_max"));
        }
        Ok(())
    }

    /// Sets one key, given as `section.key` or as a bare `[run]` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let full = if key.contains('.') { key.to_string() } else { format!("run.{key}") };
        let m = &mut self.meta;
        match full.as_str() {
            "run.mode" => self.mode = value.parse()?,
            "run.cut" => self.cut = CutPoint::new(parse(&full, value)?)?,
            "run.data" => self.data = value.parse()?,
            "run.seed" => self.seed = parse(&full, value)?,
            "run.zeta" => self.zeta = parse(&full, value)?,
            "run.eval_tasks" => self.eval_tasks = parse(&full, value)?,
            "run.test_queries" => self.test_queries = parse(&full, value)?,
            "run.test_lr" => self.test_lr = parse(&full, value)?,
            "run.meta_test_fraction" => self.meta_test_fraction = parse(&full, value)?,
            "meta.tasks" => m.tasks = parse(&full, value)?,
            "meta.ways" => m.ways = parse(&full, value)?,
            "meta.images_per_class" => m.images_per_class = parse(&full, value)?,
            "meta.shots" => m.shots = parse(&full, value)?,
            "meta.queries" => m.queries = parse(&full, value)?,
            "meta.inner_steps" => m.inner_steps = parse(&full, value)?,
            "meta.inner_lr" => m.inner_lr = parse(&full, value)?,
            "meta.outer_lr" => m.outer_lr = parse(&full, value)?,
            "meta.outer_optimizer" => {
                m.outer_optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::config(format!("unknown optimizer {value:?} (adam, sgd)"))),
                }
            }
            "meta.epochs" => m.epochs = parse(&full, value)?,
            "meta.test_steps" => m.test_steps = parse(&full, value)?,
            "meta.first_order" => m.first_order = parse_bool(&full, value)?,
            "channel.snr_db" => self.channel.snr_db = parse_snr(value)?,
            "channel.fading" => {
                self.channel.fading = match value {
                    "rayleigh" => true,
                    "none" => false,
                    _ => parse_bool(&full, value)?,
                }
            }
            "channel.power" => self.channel.power = parse(&full, value)?,
            "channel.apply_to_backward" => self.channel.apply_to_backward = parse_bool(&full, value)?,
            "channel.quant_levels" => {
                self.channel.quant_levels = if value == "none" { None } else { Some(parse(&full, value)?) }
            }
            "channel.channel_seed" | "channel.seed" => self.channel.seed = parse(&full, value)?,
            "conformal.alpha" => self.cp.alpha = parse(&full, value)?,
            "conformal.cal_fraction" => self.cp.cal_fraction = parse(&full, value)?,
            "synth.num_classes" => self.synth.num_classes = parse(&full, value)?,
            "synth.strokes_min" => self.synth.strokes_min = parse(&full, value)?,
            "synth.strokes_max" => self.synth.strokes_max = parse(&full, value)?,
            "synth.jitter" => self.synth.jitter = parse(&full, value)?,
            _ => return Err(Error::config(format!("unknown configuration key {full:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding these
    /// back through [`set`](Self::set) reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.meta;
        let c = &self.channel;
        let pairs: Vec<(&str, String)> = vec![
            ("run.mode", self.mode.to_string()),
            ("run.cut", self.cut.block().to_string()),
            ("run.data", self.data.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.zeta", self.zeta.to_string()),
            ("run.eval_tasks", self.eval_tasks.to_string()),
            ("run.test_queries", self.test_queries.to_string()),
            ("run.test_lr", self.test_lr.to_string()),
            ("run.meta_test_fraction", self.meta_test_fraction.to_string()),
            ("meta.tasks", m.tasks.to_string()),
            ("meta.ways", m.ways.to_string()),
            ("meta.images_per_class", m.images_per_class.to_string()),
            ("meta.shots", m.shots.to_string()),
            ("meta.queries", m.queries.to_string()),
            ("meta.inner_steps", m.inner_steps.to_string()),
            ("meta.inner_lr", m.inner_lr.to_string()),
            ("meta.outer_lr", m.outer_lr.to_string()),
            (
                "meta.outer_optimizer",
                match m.outer_optimizer {
                    OptimizerKind::Adam => "adam".into(),
                    OptimizerKind::Sgd => "sgd".into(),
                },
            ),
            ("meta.epochs", m.epochs.to_string()),
            ("meta.test_steps", m.test_steps.to_string()),
            ("meta.first_order", m.first_order.to_string()),
            ("channel.snr_db", fmt_snr(c.snr_db)),
            ("channel.fading", c.fading.to_string()),
            ("channel.power", c.power.to_string()),
            ("channel.apply_to_backward", c.apply_to_backward.to_string()),
            (
                "channel.quant_levels",
                c.quant_levels.map_or_else(|| "none".into(), |l| l.to_string()),
            ),
            ("channel.channel_seed", c.seed.to_string()),
            ("conformal.alpha", self.cp.alpha.to_string()),
            ("conformal.cal_fraction", self.cp.cal_fraction.to_string()),
            ("synth.num_classes", self.synth.num_classes.to_string()),
            ("synth.strokes_min", self.synth.strokes_min.to_string()),
            ("synth.strokes_max", self.synth.strokes_max.to_string()),
            ("synth.jitter", self.synth.jitter.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies `key = value` lines with `[section]` headers.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::from("run");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            let key = if k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Renders the configuration as a file that [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = String::new();
        for (k, v) in self.to_pairs() {
            let (section, key) = k.split_once('.').expect("qualified key");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section.to_string();
            }
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = ExperimentConfig::desk();
        cfg.channel.snr_db = 7.5;
        cfg.channel.quant_levels = Some(16);
        cfg.data = DataSource::Omniglot("/tmp/omni".into());
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn pairs_roundtrip() {
        let cfg = ExperimentConfig::desk();
        let mut back = ExperimentConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_comments_and_bare_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("mode = sl # baseline\n\n[meta]\nshots = 3\n; note\n[channel]\nsnr_db = inf\nfading = rayleigh\n")
            .unwrap();
        assert_eq!(cfg.mode, Mode::Sl);
        assert_eq!(cfg.meta.shots, 3);
        assert!(cfg.channel.fading);
        assert_eq!(cfg.channel.snr_db, f64::INFINITY);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("[meta]\nshotz = 3").is_err());
        assert!(cfg.apply_override("meta.shots=three").is_err());
        assert!(cfg.apply_override("run.cut=0").is_err());
        assert!(cfg.apply_override("nonsense").is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("[meta]\nshots = 3").unwrap();
        cfg.apply_override("meta.shots=1").unwrap();
        assert_eq!(cfg.meta.shots, 1);
    }

    #[test]
    fn validation_catches_sampling_budget() {
        let mut cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        cfg.meta.shots = 10;
        assert!(cfg.validate().is_err());
        cfg.meta.shots = 25;
        assert!(matches!(cfg.validate(), Err(Error::Constraint(_))));
    }
}
