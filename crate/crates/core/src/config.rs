//! Run configuration as flat `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so a file only needs the keys it changes; unknown keys are
//! rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Epochs at which the learning rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl ScheduleConfig {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base * self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    /// Gallery images sampled per identity and camera in each trial.
    pub gallery_per_cam: usize,
    pub max_rank: usize,
    /// Identities held out for testing when a single dataset is split.
    pub test_ids: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Parallel batch preparation and gallery extraction.
    pub parallel: bool,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// The desk-scale setup: small images, a narrow backbone and 20 epochs.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig {
                erase_p: 0.1,
                ..AugmentConfig::default()
            },
            optimizer: OptimizerConfig {
                lr: 8e-4,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            schedule: ScheduleConfig {
                milestones: vec![18],
                factor: 0.1,
            },
            epochs: 20,
            seed: 7,
            checkpoint_every: 5,
            parallel: false,
            eval: EvalConfig {
                trials: 10,
                gallery_per_cam: 1,
                max_rank: 20,
                test_ids: 16,
            },
            paths: Paths {
                dataset_dir: PathBuf::from("data"),
                checkpoint_dir: PathBuf::from("checkpoints"),
                report_path: PathBuf::from("report.txt"),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for {key} (true|false)"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair<T: FromStr>(key: &str, v: &str, sep: char) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(sep)
        .ok_or_else(|| Error::Config(format!("invalid value `{v}` for {key} (expected a{sep}b)")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The long schedule of the reference setup: 150 epochs with drops at
    /// 30, 90 and 120.
    pub fn reference_schedule() -> (ScheduleConfig, usize) {
        (
            ScheduleConfig {
                milestones: vec![30, 90, 120],
                factor: 0.1,
            },
            150,
        )
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        match key {
            "model.stage_channels" => m.stage_channels = parse_list(key, v)?,
            "model.stage_strides" => m.stage_strides = parse_list(key, v)?,
            "model.num_alb" => m.num_alb = parse(key, v)?,
            "model.attn_dim" => m.attn_dim = parse(key, v)?,
            "model.attn_heads" => m.attn_heads = parse(key, v)?,
            "model.token_grid" => m.token_grid = parse_pair(key, v, 'x')?,
            "model.fusion_alpha" => m.fusion_alpha = parse(key, v)?,
            "model.alb_mix_alpha" => m.alb_mix_alpha = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.qfe" => m.qfe = v.parse()?,
            "model.multiscale" => m.multiscale = parse_bool(key, v)?,
            "model.injection_order" => m.injection_order = v.parse()?,
            "model.final_stage" => m.final_stage = parse_bool(key, v)?,
            "model.mimb" => m.mimb = parse_bool(key, v)?,
            "loss.qc_alpha" => self.loss.qc_alpha = parse(key, v)?,
            "loss.margin_rho" => self.loss.margin_rho = parse(key, v)?,
            "loss.distance" => self.loss.distance = v.parse()?,
            "loss.id_loss_weight" => self.loss.id_loss_weight = parse(key, v)?,
            "loss.nm_anchors" => self.loss.nm_anchors = v.parse()?,
            "sampler.ids_per_batch" => self.sampler.ids_per_batch = parse(key, v)?,
            "sampler.v_per_id" => self.sampler.v_per_id = parse(key, v)?,
            "sampler.t_per_id" => self.sampler.t_per_id = parse(key, v)?,
            "augment.target_size" => {
                (self.augment.target_h, self.augment.target_w) = parse_pair(key, v, 'x')?;
            }
            "augment.flip_p" => self.augment.flip_p = parse(key, v)?,
            "augment.erase_p" => self.augment.erase_p = parse(key, v)?,
            "augment.erase_area" => self.augment.erase_area = parse_pair(key, v, ',')?,
            "augment.channel_exchange" => self.augment.channel_exchange = v.parse()?,
            "optimizer.lr" => self.optimizer.lr = parse(key, v)?,
            "optimizer.momentum" => self.optimizer.momentum = parse(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "schedule.milestones" => self.schedule.milestones = parse_list(key, v)?,
            "schedule.factor" => self.schedule.factor = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.parallel" => self.parallel = parse_bool(key, v)?,
            "eval.trials" => self.eval.trials = parse(key, v)?,
            "eval.gallery_per_cam" => self.eval.gallery_per_cam = parse(key, v)?,
            "eval.max_rank" => self.eval.max_rank = parse(key, v)?,
            "eval.test_ids" => self.eval.test_ids = parse(key, v)?,
            "paths.dataset_dir" => self.paths.dataset_dir = PathBuf::from(v),
            "paths.checkpoint_dir" => self.paths.checkpoint_dir = PathBuf::from(v),
            "paths.report_path" => self.paths.report_path = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (a, o, s) = (&self.augment, &self.optimizer, &self.schedule);
        vec![
            ("model.stage_channels", join(&m.stage_channels)),
            ("model.stage_strides", join(&m.stage_strides)),
            ("model.num_alb", m.num_alb.to_string()),
            ("model.attn_dim", m.attn_dim.to_string()),
            ("model.attn_heads", m.attn_heads.to_string()),
            ("model.token_grid", format!("{}x{}", m.token_grid.0, m.token_grid.1)),
            ("model.fusion_alpha", m.fusion_alpha.to_string()),
            ("model.alb_mix_alpha", m.alb_mix_alpha.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.qfe", m.qfe.to_string()),
            ("model.multiscale", m.multiscale.to_string()),
            ("model.injection_order", m.injection_order.to_string()),
            ("model.final_stage", m.final_stage.to_string()),
            ("model.mimb", m.mimb.to_string()),
            ("loss.qc_alpha", self.loss.qc_alpha.to_string()),
            ("loss.margin_rho", self.loss.margin_rho.to_string()),
            ("loss.distance", self.loss.distance.to_string()),
            ("loss.id_loss_weight", self.loss.id_loss_weight.to_string()),
            ("loss.nm_anchors", self.loss.nm_anchors.to_string()),
            ("sampler.ids_per_batch", self.sampler.ids_per_batch.to_string()),
            ("sampler.v_per_id", self.sampler.v_per_id.to_string()),
            ("sampler.t_per_id", self.sampler.t_per_id.to_string()),
            ("augment.target_size", format!("{}x{}", a.target_h, a.target_w)),
            ("augment.flip_p", a.flip_p.to_string()),
            ("augment.erase_p", a.erase_p.to_string()),
            ("augment.erase_area", format!("{},{}", a.erase_area.0, a.erase_area.1)),
            ("augment.channel_exchange", a.channel_exchange.to_string()),
            ("optimizer.lr", o.lr.to_string()),
            ("optimizer.momentum", o.momentum.to_string()),
            ("optimizer.weight_decay", o.weight_decay.to_string()),
            ("schedule.milestones", join(&s.milestones)),
            ("schedule.factor", s.factor.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.parallel", self.parallel.to_string()),
            ("eval.trials", self.eval.trials.to_string()),
            ("eval.gallery_per_cam", self.eval.gallery_per_cam.to_string()),
            ("eval.max_rank", self.eval.max_rank.to_string()),
            ("eval.test_ids", self.eval.test_ids.to_string()),
            ("paths.dataset_dir", self.paths.dataset_dir.display().to_string()),
            ("paths.checkpoint_dir", self.paths.checkpoint_dir.display().to_string()),
            ("paths.report_path", self.paths.report_path.display().to_string()),
        ]
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_config(e))))?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides such as those given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.augment.validate().map_err(|e| Error::Config(strip_config(e)))?;
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("optimizer.momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optimizer.weight_decay must be ≥ 0, got {}",
                o.weight_decay
            )));
        }
        if self.schedule.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "schedule.milestones must be strictly increasing, got {:?}",
                self.schedule.milestones
            )));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor < 1.0) {
            return Err(Error::Config(format!(
                "schedule.factor must lie in (0, 1), got {}",
                self.schedule.factor
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.eval.trials == 0 || self.eval.gallery_per_cam == 0 || self.eval.max_rank == 0 {
            return Err(Error::Config("eval.trials, eval.gallery_per_cam and eval.max_rank must be positive".into()));
        }
        Ok(())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(s) | Error::Param(s) => s,
        other => other.to_string(),
    }
}
