//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Mode, ViTConfig};
use crate::quantize::QuantSchedule;

use super::augment::AugmentPolicy;
use super::losses::{DistillWeights, MsParams};

/// How the quantization blend evolves during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Sigmoid ramp of `λ(t)`.
    Progressive,
    /// `λ = 1` from the first step.
    Abrupt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ViTConfig,

    pub teacher_steps: usize,
    pub teacher_lr: f64,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub distill: DistillWeights,
    pub schedule: ScheduleKind,
    pub sched_start: f64,
    pub sched_end: f64,
    /// Fraction of the stage at which `λ` reaches `sched_end`.
    pub sched_at: f64,

    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub warmup_steps: usize,
    pub batch_places: usize,
    pub batch_per_place: usize,
    pub ms: MsParams,
    pub unfreeze_last_block: bool,

    pub augment: AugmentPolicy,
    /// Evaluate recall every this many steps (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ViTConfig::default(),
            teacher_steps: 60,
            teacher_lr: 1e-3,
            pretrain_steps: 60,
            pretrain_lr: 5e-4,
            pretrain_batch: 8,
            distill: DistillWeights::default(),
            schedule: ScheduleKind::Progressive,
            sched_start: 0.01,
            sched_end: 0.99,
            sched_at: 0.6,
            finetune_steps: 120,
            finetune_lr: 1e-3,
            warmup_steps: 10,
            batch_places: 8,
            batch_per_place: 3,
            ms: MsParams::default(),
            unfreeze_last_block: true,
            augment: AugmentPolicy::default(),
            eval_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("config {key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Schedule for a stage of `steps` steps.
    pub fn schedule_for(&self, steps: usize) -> Result<QuantSchedule> {
        QuantSchedule::spanning(self.sched_start, self.sched_end, self.sched_at * steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.mode != Mode::Float {
            return Err(Error::InvalidArgument("training starts from a float model".into()));
        }
        if self.pretrain_batch == 0 || self.batch_places < 2 || self.batch_per_place < 2 {
            return Err(Error::InvalidArgument(
                "batches need >= 1 image, >= 2 places and >= 2 images per place".into(),
            ));
        }
        if !(0.0 < self.sched_start && self.sched_start < 0.5 && 0.5 < self.sched_end && self.sched_end < 1.0) {
            return Err(Error::InvalidArgument(
                "schedule needs 0 < sched_start < 0.5 < sched_end < 1".into(),
            ));
        }
        if !(self.sched_at > 0.0 && self.sched_at <= 1.0) {
            return Err(Error::InvalidArgument("sched_at must be in (0, 1]".into()));
        }
        let aug = [
            self.augment.brightness,
            self.augment.blur,
            self.augment.crop,
            self.augment.color,
            self.augment.erase,
        ];
        if aug.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("augment probabilities must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "layers" => m.layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "ffn" => m.ffn = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "image" => m.image = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "quantize_patch_embed" => m.quantize_patch_embed = parse(key, v)?,
            "teacher_steps" => self.teacher_steps = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "lambda_cls" => self.distill.cls = parse(key, v)?,
            "lambda_tok" => self.distill.tok = parse(key, v)?,
            "lambda_attn" => self.distill.attn = parse(key, v)?,
            "attn_layers" => self.distill.attn_layers = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "progressive" => ScheduleKind::Progressive,
                    "abrupt" => ScheduleKind::Abrupt,
                    _ => return Err(Error::InvalidArgument(format!("schedule {v:?}"))),
                }
            }
            "sched_start" => self.sched_start = parse(key, v)?,
            "sched_end" => self.sched_end = parse(key, v)?,
            "sched_at" => self.sched_at = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "batch_places" => self.batch_places = parse(key, v)?,
            "batch_per_place" => self.batch_per_place = parse(key, v)?,
            "ms_alpha" => self.ms.alpha = parse(key, v)?,
            "ms_beta" => self.ms.beta = parse(key, v)?,
            "ms_base" => self.ms.base = parse(key, v)?,
            "ms_margin" => {
                self.ms.margin = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "unfreeze_last_block" => self.unfreeze_last_block = parse(key, v)?,
            "aug_brightness" => self.augment.brightness = parse(key, v)?,
            "aug_blur" => self.augment.blur = parse(key, v)?,
            "aug_crop" => self.augment.crop = parse(key, v)?,
            "aug_color" => self.augment.color = parse(key, v)?,
            "aug_erase" => self.augment.erase = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let margin = match self.ms.margin {
            Some(e) => e.to_string(),
            None => "none".to_string(),
        };
        let schedule = match self.schedule {
            ScheduleKind::Progressive => "progressive",
            ScheduleKind::Abrupt => "abrupt",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("hidden", m.hidden.to_string()),
            ("ffn", m.ffn.to_string()),
            ("patch", m.patch.to_string()),
            ("image", m.image.to_string()),
            ("channels", m.channels.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("quantize_patch_embed", m.quantize_patch_embed.to_string()),
            ("teacher_steps", self.teacher_steps.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("lambda_cls", self.distill.cls.to_string()),
            ("lambda_tok", self.distill.tok.to_string()),
            ("lambda_attn", self.distill.attn.to_string()),
            ("attn_layers", self.distill.attn_layers.to_string()),
            ("schedule", schedule.to_string()),
            ("sched_start", self.sched_start.to_string()),
            ("sched_end", self.sched_end.to_string()),
            ("sched_at", self.sched_at.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("batch_places", self.batch_places.to_string()),
            ("batch_per_place", self.batch_per_place.to_string()),
            ("ms_alpha", self.ms.alpha.to_string()),
            ("ms_beta", self.ms.beta.to_string()),
            ("ms_base", self.ms.base.to_string()),
            ("ms_margin", margin),
            ("unfreeze_last_block", self.unfreeze_last_block.to_string()),
            ("aug_brightness", self.augment.brightness.to_string()),
            ("aug_blur", self.augment.blur.to_string()),
            ("aug_crop", self.augment.crop.to_string()),
            ("aug_color", self.augment.color.to_string()),
            ("aug_erase", self.augment.erase.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.seed = 9;
        c.schedule = ScheduleKind::Abrupt;
        c.ms.margin = None;
        c.model.layers = 2;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::from_text("# toy\nseed = 3  # trailing\n\nheads=2\n").unwrap();
        assert_eq!((c.seed, c.model.heads), (3, 2));
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("seed").is_err());
        assert!(TrainConfig::from_text("seed = x").is_err());
        assert!(TrainConfig::from_text("heads = 3").is_err());
        assert!(TrainConfig::from_text("aug_blur = 2").is_err());
    }
}
