//! Flat run configuration shared by every command of the tool.
//!
//! The file is TOML with one top-level key per setting; unknown keys are
//! rejected. Every key has a default, so an empty file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{FinetuneConfig, SpanLoss};
use crate::error::{Error, Result};
use crate::features::LogMelConfig;
use crate::numerics::Precision;
use crate::speech::LossScope;
use crate::synthdata::{SynthSpec, TaskKind};
use crate::text::TokenCorruption;
use crate::trainer::{JointWeights, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub variant: Variant,
    /// Share of the downstream training split used for fine-tuning.
    pub fraction: f64,

    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,

    pub p_time: f64,
    pub p_channel: f64,
    pub p_token: f64,
    pub token_corruption: TokenCorruption,

    pub synth_vocab_size: usize,
    pub synth_template_frames: usize,
    pub synth_channels: usize,
    pub synth_noise: f64,
    pub synth_min_words: usize,
    pub synth_max_words: usize,
    pub synth_pretrain_utterances: usize,
    pub synth_train_utterances: usize,
    pub synth_valid_utterances: usize,
    pub synth_test_utterances: usize,
    pub synth_num_classes: usize,
    pub synth_speakers: usize,
    pub synth_template_floor: f64,

    pub hidden: usize,
    pub speech_layers: usize,
    pub speech_heads: usize,
    pub speech_ff: usize,
    pub speech_max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub text_max_len: usize,

    pub speech_steps: usize,
    pub text_steps: usize,
    pub align_steps: usize,
    pub speech_batch: usize,
    pub text_batch: usize,
    pub align_batch: usize,
    pub pretrain_lr: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    pub paired_fraction: f64,
    pub loss_scope: LossScope,
    pub freeze_text: bool,
    pub seq_mean_per_dim: bool,
    pub uniform_idf_fallback: bool,
    pub joint: bool,
    pub joint_speech_weight: f64,
    pub joint_text_weight: f64,
    pub joint_align_weight: f64,

    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub head_hidden: usize,
    pub span_layers: usize,
    pub span_heads: usize,
    pub span_ff: usize,
    pub span_loss: SpanLoss,
    /// 0 derives the limit from the training spans.
    pub max_span: usize,

    pub ablate_variants: Vec<Variant>,
    pub ablate_fractions: Vec<f64>,
    /// Empty runs the grid at `seed` only.
    pub ablate_seeds: Vec<u64>,

    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let fine = FinetuneConfig::default();
        let synth = SynthSpec::default();
        let mel = LogMelConfig::default();
        Self {
            seed: 0,
            task: TaskKind::KeywordClass,
            variant: Variant::SeqMlm,
            fraction: 1.0,
            sample_rate: mel.sample_rate,
            window: mel.window,
            hop: mel.hop,
            n_mels: mel.n_mels,
            f_min: mel.f_min,
            f_max: mel.f_max,
            p_time: train.p_time,
            p_channel: train.p_channel,
            p_token: train.p_token,
            token_corruption: train.token_corruption,
            synth_vocab_size: synth.vocab_size,
            synth_template_frames: synth.template_frames,
            synth_channels: synth.channels,
            synth_noise: synth.noise,
            synth_min_words: synth.min_words,
            synth_max_words: synth.max_words,
            synth_pretrain_utterances: synth.pretrain_utterances,
            synth_train_utterances: synth.train_utterances,
            synth_valid_utterances: synth.valid_utterances,
            synth_test_utterances: synth.test_utterances,
            synth_num_classes: synth.num_classes,
            synth_speakers: synth.speakers,
            synth_template_floor: synth.template_floor,
            hidden: train.hidden,
            speech_layers: train.speech_layers,
            speech_heads: train.speech_heads,
            speech_ff: train.speech_ff,
            speech_max_len: train.speech_max_len,
            text_layers: train.text_layers,
            text_heads: train.text_heads,
            text_ff: train.text_ff,
            text_max_len: train.text_max_len,
            speech_steps: train.speech_steps,
            text_steps: train.text_steps,
            align_steps: train.align_steps,
            speech_batch: train.speech_batch,
            text_batch: train.text_batch,
            align_batch: train.align_batch,
            pretrain_lr: train.lr,
            clip_norm: train.clip_norm,
            precision: train.precision,
            paired_fraction: train.paired_fraction,
            loss_scope: train.loss_scope,
            freeze_text: train.freeze_text,
            seq_mean_per_dim: train.seq_mean_per_dim,
            uniform_idf_fallback: train.uniform_idf_fallback,
            joint: false,
            joint_speech_weight: 1.0,
            joint_text_weight: 1.0,
            joint_align_weight: 1.0,
            finetune_epochs: fine.epochs,
            finetune_batch: fine.batch,
            finetune_lr: fine.lr,
            head_hidden: fine.head_hidden,
            span_layers: fine.span_layers,
            span_heads: fine.span_heads,
            span_ff: fine.span_ff,
            span_loss: fine.span_loss,
            max_span: 0,
            ablate_variants: Variant::ALL.to_vec(),
            ablate_fractions: vec![1.0, 0.5, 0.1, 0.05, 0.01],
            ablate_seeds: Vec::new(),
            gradcheck_eps: 1e-5,
            gradcheck_tol: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn log_mel(&self) -> LogMelConfig {
        LogMelConfig {
            sample_rate: self.sample_rate,
            window: self.window,
            hop: self.hop,
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            vocab_size: self.synth_vocab_size,
            template_frames: self.synth_template_frames,
            channels: self.synth_channels,
            noise: self.synth_noise,
            min_words: self.synth_min_words,
            max_words: self.synth_max_words,
            pretrain_utterances: self.synth_pretrain_utterances,
            train_utterances: self.synth_train_utterances,
            valid_utterances: self.synth_valid_utterances,
            test_utterances: self.synth_test_utterances,
            num_classes: self.synth_num_classes,
            speakers: self.synth_speakers,
            task: self.task,
            seed: self.seed,
            template_floor: self.synth_template_floor,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            speech_steps: self.speech_steps,
            text_steps: self.text_steps,
            align_steps: self.align_steps,
            speech_batch: self.speech_batch,
            text_batch: self.text_batch,
            align_batch: self.align_batch,
            lr: self.pretrain_lr,
            clip_norm: self.clip_norm,
            precision: self.precision,
            paired_fraction: self.paired_fraction,
            loss_scope: self.loss_scope,
            p_time: self.p_time,
            p_channel: self.p_channel,
            p_token: self.p_token,
            token_corruption: self.token_corruption,
            freeze_text: self.freeze_text,
            seq_mean_per_dim: self.seq_mean_per_dim,
            uniform_idf_fallback: self.uniform_idf_fallback,
            joint_weights: self.joint.then_some(JointWeights {
                speech: self.joint_speech_weight,
                text: self.joint_text_weight,
                align: self.joint_align_weight,
            }),
            speech_layers: self.speech_layers,
            hidden: self.hidden,
            speech_heads: self.speech_heads,
            speech_ff: self.speech_ff,
            speech_max_len: self.speech_max_len,
            text_layers: self.text_layers,
            text_heads: self.text_heads,
            text_ff: self.text_ff,
            text_max_len: self.text_max_len,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            epochs: self.finetune_epochs,
            batch: self.finetune_batch,
            lr: self.finetune_lr,
            clip_norm: self.clip_norm,
            precision: self.precision,
            head_hidden: self.head_hidden,
            span_layers: self.span_layers,
            span_heads: self.span_heads,
            span_ff: self.span_ff,
            span_loss: self.span_loss,
            max_span: (self.max_span > 0).then_some(self.max_span),
        }
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.finetune().validate()?;
        self.synth_spec().validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Fraction(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.ablate_variants.is_empty() || self.ablate_fractions.is_empty() {
            return Err(Error::Config("ablation grid has an empty axis".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_reach_derived_configs() {
        let cfg = RunConfig::from_toml("seed = 7\nvariant = \"tok\"\nfinetune_lr = 0.001\nmax_span = 4").unwrap();
        assert_eq!(cfg.variant, Variant::Tok);
        assert_eq!(cfg.train().seed, 7);
        assert_eq!(cfg.finetune().lr, 0.001);
        assert_eq!(cfg.finetune().max_span, Some(4));
    }
}
