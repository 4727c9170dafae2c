//! Speech encoder: input projection, learnable `[CLS]` row, sinusoidal
//! positions, Transformer stack and a linear reconstruction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::masking::MaskPlan;
use crate::nn::{self, EncoderConfig, Params};
use crate::numerics::{ParamStore, Tape, Tensor2D, Var};

pub const PREFIX: &str = "speech.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub input_channels: usize,
    /// Longest accepted sequence including the `[CLS]` row.
    pub max_len: usize,
    /// Add sinusoidal positions. Disabling is only useful for tests.
    #[serde(default = "yes")]
    pub positional: bool,
}

fn yes() -> bool {
    true
}

impl SpeechEncoderConfig {
    /// The full-size configuration: 3 layers, 768 hidden, 12 heads.
    pub fn full_size() -> Self {
        Self {
            layers: 3,
            hidden: 768,
            heads: 12,
            ff: 3072,
            input_channels: 80,
            max_len: 2048,
            positional: true,
        }
    }

    /// 2 layers, hidden 16: the gradient-check configuration.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff: 32,
            input_channels,
            max_len: 64,
            positional: true,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
        }
    }
}

/// Values produced by one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoderOutput {
    /// `(n+1) × hidden`; row 0 is the `[CLS]` output.
    pub embeddings: Tensor2D,
    /// `n × d`.
    pub reconstructions: Tensor2D,
}

/// Tape handles for one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct SpeechForward {
    pub embeddings: Var,
    pub reconstructions: Var,
}

impl SpeechForward {
    pub fn cls(&self, tape: &mut Tape) -> Result<Var> {
        tape.slice_rows(self.embeddings, 0, 1)
    }

    /// Frame rows `1..=n`, without `[CLS]`.
    pub fn frames(&self, tape: &mut Tape) -> Result<Var> {
        let n = tape.shape(self.embeddings).0 - 1;
        tape.slice_rows(self.embeddings, 1, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoder {
    pub cfg: SpeechEncoderConfig,
}

impl SpeechEncoder {
    pub fn new(cfg: SpeechEncoderConfig) -> Result<Self> {
        cfg.encoder().validate()?;
        if cfg.input_channels == 0 || cfg.max_len < 2 {
            return Err(Error::Config("speech encoder needs channels and max_len >= 2".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let h = self.cfg.hidden;
        nn::init_linear(store, "speech.in_proj", self.cfg.input_channels, h, rng)?;
        store.insert_normal("speech.cls", 1, h, 0.02, rng)?;
        nn::init_encoder(store, "speech.enc", &self.cfg.encoder(), rng)?;
        nn::init_linear(store, "speech.recon", h, self.cfg.input_channels, rng)
    }

    /// Encoder pass without the reconstruction head: `(n+1) × hidden`.
    pub fn embed(&self, tape: &mut Tape, p: Params, feats: &Tensor2D) -> Result<Var> {
        let (n, d) = feats.shape();
        if d != self.cfg.input_channels {
            return Err(Error::shape(
                "speech_encoder",
                format!("{d} channels, expected {}", self.cfg.input_channels),
            ));
        }
        if n == 0 {
            return Err(Error::Input("empty utterance".into()));
        }
        if n + 1 > self.cfg.max_len {
            return Err(Error::Length {
                len: n + 1,
                max: self.cfg.max_len,
            });
        }
        let x = tape.constant(feats.clone());
        let proj = nn::linear(tape, p, "speech.in_proj", x)?;
        let cls = p.var(tape, "speech.cls")?;
        let mut seq = tape.concat_rows(&[cls, proj])?;
        if self.cfg.positional {
            let pe = tape.constant(nn::sinusoidal(n + 1, self.cfg.hidden));
            seq = tape.add(seq, pe)?;
        }
        nn::encoder(tape, p, "speech.enc", &self.cfg.encoder(), seq)
    }

    pub fn forward(&self, tape: &mut Tape, p: Params, feats: &Tensor2D) -> Result<SpeechForward> {
        let embeddings = self.embed(tape, p, feats)?;
        let n = feats.rows();
        let frames = tape.slice_rows(embeddings, 1, n)?;
        let reconstructions = nn::linear(tape, p, "speech.recon", frames)?;
        Ok(SpeechForward {
            embeddings,
            reconstructions,
        })
    }

    /// Inference pass.
    pub fn encode(&self, store: &ParamStore, feats: &FeatureMatrix) -> Result<SpeechEncoderOutput> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, Params::frozen(store), &feats.to_tensor())?;
        Ok(SpeechEncoderOutput {
            embeddings: tape.value(out.embeddings).clone(),
            reconstructions: tape.value(out.reconstructions).clone(),
        })
    }
}

/// Which positions the reconstruction loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Masked frames and masked channels only, averaged over those entries.
    #[default]
    MaskedOnly,
    /// Mean L1 over every entry.
    AllFrames,
}

#[derive(Debug, Clone, Copy)]
pub struct SpLoss {
    pub loss: Var,
    /// Set when `MaskedOnly` found nothing to compare; the loss is then 0.
    pub no_masked_positions: bool,
}

/// Masked L1 reconstruction loss on the tape.
pub fn loss_sp(
    tape: &mut Tape,
    reconstructions: Var,
    original: &Tensor2D,
    plan: &MaskPlan,
    scope: LossScope,
) -> Result<SpLoss> {
    if tape.shape(reconstructions) != original.shape() {
        return Err(Error::Contract(format!(
            "reconstructions {:?} vs original {:?}",
            tape.shape(reconstructions),
            original.shape()
        )));
    }
    if (plan.frames, plan.channels) != original.shape() {
        return Err(Error::Contract(format!(
            "plan {}x{} vs original {:?}",
            plan.frames,
            plan.channels,
            original.shape()
        )));
    }
    let target = tape.constant(original.clone());
    let diff = tape.sub(reconstructions, target)?;
    let abs = tape.abs(diff)?;
    match scope {
        LossScope::AllFrames => Ok(SpLoss {
            loss: tape.mean(abs)?,
            no_masked_positions: false,
        }),
        LossScope::MaskedOnly => {
            let positions = plan.loss_positions();
            let count = positions.sum();
            if count == 0.0 {
                return Ok(SpLoss {
                    loss: tape.constant(Tensor2D::scalar(0.0)),
                    no_masked_positions: true,
                });
            }
            let mask = tape.constant(positions);
            let masked = tape.mul(abs, mask)?;
            let total = tape.sum(masked)?;
            Ok(SpLoss {
                loss: tape.scale(total, 1.0 / count)?,
                no_masked_positions: false,
            })
        }
    }
}

/// Value of [`loss_sp`] for an already computed encoder output.
pub fn loss_sp_value(
    output: &SpeechEncoderOutput,
    original: &FeatureMatrix,
    plan: &MaskPlan,
    scope: LossScope,
) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let recon = tape.constant(output.reconstructions.clone());
    let l = loss_sp(&mut tape, recon, &original.to_tensor(), plan, scope)?;
    Ok((tape.value(l.loss).item(), l.no_masked_positions))
}
