//! Staged pre-training.
//!
//! Stage 1 trains the speech encoder by masked reconstruction on all audio.
//! Stage 2 (the `-mlm` variants) adapts the text encoder by masked token
//! prediction on the paired transcripts. Stage 3 pulls the speech encoder
//! towards the text encoder on the paired subset, either through the
//! `[CLS]` rows or token by token.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{loss_seq, loss_tok};
use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::masking::{apply_masks, plan_masks};
use crate::nn::Params;
use crate::numerics::{clip_grad_norm, Adam, ParamStore, Precision, Tape, Tensor2D, Var};
use crate::speech::{loss_sp, LossScope, SpeechEncoder, SpeechEncoderConfig};
use crate::text::{
    build_vocab_and_idf, loss_text, plan_token_masks, IdfTable, TextEncoder, TextEncoderConfig, TokenCorruption,
    TokenSequence, Vocabulary,
};

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Scratch,
    Speech,
    Seq,
    SeqMlm,
    Tok,
    TokMlm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Scratch,
        Variant::Speech,
        Variant::Seq,
        Variant::SeqMlm,
        Variant::Tok,
        Variant::TokMlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scratch => "scratch",
            Variant::Speech => "speech",
            Variant::Seq => "seq",
            Variant::SeqMlm => "seq-mlm",
            Variant::Tok => "tok",
            Variant::TokMlm => "tok-mlm",
        }
    }

    pub fn stages(self) -> Vec<Stage> {
        match self {
            Variant::Scratch => vec![],
            Variant::Speech => vec![Stage::SpeechMlm],
            Variant::Seq => vec![Stage::SpeechMlm, Stage::AlignSeq],
            Variant::SeqMlm => vec![Stage::SpeechMlm, Stage::TextMlm, Stage::AlignSeq],
            Variant::Tok => vec![Stage::SpeechMlm, Stage::AlignTok],
            Variant::TokMlm => vec![Stage::SpeechMlm, Stage::TextMlm, Stage::AlignTok],
        }
    }

    fn runs_text_mlm(self) -> bool {
        matches!(self, Variant::SeqMlm | Variant::TokMlm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SpeechMlm,
    TextMlm,
    AlignSeq,
    AlignTok,
    /// Weighted sum of the later-stage losses, see [`JointWeights`].
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SpeechMlm => "speech_mlm",
            Stage::TextMlm => "text_mlm",
            Stage::AlignSeq => "align_seq",
            Stage::AlignTok => "align_tok",
            Stage::Joint => "joint",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::SpeechMlm => 1,
            Stage::TextMlm => 2,
            Stage::AlignSeq => 3,
            Stage::AlignTok => 4,
            Stage::Joint => 5,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::SpeechMlm, Stage::TextMlm, Stage::AlignSeq, Stage::AlignTok, Stage::Joint]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown stage `{s}`")))
    }
}

/// Replaces stages 2 and 3 by one stage minimizing
/// `speech·L_sp + text·L_text + align·L_align`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointWeights {
    pub speech: f64,
    pub text: f64,
    pub align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub speech_steps: usize,
    pub text_steps: usize,
    pub align_steps: usize,
    pub speech_batch: usize,
    pub text_batch: usize,
    pub align_batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    /// Share of the audio corpus whose transcripts are used.
    pub paired_fraction: f64,
    pub loss_scope: LossScope,
    pub p_time: f64,
    pub p_channel: f64,
    pub p_token: f64,
    pub token_corruption: TokenCorruption,
    pub freeze_text: bool,
    pub seq_mean_per_dim: bool,
    pub uniform_idf_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_weights: Option<JointWeights>,
    pub speech_layers: usize,
    pub hidden: usize,
    pub speech_heads: usize,
    pub speech_ff: usize,
    pub speech_max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub text_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            speech_steps: 2000,
            text_steps: 1000,
            align_steps: 1000,
            speech_batch: 16,
            text_batch: 16,
            align_batch: 16,
            lr: 1e-4,
            clip_norm: 5.0,
            precision: Precision::F32,
            paired_fraction: 1.0 / 36.0,
            loss_scope: LossScope::MaskedOnly,
            p_time: 0.15,
            p_channel: 0.15,
            p_token: 0.15,
            token_corruption: TokenCorruption::AlwaysMask,
            freeze_text: true,
            seq_mean_per_dim: false,
            uniform_idf_fallback: false,
            joint_weights: None,
            speech_layers: 3,
            hidden: 32,
            speech_heads: 4,
            speech_ff: 128,
            speech_max_len: 128,
            text_layers: 3,
            text_heads: 4,
            text_ff: 128,
            text_max_len: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.paired_fraction > 0.0 && self.paired_fraction <= 1.0) {
            return bad(format!("paired_fraction {} outside (0, 1]", self.paired_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        for (name, steps, batch) in [
            ("speech", self.speech_steps, self.speech_batch),
            ("text", self.text_steps, self.text_batch),
            ("align", self.align_steps, self.align_batch),
        ] {
            if steps > 0 && batch == 0 {
                return bad(format!("{name} stage has {steps} steps but batch size 0"));
            }
        }
        if let Some(w) = self.joint_weights {
            if [w.speech, w.text, w.align].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("joint weights must be finite and non-negative".into());
            }
        }
        self.speech_encoder(1).encoder().validate()?;
        Ok(())
    }

    pub fn speech_encoder(&self, input_channels: usize) -> SpeechEncoderConfig {
        SpeechEncoderConfig {
            layers: self.speech_layers,
            hidden: self.hidden,
            heads: self.speech_heads,
            ff: self.speech_ff,
            input_channels,
            max_len: self.speech_max_len,
            positional: true,
        }
    }

    pub fn text_encoder(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            layers: self.text_layers,
            hidden: self.hidden,
            heads: self.text_heads,
            ff: self.text_ff,
            vocab_size,
            max_len: self.text_max_len,
        }
    }

    fn steps(&self, stage: Stage) -> (usize, usize) {
        match stage {
            Stage::SpeechMlm => (self.speech_steps, self.speech_batch),
            Stage::TextMlm => (self.text_steps, self.text_batch),
            Stage::AlignSeq | Stage::AlignTok | Stage::Joint => (self.align_steps, self.align_batch),
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_log<W: Write>(w: &mut W, log: &[LossRecord]) -> Result<()> {
    writeln!(w, "stage,step,loss")?;
    for r in log {
        writeln!(w, "{},{},{}", r.stage, r.step, r.loss)?;
    }
    Ok(())
}

pub fn read_loss_log<R: BufRead>(r: R) -> Result<Vec<LossRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != "stage,step,loss" {
                return Err(Error::Input("loss log lacks its header".into()));
            }
            continue;
        }
        let bad = || Error::Input(format!("loss log line {}", i + 1));
        let mut parts = line.split(',');
        let (Some(stage), Some(step), Some(loss), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        out.push(LossRecord {
            stage: stage.parse()?,
            step: step.parse().map_err(|_| bad())?,
            loss: loss.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Endless shuffled passes over `0..len`.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PAIRED_STREAM: u64 = 100;
const SPEECH_INIT_STREAM: u64 = 200;
const TEXT_INIT_STREAM: u64 = 201;

/// Row `i` of each field belongs to the same paired utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCls {
    pub speech: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub transcripts: Vec<String>,
}

/// Pre-training state: both encoders, their parameters, the optimizer and
/// the loss log so far.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    variant: Variant,
    speech: SpeechEncoder,
    text: TextEncoder,
    audio: Vec<Utterance>,
    audio_tensors: Vec<Tensor2D>,
    /// Indices into `audio` of the transcribed subset, in corpus order.
    paired: Vec<usize>,
    tokens: Vec<TokenSequence>,
    token_idf: Vec<Vec<f64>>,
    vocab: Vocabulary,
    idf: IdfTable,
    store: ParamStore,
    adam: Adam,
    log: Vec<LossRecord>,
    completed: Vec<Stage>,
}

impl Trainer {
    pub fn new(audio: &[Utterance], variant: Variant, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = audio
            .first()
            .ok_or_else(|| Error::Config("pre-training corpus is empty".into()))?;
        let d = first.features.channels();
        if let Some(u) = audio.iter().find(|u| u.features.channels() != d) {
            return Err(Error::Input(format!(
                "`{}` has {} channels, corpus has {d}",
                u.record.utterance_id,
                u.features.channels()
            )));
        }
        let count = (cfg.paired_fraction * audio.len() as f64).floor() as usize;
        let mut paired: Vec<usize> = if count == 0 {
            Vec::new()
        } else {
            rand::seq::index::sample(&mut stream_rng(cfg.seed, PAIRED_STREAM), audio.len(), count).into_vec()
        };
        paired.sort_unstable();
        let transcripts: Vec<&str> = if paired.is_empty() {
            audio.iter().map(|u| u.record.transcript.as_str()).collect()
        } else {
            paired.iter().map(|&i| audio[i].record.transcript.as_str()).collect()
        };
        let (vocab, idf) = build_vocab_and_idf(&transcripts)?;
        let tokens: Vec<TokenSequence> = paired
            .iter()
            .map(|&i| vocab.encode(&audio[i].record.utterance_id, &audio[i].record.transcript))
            .collect();
        if let Some(t) = tokens.iter().find(|t| t.is_empty()) {
            return Err(Error::Input(format!("paired utterance `{}` has an empty transcript", t.utterance_id)));
        }
        let token_idf = tokens.iter().map(|t| idf.for_sequence(t)).collect();

        let speech = SpeechEncoder::new(cfg.speech_encoder(d))?;
        let text = TextEncoder::new(cfg.text_encoder(vocab.len()))?;
        let mut store = ParamStore::new();
        speech.init(&mut store, &mut stream_rng(cfg.seed, SPEECH_INIT_STREAM))?;
        text.init(&mut store, &mut stream_rng(cfg.seed, TEXT_INIT_STREAM))?;
        if cfg.precision == Precision::F32 {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for n in names {
                store.get_mut(&n).unwrap().round_to_f32();
            }
        }
        Ok(Self {
            adam: Adam::new(cfg.lr),
            audio_tensors: audio.iter().map(|u| u.features.to_tensor()).collect(),
            audio: audio.to_vec(),
            cfg,
            variant,
            speech,
            text,
            paired,
            tokens,
            token_idf,
            vocab,
            idf,
            store,
            log: Vec::new(),
            completed: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn speech_encoder(&self) -> &SpeechEncoder {
        &self.speech
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn completed(&self) -> &[Stage] {
        &self.completed
    }

    /// Paired utterances with their token sequences.
    pub fn paired(&self) -> impl Iterator<Item = (&Utterance, &TokenSequence)> {
        self.paired.iter().map(|&i| &self.audio[i]).zip(&self.tokens)
    }

    /// Speech and text `[CLS]` rows of every paired utterance.
    pub fn paired_cls(&self) -> Result<PairedCls> {
        let (mut speech, mut text, mut transcripts) = (Vec::new(), Vec::new(), Vec::new());
        for (u, toks) in self.paired() {
            let mut tape = Tape::new();
            let p = Params::frozen(&self.store);
            let s = self.speech.embed(&mut tape, p, &u.features.to_tensor())?;
            speech.push(tape.value(s).row(0).to_vec());
            let t = self.text.embed(&mut tape, p, toks, None)?;
            text.push(tape.value(t).row(0).to_vec());
            transcripts.push(u.record.transcript.clone());
        }
        Ok(PairedCls { speech, text, transcripts })
    }

    /// Stages this trainer's variant runs, with the joint stage substituted
    /// when joint weights are configured.
    pub fn planned_stages(&self) -> Vec<Stage> {
        let stages = self.variant.stages();
        match (self.cfg.joint_weights, stages.len() > 1) {
            (Some(_), true) => vec![Stage::SpeechMlm, Stage::Joint],
            _ => stages,
        }
    }

    /// Continues from the current state as another variant whose stages
    /// begin with the ones already completed.
    pub fn branch(&self, variant: Variant) -> Result<Self> {
        let mut next = self.clone();
        next.variant = variant;
        if !next.planned_stages().starts_with(&self.completed) {
            return Err(Error::Config(format!(
                "{variant} does not start with the completed stages {:?}",
                self.completed
            )));
        }
        Ok(next)
    }

    /// Runs every remaining stage of the variant.
    pub fn run(&mut self) -> Result<()> {
        let remaining = self.planned_stages()[self.completed.len()..].to_vec();
        for stage in remaining {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs one stage to completion. On a non-finite loss the update is
    /// not applied, so the trainer still holds the last good state.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let (steps, batch) = self.cfg.steps(stage);
        let pool = match stage {
            Stage::SpeechMlm => self.audio.len(),
            _ => self.paired.len(),
        };
        if steps > 0 && pool == 0 {
            return Err(Error::Config(format!(
                "stage {stage} has {steps} steps but the paired subset is empty"
            )));
        }
        let mut rng = stream_rng(self.cfg.seed, stage.stream());
        let mut sampler = Sampler::new(pool);
        let text_cache = match stage {
            Stage::AlignSeq | Stage::AlignTok if self.cfg.freeze_text => Some(self.text_embeddings()?),
            _ => None,
        };
        for step in 0..steps {
            let items = sampler.batch(batch, &mut rng);
            let mut tape = Tape::new();
            let loss = match stage {
                Stage::SpeechMlm => self.speech_mlm_loss(&mut tape, &items, &mut rng),
                Stage::TextMlm => self.text_mlm_loss(&mut tape, &items, &mut rng),
                Stage::AlignSeq | Stage::AlignTok => {
                    self.align_loss(&mut tape, &items, stage, text_cache.as_deref())
                }
                Stage::Joint => self.joint_loss(&mut tape, &items, &mut rng),
            };
            let loss = match loss {
                Ok(Some(l)) => l,
                Ok(None) => {
                    log::debug!("{stage} step {step}: nothing to predict, skipped");
                    continue;
                }
                Err(e) => return Err(non_finite(e, stage, step)),
            };
            let value = tape.value(loss).item();
            let grads = tape.backward(loss).map_err(|e| non_finite(e, stage, step))?;
            let names = tape.param_list();
            self.store.zero_grads();
            grads.accumulate_into(&tape, &mut self.store)?;
            let norm = clip_grad_norm(&mut self.store, &names, self.cfg.clip_norm);
            if !(value.is_finite() && norm.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    stage: stage.name().into(),
                    step,
                });
            }
            self.adam.step(&mut self.store, &names)?;
            if self.cfg.precision == Precision::F32 {
                for n in &names {
                    self.store.get_mut(n).unwrap().round_to_f32();
                }
                self.adam.round_to_f32(&names);
            }
            self.store.increment_step();
            self.log.push(LossRecord {
                stage,
                step,
                loss: value,
            });
        }
        self.completed.push(stage);
        Ok(())
    }

    fn batch_mean(tape: &mut Tape, losses: Vec<Var>) -> Result<Option<Var>> {
        if losses.is_empty() {
            return Ok(None);
        }
        let k = 1.0 / losses.len() as f64;
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        tape.scale(total, k).map(Some)
    }

    fn masked_reconstruction(&self, tape: &mut Tape, audio_index: usize, mask_seed: u64) -> Result<Option<Var>> {
        let feats = &self.audio[audio_index].features;
        let plan = plan_masks(
            feats.frames(),
            feats.channels(),
            self.cfg.p_time,
            self.cfg.p_channel,
            mask_seed,
        )?;
        let corrupted = apply_masks(feats, &plan)?.to_tensor();
        let out = self.speech.forward(tape, Params::trainable(&self.store), &corrupted)?;
        let l = loss_sp(tape, out.reconstructions, &self.audio_tensors[audio_index], &plan, self.cfg.loss_scope)?;
        Ok((!l.no_masked_positions).then_some(l.loss))
    }

    fn masked_prediction(&self, tape: &mut Tape, pair: usize, mask_seed: u64) -> Result<Option<Var>> {
        let seq = &self.tokens[pair];
        let plan = plan_token_masks(
            seq,
            self.cfg.p_token,
            self.cfg.token_corruption,
            self.vocab.len(),
            mask_seed,
        )?;
        if plan.is_empty() {
            return Ok(None);
        }
        let out = self.text.forward(tape, Params::trainable(&self.store), seq, Some(&plan))?;
        loss_text(tape, out.logits, seq, &plan).map(Some)
    }

    fn speech_mlm_loss(&self, tape: &mut Tape, items: &[usize], rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let mut losses = Vec::new();
        for &i in items {
            if let Some(l) = self.masked_reconstruction(tape, i, rng.random())? {
                losses.push(l);
            }
        }
        Self::batch_mean(tape, losses)
    }

    fn text_mlm_loss(&self, tape: &mut Tape, items: &[usize], rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let mut losses = Vec::new();
        for &i in items {
            if let Some(l) = self.masked_prediction(tape, i, rng.random())? {
                losses.push(l);
            }
        }
        Self::batch_mean(tape, losses)
    }

    /// Text encoder outputs for every paired transcript, frozen weights.
    fn text_embeddings(&self) -> Result<Vec<Tensor2D>> {
        self.tokens
            .iter()
            .map(|t| {
                let mut tape = Tape::new();
                let e = self.text.embed(&mut tape, Params::frozen(&self.store), t, None)?;
                Ok(tape.value(e).clone())
            })
            .collect()
    }

    fn pair_alignment(&self, tape: &mut Tape, pair: usize, stage: Stage, cache: Option<&[Tensor2D]>) -> Result<Var> {
        let feats = &self.audio_tensors[self.paired[pair]];
        let s = self.speech.embed(tape, Params::trainable(&self.store), feats)?;
        let t = match cache {
            Some(c) => tape.constant(c[pair].clone()),
            None => {
                let p = if self.cfg.freeze_text {
                    Params::frozen(&self.store)
                } else {
                    Params::trainable(&self.store)
                };
                self.text.embed(tape, p, &self.tokens[pair], None)?
            }
        };
        let n = feats.rows();
        let m = self.tokens[pair].len();
        if stage == Stage::AlignTok {
            let frames = tape.slice_rows(s, 1, n)?;
            let toks = tape.slice_rows(t, 1, m)?;
            Ok(loss_tok(tape, frames, toks, &self.token_idf[pair], self.cfg.uniform_idf_fallback)?.loss)
        } else {
            let s0 = tape.slice_rows(s, 0, 1)?;
            let t0 = tape.slice_rows(t, 0, 1)?;
            loss_seq(tape, s0, t0, self.cfg.seq_mean_per_dim)
        }
    }

    fn align_loss(&self, tape: &mut Tape, items: &[usize], stage: Stage, cache: Option<&[Tensor2D]>) -> Result<Option<Var>> {
        let losses = items
            .iter()
            .map(|&i| self.pair_alignment(tape, i, stage, cache))
            .collect::<Result<Vec<_>>>()?;
        Self::batch_mean(tape, losses)
    }

    fn joint_loss(&self, tape: &mut Tape, items: &[usize], rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let w = self.cfg.joint_weights.expect("joint stage needs weights");
        let align_stage = match self.variant {
            Variant::Tok | Variant::TokMlm => Stage::AlignTok,
            _ => Stage::AlignSeq,
        };
        let mut terms = Vec::new();
        for &i in items {
            let mut parts = Vec::new();
            if w.speech > 0.0 {
                if let Some(l) = self.masked_reconstruction(tape, self.paired[i], rng.random())? {
                    parts.push(tape.scale(l, w.speech)?);
                }
            }
            if w.text > 0.0 && self.variant.runs_text_mlm() {
                if let Some(l) = self.masked_prediction(tape, i, rng.random())? {
                    parts.push(tape.scale(l, w.text)?);
                }
            }
            if w.align > 0.0 {
                let l = self.pair_alignment(tape, i, align_stage, None)?;
                parts.push(tape.scale(l, w.align)?);
            }
            let mut it = parts.into_iter();
            if let Some(first) = it.next() {
                let mut sum = first;
                for p in it {
                    sum = tape.add(sum, p)?;
                }
                terms.push(sum);
            }
        }
        Self::batch_mean(tape, terms)
    }

    /// Config snapshot stored in checkpoints.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "kind": "pretrain",
            "variant": self.variant,
            "stages": self.completed,
            "train": self.cfg,
            "speech": self.speech.cfg,
            "text": self.text.cfg,
        }))?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            self.snapshot()?,
            self.cfg.seed,
            &self.store,
            self.adam.slots(),
        ))
    }
}

fn non_finite(e: Error, stage: Stage, step: usize) -> Error {
    match e {
        Error::NonFinite { op, node } => {
            log::error!("{stage} step {step}: non-finite value from `{op}` (node {node})");
            Error::NonFiniteLoss {
                stage: stage.name().into(),
                step,
            }
        }
        other => other,
    }
}

/// Result of a full pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    pub vocab: Vocabulary,
    pub idf: IdfTable,
}

/// Runs every stage of `variant` on `audio` (the transcribed subset is
/// drawn from it).
pub fn pretrain(audio: &[Utterance], variant: Variant, cfg: TrainConfig) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::new(audio, variant, cfg)?;
    trainer.run()?;
    Ok(PretrainOutcome {
        checkpoint: trainer.checkpoint()?,
        log: trainer.log.clone(),
        vocab: trainer.vocab.clone(),
        idf: trainer.idf.clone(),
    })
}
