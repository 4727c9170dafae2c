//! Finite-difference checks of every training loss on a tiny model.
//!
//! Each loss is built on a 2-layer, hidden-16 configuration over a small
//! synthetic corpus. Instances whose loss sits near a kink (an `|x|` close
//! to zero, a near tie inside a max) are skipped by moving to the next
//! instance seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{loss_seq, loss_tok};
use crate::downstream::{Classifier, FinetuneConfig, Head, SpanLoss, SpanModel};
use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::masking::{apply_masks, MaskPlan};
use crate::nn::Params;
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor2D};
use crate::speech::{loss_sp, LossScope, SpeechEncoder, SpeechEncoderConfig};
use crate::synthdata::{generate, SynthSpec, TaskKind};
use crate::text::{build_vocab_and_idf, loss_text, TextEncoder, TextEncoderConfig, TokenMaskPlan};
use crate::trainer::Checkpoint;

/// Smallest accepted distance from a kink.
pub const TIE_MARGIN: f64 = 1e-3;

/// Instance seeds tried per loss before giving up.
pub const MAX_ATTEMPTS: u64 = 32;

const CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    SpeechMasked,
    SpeechAllFrames,
    Text,
    Seq,
    Tok,
    Classifier,
    SpanBce,
    SpanSoftmax,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 8] = [
        CheckedLoss::SpeechMasked,
        CheckedLoss::SpeechAllFrames,
        CheckedLoss::Text,
        CheckedLoss::Seq,
        CheckedLoss::Tok,
        CheckedLoss::Classifier,
        CheckedLoss::SpanBce,
        CheckedLoss::SpanSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::SpeechMasked => "speech_masked_only",
            CheckedLoss::SpeechAllFrames => "speech_all_frames",
            CheckedLoss::Text => "text_mlm",
            CheckedLoss::Seq => "align_seq",
            CheckedLoss::Tok => "align_tok",
            CheckedLoss::Classifier => "classifier",
            CheckedLoss::SpanBce => "span_bce",
            CheckedLoss::SpanSoftmax => "span_softmax",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub loss: CheckedLoss,
    pub instance_seed: u64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn tiny_text(vocab_size: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ff: 32,
        vocab_size,
        max_len: 32,
    }
}

fn corpus(task: TaskKind, seed: u64) -> Result<Vec<Utterance>> {
    let spec = SynthSpec {
        vocab_size: 8,
        template_frames: 2,
        channels: CHANNELS,
        noise: 0.1,
        min_words: 2,
        max_words: 3,
        pretrain_utterances: 4,
        train_utterances: 4,
        valid_utterances: 1,
        test_utterances: 1,
        num_classes: 3,
        speakers: 1,
        task,
        seed,
        template_floor: 1.0,
    };
    Ok(generate(&spec)?.train)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn speech_checkpoint(seed: u64) -> Result<(SpeechEncoder, ParamStore, Checkpoint)> {
    let cfg = SpeechEncoderConfig::tiny(CHANNELS);
    let speech = SpeechEncoder::new(cfg.clone())?;
    let mut store = ParamStore::new();
    speech.init(&mut store, &mut rng(seed, 1))?;
    let snapshot = serde_json::json!({ "speech": cfg }).to_string();
    let ckpt = Checkpoint::from_store(snapshot, seed, &store, &BTreeMap::new());
    Ok((speech, store, ckpt))
}

fn far_from_zero(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().all(|v| v.abs() > TIE_MARGIN)
}

/// A checked loss instance: the closure, its parameters, and whether the
/// point is far enough from every kink.
type Instance = (Box<dyn Fn(&mut Tape, &ParamStore) -> Result<crate::numerics::Var>>, ParamStore, bool);

fn speech_instance(scope: LossScope, seed: u64) -> Result<Instance> {
    let utt = corpus(TaskKind::KeywordClass, seed)?.swap_remove(0);
    let (speech, store, _) = speech_checkpoint(seed)?;
    let plan = MaskPlan::with_indices(utt.features.frames(), CHANNELS, vec![1], vec![2])?;
    let input = apply_masks(&utt.features, &plan)?.to_tensor();
    let original = utt.features.to_tensor();
    let mut tape = Tape::new();
    let out = speech.forward(&mut tape, Params::frozen(&store), &input)?;
    let recon = tape.value(out.reconstructions).data();
    let keep = plan.loss_positions();
    let residuals: Vec<f64> = recon
        .iter()
        .zip(original.data())
        .zip(keep.data())
        .filter(|(_, k)| scope == LossScope::AllFrames || **k > 0.0)
        .map(|((r, o), _)| r - o)
        .collect();
    let f = move |tape: &mut Tape, p: &ParamStore| {
        let out = speech.forward(tape, Params::trainable(p), &input)?;
        Ok(loss_sp(tape, out.reconstructions, &original, &plan, scope)?.loss)
    };
    Ok((Box::new(f), store, far_from_zero(residuals)))
}

fn text_instance(seed: u64) -> Result<Instance> {
    let utts = corpus(TaskKind::KeywordClass, seed)?;
    let transcripts: Vec<&str> = utts.iter().map(|u| u.record.transcript.as_str()).collect();
    let (vocab, _) = build_vocab_and_idf(&transcripts)?;
    let text = TextEncoder::new(tiny_text(vocab.len()))?;
    let mut store = ParamStore::new();
    text.init(&mut store, &mut rng(seed, 2))?;
    let tokens = vocab.encode("u", transcripts[0]);
    let plan = TokenMaskPlan::at(vec![1]);
    let f = move |tape: &mut Tape, p: &ParamStore| {
        let out = text.forward(tape, Params::trainable(p), &tokens, Some(&plan))?;
        loss_text(tape, out.logits, &tokens, &plan)
    };
    Ok((Box::new(f), store, true))
}

/// Speech and text encoders in one store, on the first training pair.
fn pair_instance(seed: u64, tok: bool) -> Result<Instance> {
    let utts = corpus(TaskKind::KeywordClass, seed)?;
    let transcripts: Vec<&str> = utts.iter().map(|u| u.record.transcript.as_str()).collect();
    let (vocab, idf) = build_vocab_and_idf(&transcripts)?;
    let text = TextEncoder::new(tiny_text(vocab.len()))?;
    let (speech, mut store, _) = speech_checkpoint(seed)?;
    text.init(&mut store, &mut rng(seed, 2))?;
    let tokens = vocab.encode("u", transcripts[0]);
    let weights = idf.for_sequence(&tokens);
    let feats = utts[0].features.to_tensor();

    let encode = {
        let (speech, text, tokens, feats) = (speech.clone(), text.clone(), tokens.clone(), feats.clone());
        move |tape: &mut Tape, p: &ParamStore| -> Result<_> {
            let s = speech.embed(tape, Params::trainable(p), &feats)?;
            let t = text.embed(tape, Params::trainable(p), &tokens, None)?;
            Ok((s, t))
        }
    };
    let mut tape = Tape::new();
    let (s, t) = encode(&mut tape, &store)?;
    let (sv, tv) = (tape.value(s).clone(), tape.value(t).clone());
    let tie_free = if tok {
        cosine_gaps(&sv, &tv).into_iter().all(|g| g > TIE_MARGIN)
    } else {
        far_from_zero(sv.row(0).iter().zip(tv.row(0)).map(|(a, b)| a - b))
    };

    let f = move |tape: &mut Tape, p: &ParamStore| {
        let (s, t) = encode(tape, p)?;
        if tok {
            let n = tape.shape(s).0 - 1;
            let m = tape.shape(t).0 - 1;
            let frames = tape.slice_rows(s, 1, n)?;
            let toks = tape.slice_rows(t, 1, m)?;
            Ok(loss_tok(tape, frames, toks, &weights, true)?.loss)
        } else {
            let s0 = tape.slice_rows(s, 0, 1)?;
            let t0 = tape.slice_rows(t, 0, 1)?;
            loss_seq(tape, s0, t0, false)
        }
    };
    Ok((Box::new(f), store, tie_free))
}

/// Gap between the best and second-best frame cosine for every token.
fn cosine_gaps(speech: &Tensor2D, text: &Tensor2D) -> Vec<f64> {
    let unit = |row: &[f64]| {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let frames: Vec<Vec<f64>> = (1..speech.rows()).map(|i| unit(speech.row(i))).collect();
    (1..text.rows())
        .map(|j| {
            let t = unit(text.row(j));
            let mut sims: Vec<f64> = frames.iter().map(|f| f.iter().zip(&t).map(|(a, b)| a * b).sum()).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            if sims.len() < 2 {
                f64::INFINITY
            } else {
                sims[0] - sims[1]
            }
        })
        .collect()
}

fn classifier_instance(seed: u64) -> Result<Instance> {
    let utts = corpus(TaskKind::KeywordClass, seed)?;
    let (_, _, ckpt) = speech_checkpoint(seed)?;
    let clf = Classifier::new(&ckpt, 3, 8, seed)?;
    let store = clf.store().clone();
    let batch: Vec<Utterance> = utts.into_iter().take(2).collect();
    let f = move |tape: &mut Tape, p: &ParamStore| {
        let refs: Vec<&Utterance> = batch.iter().collect();
        clf.batch_loss(tape, p, &refs)
    };
    Ok((Box::new(f), store, true))
}

fn span_instance(loss: SpanLoss, seed: u64) -> Result<Instance> {
    let utts = corpus(TaskKind::SpanLocate, seed)?;
    let (_, _, ckpt) = speech_checkpoint(seed)?;
    let cfg = FinetuneConfig {
        seed,
        span_layers: 2,
        span_heads: 2,
        span_ff: 32,
        span_loss: loss,
        ..FinetuneConfig::default()
    };
    let model = SpanModel::new(&ckpt, &utts, &cfg)?;
    let store = model.store().clone();
    let batch: Vec<Utterance> = utts.into_iter().take(2).collect();
    let f = move |tape: &mut Tape, p: &ParamStore| {
        let refs: Vec<&Utterance> = batch.iter().collect();
        model.batch_loss(tape, p, &refs)
    };
    Ok((Box::new(f), store, true))
}

fn instance(loss: CheckedLoss, seed: u64) -> Result<Instance> {
    match loss {
        CheckedLoss::SpeechMasked => speech_instance(LossScope::MaskedOnly, seed),
        CheckedLoss::SpeechAllFrames => speech_instance(LossScope::AllFrames, seed),
        CheckedLoss::Text => text_instance(seed),
        CheckedLoss::Seq => pair_instance(seed, false),
        CheckedLoss::Tok => pair_instance(seed, true),
        CheckedLoss::Classifier => classifier_instance(seed),
        CheckedLoss::SpanBce => span_instance(SpanLoss::Bce, seed),
        CheckedLoss::SpanSoftmax => span_instance(SpanLoss::Softmax, seed),
    }
}

/// Checks one loss on the first tie-free instance at or after `seed`.
pub fn check_loss(loss: CheckedLoss, seed: u64, opts: GradCheckOptions) -> Result<SuiteEntry> {
    for instance_seed in seed..seed + MAX_ATTEMPTS {
        let (f, store, tie_free) = instance(loss, instance_seed)?;
        if !tie_free {
            continue;
        }
        let report = grad_check(f, &store, opts)?;
        return Ok(SuiteEntry {
            loss,
            instance_seed,
            report,
        });
    }
    Err(Error::Config(format!(
        "no tie-free instance of {} within {MAX_ATTEMPTS} seeds",
        loss.name()
    )))
}

/// Runs every loss in [`CheckedLoss::ALL`].
pub fn run_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    CheckedLoss::ALL.iter().map(|&l| check_loss(l, seed, opts)).collect()
}
