//! Fine-tuning heads on top of a pre-trained speech encoder: utterance
//! classification from the `[CLS]` output, and answer-span prediction from
//! audio frames plus a textual question. Also training-set subsampling,
//! metrics reports and the results table.

mod report;
mod span;

pub use report::{render_table, MetricsReport};
pub use span::{aos, decode_span, default_max_span, FrameSpan};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::nn::{self, EncoderConfig, Params};
use crate::numerics::{clip_grad_norm, Adam, ParamStore, Precision, Tape, Tensor2D, Var};
use crate::speech::{SpeechEncoder, PREFIX as SPEECH_PREFIX};
use crate::text::{build_vocab_and_idf, Vocabulary};
use crate::trainer::Checkpoint;

pub const CLASSIFIER_PREFIX: &str = "cls_head.";
pub const SPAN_PREFIX: &str = "span_head.";

/// Span training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLoss {
    /// Independent logistic loss on every frame, start and end channels.
    #[default]
    Bce,
    /// Cross-entropy over frame positions.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    pub head_hidden: usize,
    pub span_layers: usize,
    pub span_heads: usize,
    pub span_ff: usize,
    pub span_loss: SpanLoss,
    /// Longest decoded span is `max_span + 1` frames; derived from the
    /// training golds when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_span: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch: 64,
            lr: 3e-4,
            clip_norm: 5.0,
            precision: Precision::F32,
            head_hidden: 512,
            span_layers: 3,
            span_heads: 4,
            span_ff: 128,
            span_loss: SpanLoss::Bce,
            max_span: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// A model that can be fine-tuned by [`finetune`].
pub trait Head {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Mean training loss over `batch`, with parameters taken from `store`.
    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Utterance]) -> Result<Var>;
    /// Evaluation metric, higher is better.
    fn metric(&self, utts: &[Utterance]) -> Result<f64>;
    fn metric_name(&self) -> &'static str;
    fn snapshot(&self) -> Result<serde_json::Value>;
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub metric_name: &'static str,
    /// Test metric at the best validation epoch.
    pub test_value: f64,
    /// 1-based.
    pub best_epoch: usize,
    pub valid_history: Vec<f64>,
    /// Every parameter the optimizer touched.
    pub trained_params: Vec<String>,
    pub checkpoint: Checkpoint,
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const HEAD_INIT_STREAM: u64 = 300;
const SHUFFLE_STREAM: u64 = 301;

/// Trains every parameter of `model` for `cfg.epochs` epochs, keeps the
/// parameters of the best validation epoch (earliest on ties) and reports
/// the test metric there.
pub fn finetune<H: Head + Clone>(
    model: &mut H,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(Error::DegenerateData("train, valid and test splits must be non-empty".into()));
    }
    let mut rng = init_rng(cfg.seed, SHUFFLE_STREAM);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trained = BTreeSet::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, H, Adam)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, model.store(), &batch).map_err(|e| numeric(e, epoch))?;
            let grads = tape.backward(loss).map_err(|e| numeric(e, epoch))?;
            let names = tape.param_list();
            let store = model.store_mut();
            store.zero_grads();
            grads.accumulate_into(&tape, store)?;
            let norm = clip_grad_norm(store, &names, cfg.clip_norm);
            if !(tape.value(loss).item().is_finite() && norm.is_finite()) {
                return Err(numeric(Error::NonFinite { op: "loss", node: loss.index() }, epoch));
            }
            adam.step(store, &names)?;
            if cfg.precision == Precision::F32 {
                for n in &names {
                    store.get_mut(n).unwrap().round_to_f32();
                }
                adam.round_to_f32(&names);
            }
            store.increment_step();
            trained.extend(names);
        }
        let v = model.metric(valid)?;
        history.push(v);
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((epoch, v, model.clone(), adam.clone()));
        }
    }
    let (best_epoch, _, best_model, best_adam) = best.expect("at least one epoch");
    let test_value = best_model.metric(test)?;
    let snapshot = serde_json::to_string(&best_model.snapshot()?)?;
    let checkpoint = Checkpoint::from_store(snapshot, cfg.seed, best_model.store(), best_adam.slots());
    *model = best_model;
    Ok(FinetuneOutcome {
        metric_name: model.metric_name(),
        test_value,
        best_epoch,
        valid_history: history,
        trained_params: trained.into_iter().collect(),
        checkpoint,
    })
}

fn numeric(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            stage: "finetune".into(),
            step: epoch,
        },
        other => other,
    }
}

/// The speech module of a checkpoint, ready to receive a new head.
fn speech_module(ckpt: &Checkpoint) -> Result<(SpeechEncoder, ParamStore)> {
    let speech = SpeechEncoder::new(ckpt.speech_config()?)?;
    let mut store = ParamStore::new();
    speech.init(&mut store, &mut init_rng(0, 0))?;
    ckpt.load_into(&mut store, SPEECH_PREFIX)?;
    Ok((speech, store))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Speech encoder plus an MLP on the `[CLS]` output.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub speech: SpeechEncoder,
    pub head_hidden: usize,
    pub num_classes: usize,
    store: ParamStore,
}

impl Classifier {
    /// Fresh head on the checkpoint's speech module.
    pub fn new(ckpt: &Checkpoint, num_classes: usize, head_hidden: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::DegenerateData(format!("{num_classes} class(es); need at least two")));
        }
        let (speech, mut store) = speech_module(ckpt)?;
        let mut rng = init_rng(seed, HEAD_INIT_STREAM);
        let h = speech.cfg.hidden;
        nn::init_linear(&mut store, "cls_head.fc1", h, head_hidden, &mut rng)?;
        nn::init_linear(&mut store, "cls_head.fc2", head_hidden, num_classes, &mut rng)?;
        Ok(Self {
            speech,
            head_hidden,
            num_classes,
            store,
        })
    }

    /// Restores a fine-tuned classifier.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(&ckpt.config)?;
        let field = |k: &str| {
            v.get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Integrity(format!("classifier checkpoint lacks `{k}`")))
        };
        let mut model = Self::new(ckpt, field("num_classes")?, field("head_hidden")?, 0)?;
        ckpt.load_into(&mut model.store, CLASSIFIER_PREFIX)?;
        Ok(model)
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, feats: &Tensor2D) -> Result<Var> {
        let p = Params::trainable(store);
        let s = self.speech.embed(tape, p, feats)?;
        let s0 = tape.slice_rows(s, 0, 1)?;
        let h = nn::linear(tape, p, "cls_head.fc1", s0)?;
        let h = tape.gelu(h)?;
        nn::linear(tape, p, "cls_head.fc2", h)
    }

    pub fn predict(&self, feats: &Tensor2D) -> Result<usize> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, &self.store, feats)?;
        Ok(argmax(tape.value(l).row(0)))
    }
}

fn label_of(u: &Utterance) -> Result<usize> {
    u.record
        .label
        .ok_or_else(|| Error::Manifest(format!("`{}` has no label", u.record.utterance_id)))
}

/// Predictions that match `labels`, as a fraction.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Number of classes, checking every record is labelled, labels are
/// contiguous from 0, and training covers at least two classes.
pub fn class_count(train: &[Utterance], others: &[&[Utterance]]) -> Result<usize> {
    let mut all = BTreeSet::new();
    let mut in_train = BTreeSet::new();
    for u in train {
        in_train.insert(label_of(u)?);
    }
    all.extend(&in_train);
    for split in others {
        for u in split.iter() {
            all.insert(label_of(u)?);
        }
    }
    let k = all.len();
    if all.iter().copied().ne(0..k) {
        return Err(Error::Manifest(format!("labels {all:?} are not contiguous from 0")));
    }
    if in_train.len() < 2 {
        return Err(Error::DegenerateData("training set holds a single class".into()));
    }
    Ok(k)
}

impl Head for Classifier {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Utterance]) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for u in batch {
            targets.push(label_of(u)?);
            rows.push(self.logits(tape, store, &u.features.to_tensor())?);
        }
        let logits = tape.concat_rows(&rows)?;
        tape.cross_entropy(logits, &targets)
    }

    fn metric(&self, utts: &[Utterance]) -> Result<f64> {
        let predictions = utts
            .iter()
            .map(|u| self.predict(&u.features.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let labels = utts.iter().map(label_of).collect::<Result<Vec<_>>>()?;
        Ok(accuracy(&predictions, &labels))
    }

    fn metric_name(&self) -> &'static str {
        "accuracy"
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "kind": "classifier",
            "speech": self.speech.cfg,
            "num_classes": self.num_classes,
            "head_hidden": self.head_hidden,
        }))
    }
}

/// Fine-tunes a fresh classifier on `train` and reports test accuracy.
pub fn finetune_classifier(
    ckpt: &Checkpoint,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    cfg: &FinetuneConfig,
) -> Result<(Classifier, FinetuneOutcome)> {
    let k = class_count(train, &[valid, test])?;
    let mut model = Classifier::new(ckpt, k, cfg.head_hidden, cfg.seed)?;
    let outcome = finetune(&mut model, train, valid, test, cfg)?;
    Ok((model, outcome))
}

/// Speech encoder followed by a Transformer over `[audio frames; question
/// tokens]` and per-frame start and end scorers.
#[derive(Debug, Clone)]
pub struct SpanModel {
    pub speech: SpeechEncoder,
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
    pub max_span: usize,
    pub loss: SpanLoss,
    store: ParamStore,
}

fn gold_of(u: &Utterance) -> Result<FrameSpan> {
    let [s, e] = u
        .record
        .answer_span_frames
        .ok_or_else(|| Error::Manifest(format!("`{}` has no answer span", u.record.utterance_id)))?;
    let span = FrameSpan::new(s, e).map_err(|e| Error::Manifest(e.to_string()))?;
    if !span.within(u.features.frames()) {
        return Err(Error::Manifest(format!(
            "`{}`: span [{s}, {e}] outside {} frames",
            u.record.utterance_id,
            u.features.frames()
        )));
    }
    Ok(span)
}

fn question_of(u: &Utterance) -> Result<&str> {
    u.record
        .question
        .as_deref()
        .ok_or_else(|| Error::Manifest(format!("`{}` has no question", u.record.utterance_id)))
}

impl SpanModel {
    /// Fresh span head on the checkpoint's speech module. The question
    /// vocabulary comes from the training questions.
    pub fn new(ckpt: &Checkpoint, train: &[Utterance], cfg: &FinetuneConfig) -> Result<Self> {
        let mut questions = Vec::with_capacity(train.len());
        let mut golds = Vec::with_capacity(train.len());
        for u in train {
            questions.push(question_of(u)?);
            golds.push(gold_of(u)?);
        }
        let (vocab, _) = build_vocab_and_idf(&questions)?;
        let max_span = cfg.max_span.unwrap_or_else(|| default_max_span(&golds));
        let (speech, store) = speech_module(ckpt)?;
        let encoder = EncoderConfig {
            layers: cfg.span_layers,
            hidden: speech.cfg.hidden,
            heads: cfg.span_heads,
            ff: cfg.span_ff,
        };
        let mut model = Self {
            speech,
            encoder,
            vocab,
            max_span,
            loss: cfg.span_loss,
            store,
        };
        model.init_head(&mut init_rng(cfg.seed, HEAD_INIT_STREAM))?;
        Ok(model)
    }

    fn init_head(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let h = self.encoder.hidden;
        let s = &mut self.store;
        s.insert_normal("span_head.tok_emb", self.vocab.len(), h, 1.0, rng)?;
        s.insert_normal("span_head.type_emb", 2, h, 1.0, rng)?;
        nn::init_encoder(s, "span_head.enc", &self.encoder, rng)?;
        for side in ["start", "end"] {
            s.insert_xavier(format!("span_head.{side}.w"), 1, h, rng)?;
            s.insert_filled(format!("span_head.{side}.b"), 1, 1, 0.0)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Snap {
            encoder: EncoderConfig,
            vocab: Vec<String>,
            max_span: usize,
            loss: SpanLoss,
        }
        let snap: Snap = serde_json::from_str(&ckpt.config)?;
        let (speech, store) = speech_module(ckpt)?;
        let mut model = Self {
            speech,
            encoder: snap.encoder,
            vocab: Vocabulary::from_token_list(snap.vocab)?,
            max_span: snap.max_span,
            loss: snap.loss,
            store,
        };
        model.init_head(&mut init_rng(0, 0))?;
        ckpt.load_into(&mut model.store, SPAN_PREFIX)?;
        Ok(model)
    }

    /// Start and end logits, each `1 × n`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, feats: &Tensor2D, question: &str) -> Result<(Var, Var)> {
        let p = Params::trainable(store);
        let n = feats.rows();
        let s = self.speech.embed(tape, p, feats)?;
        let frames = tape.slice_rows(s, 1, n)?;
        let ids: Vec<usize> = self.vocab.encode("", question).ids[1..].to_vec();
        if ids.is_empty() {
            return Err(Error::Input(format!("question `{question}` has no tokens")));
        }
        let types = p.var(tape, "span_head.type_emb")?;
        let audio_type = tape.gather(types, &vec![0; n])?;
        let audio = tape.add(frames, audio_type)?;
        let table = p.var(tape, "span_head.tok_emb")?;
        let q = tape.gather(table, &ids)?;
        let q_type = tape.gather(types, &vec![1; ids.len()])?;
        let q = tape.add(q, q_type)?;
        let pe = tape.constant(nn::sinusoidal(ids.len(), self.encoder.hidden));
        let q = tape.add(q, pe)?;
        let joined = tape.concat_rows(&[audio, q])?;
        let h = nn::encoder(tape, p, "span_head.enc", &self.encoder, joined)?;
        let h = tape.slice_rows(h, 0, n)?;
        let ones = tape.constant(Tensor2D::filled(1, n, 1.0));
        let mut out = [h; 2];
        for (slot, side) in out.iter_mut().zip(["start", "end"]) {
            let w = p.var(tape, &format!("span_head.{side}.w"))?;
            let b = p.var(tape, &format!("span_head.{side}.b"))?;
            let scores = tape.matmul_bt(w, h)?;
            let bias = tape.matmul(b, ones)?;
            *slot = tape.add(scores, bias)?;
        }
        Ok((out[0], out[1]))
    }

    pub fn predict(&self, feats: &Tensor2D, question: &str) -> Result<FrameSpan> {
        let mut tape = Tape::new();
        let (s, e) = self.logits(&mut tape, &self.store, feats, question)?;
        decode_span(tape.value(s).row(0), tape.value(e).row(0), self.max_span)
    }

    fn example_loss(&self, tape: &mut Tape, store: &ParamStore, u: &Utterance) -> Result<Var> {
        let gold = gold_of(u)?;
        let n = u.features.frames();
        let (s, e) = self.logits(tape, store, &u.features.to_tensor(), question_of(u)?)?;
        let mut parts = [s, e];
        for (slot, target) in parts.iter_mut().zip([gold.start, gold.end]) {
            *slot = match self.loss {
                SpanLoss::Bce => {
                    let mut t = Tensor2D::zeros(1, n);
                    t.set(0, target, 1.0);
                    tape.bce_with_logits(*slot, t)?
                }
                SpanLoss::Softmax => tape.cross_entropy(*slot, &[target])?,
            };
        }
        let both = tape.add(parts[0], parts[1])?;
        tape.scale(both, 0.5)
    }
}

impl Head for SpanModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Utterance]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = self.example_loss(tape, store, batch[0])?;
        for u in &batch[1..] {
            let l = self.example_loss(tape, store, u)?;
            total = tape.add(total, l)?;
        }
        tape.scale(total, 1.0 / batch.len() as f64)
    }

    fn metric(&self, utts: &[Utterance]) -> Result<f64> {
        if utts.is_empty() {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for u in utts {
            let pred = self.predict(&u.features.to_tensor(), question_of(u)?)?;
            sum += aos(pred, gold_of(u)?);
        }
        Ok(sum / utts.len() as f64)
    }

    fn metric_name(&self) -> &'static str {
        "aos"
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "kind": "span",
            "speech": self.speech.cfg,
            "encoder": self.encoder,
            "vocab": self.vocab.tokens(),
            "max_span": self.max_span,
            "loss": self.loss,
        }))
    }
}

/// Fine-tunes a fresh span model on `train` and reports test AOS.
pub fn finetune_span(
    ckpt: &Checkpoint,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    cfg: &FinetuneConfig,
) -> Result<(SpanModel, FinetuneOutcome)> {
    for u in valid.iter().chain(test) {
        gold_of(u)?;
        question_of(u)?;
    }
    let mut model = SpanModel::new(ckpt, train, cfg)?;
    let outcome = finetune(&mut model, train, valid, test, cfg)?;
    Ok((model, outcome))
}

/// Keeps `floor(fraction · len)` records drawn uniformly without
/// replacement, in their original order.
pub fn subsample_training(records: &[Utterance], fraction: f64, seed: u64) -> Result<Vec<Utterance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Fraction(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = (fraction * records.len() as f64).floor() as usize;
    if count == 0 {
        return Err(Error::Fraction(format!(
            "fraction {fraction} of {} records is empty",
            records.len()
        )));
    }
    let mut idx = rand::seq::index::sample(&mut init_rng(seed, 0), records.len(), count).into_vec();
    idx.sort_unstable();
    let out: Vec<Utterance> = idx.into_iter().map(|i| records[i].clone()).collect();
    let lost = missing_classes(records, &out);
    if !lost.is_empty() {
        log::warn!("subsample at fraction {fraction} lost classes {lost:?}");
    }
    Ok(out)
}

/// Labels present in `full` but absent from `subset`.
pub fn missing_classes(full: &[Utterance], subset: &[Utterance]) -> Vec<usize> {
    let have: BTreeSet<usize> = subset.iter().filter_map(|u| u.record.label).collect();
    let all: BTreeMap<usize, ()> = full.iter().filter_map(|u| u.record.label).map(|l| (l, ())).collect();
    all.into_keys().filter(|l| !have.contains(l)).collect()
}
