//! Language encoder: tokenizer, vocabulary with idf weights, a Transformer
//! over token embeddings, and the masked-token prediction loss.

mod vocab;

pub use vocab::{
    build_vocab_and_idf, read_vocab, tokenize, write_vocab, IdfTable, TokenSequence, Vocabulary, CLS_ID, MASK_ID,
    PAD_ID, RESERVED, UNK_ID,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, EncoderConfig, Params};
use crate::numerics::{ParamStore, Tape, Tensor2D, Var};

pub const PREFIX: &str = "text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
        }
    }
}

/// How selected tokens are corrupted for masked prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCorruption {
    /// Every selected token becomes `[MASK]`.
    #[default]
    AlwaysMask,
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    Bert,
}

/// Positions (1-based, `[CLS]` never selected) and the id fed in their place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMaskPlan {
    pub seed: u64,
    pub positions: Vec<usize>,
    pub replacements: Vec<usize>,
}

impl TokenMaskPlan {
    pub fn empty() -> Self {
        Self {
            seed: 0,
            positions: Vec::new(),
            replacements: Vec::new(),
        }
    }

    /// Masks exactly the given positions with `[MASK]`.
    pub fn at(positions: Vec<usize>) -> Self {
        let replacements = vec![MASK_ID; positions.len()];
        Self {
            seed: 0,
            positions,
            replacements,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn plan_token_masks(
    seq: &TokenSequence,
    p: f64,
    corruption: TokenCorruption,
    vocab_size: usize,
    seed: u64,
) -> Result<TokenMaskPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("token mask probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = TokenMaskPlan {
        seed,
        ..TokenMaskPlan::empty()
    };
    for pos in 1..seq.ids.len() {
        if rng.random::<f64>() >= p {
            continue;
        }
        let replacement = match corruption {
            TokenCorruption::AlwaysMask => MASK_ID,
            TokenCorruption::Bert => {
                let u = rng.random::<f64>();
                if u < 0.8 || vocab_size <= RESERVED.len() {
                    MASK_ID
                } else if u < 0.9 {
                    rng.random_range(RESERVED.len()..vocab_size)
                } else {
                    seq.ids[pos]
                }
            }
        };
        plan.positions.push(pos);
        plan.replacements.push(replacement);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoderOutput {
    /// `(m+1) × hidden`; row 0 is the `[CLS]` output.
    pub embeddings: Tensor2D,
    /// `m × |V|` masked-prediction logits for positions `1..=m`.
    pub logits: Tensor2D,
}

#[derive(Debug, Clone, Copy)]
pub struct TextForward {
    pub embeddings: Var,
    pub logits: Var,
}

impl TextForward {
    pub fn cls(&self, tape: &mut Tape) -> Result<Var> {
        tape.slice_rows(self.embeddings, 0, 1)
    }

    pub fn tokens(&self, tape: &mut Tape) -> Result<Var> {
        let m = tape.shape(self.embeddings).0 - 1;
        tape.slice_rows(self.embeddings, 1, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        cfg.encoder().validate()?;
        if cfg.vocab_size <= RESERVED.len() || cfg.max_len < 2 {
            return Err(Error::Config("text encoder needs a vocabulary and max_len >= 2".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let h = self.cfg.hidden;
        store.insert_normal("text.tok_emb", self.cfg.vocab_size, h, 1.0, rng)?;
        nn::init_encoder(store, "text.enc", &self.cfg.encoder(), rng)?;
        nn::init_linear(store, "text.mlm", h, self.cfg.vocab_size, rng)
    }

    /// Encoder pass without the prediction head: `(m+1) × hidden`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: Params,
        tokens: &TokenSequence,
        plan: Option<&TokenMaskPlan>,
    ) -> Result<Var> {
        let len = tokens.ids.len();
        if tokens.ids.first() != Some(&CLS_ID) {
            return Err(Error::Contract("token sequence must start with [CLS]".into()));
        }
        if len < 2 {
            return Err(Error::Input(format!("transcript `{}` has no tokens", tokens.utterance_id)));
        }
        if len > self.cfg.max_len {
            return Err(Error::Length {
                len,
                max: self.cfg.max_len,
            });
        }
        let mut ids = tokens.ids.clone();
        if let Some(plan) = plan {
            for (&pos, &rep) in plan.positions.iter().zip(&plan.replacements) {
                if pos == 0 || pos >= len {
                    return Err(Error::Plan(format!("token mask position {pos} out of range")));
                }
                ids[pos] = rep;
            }
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        let table = p.var(tape, "text.tok_emb")?;
        let emb = tape.gather(table, &ids)?;
        let pe = tape.constant(nn::sinusoidal(len, self.cfg.hidden));
        let x = tape.add(emb, pe)?;
        nn::encoder(tape, p, "text.enc", &self.cfg.encoder(), x)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: Params,
        tokens: &TokenSequence,
        plan: Option<&TokenMaskPlan>,
    ) -> Result<TextForward> {
        let embeddings = self.embed(tape, p, tokens, plan)?;
        let len = tokens.ids.len();
        let body = tape.slice_rows(embeddings, 1, len - 1)?;
        let logits = nn::linear(tape, p, "text.mlm", body)?;
        Ok(TextForward { embeddings, logits })
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        tokens: &TokenSequence,
        plan: Option<&TokenMaskPlan>,
    ) -> Result<LanguageEncoderOutput> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, Params::frozen(store), tokens, plan)?;
        Ok(LanguageEncoderOutput {
            embeddings: tape.value(out.embeddings).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }
}

/// Mean cross-entropy of the true ids at the masked positions.
pub fn loss_text(tape: &mut Tape, logits: Var, tokens: &TokenSequence, plan: &TokenMaskPlan) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::Contract("masked prediction needs at least one masked token".into()));
    }
    let (m, _) = tape.shape(logits);
    if m != tokens.len() {
        return Err(Error::Contract(format!("{m} logit rows for {} tokens", tokens.len())));
    }
    if let Some(&bad) = plan.positions.iter().find(|&&p| p == 0 || p > m) {
        return Err(Error::Plan(format!("token mask position {bad} out of range")));
    }
    let rows: Vec<usize> = plan.positions.iter().map(|p| p - 1).collect();
    let targets: Vec<usize> = plan.positions.iter().map(|&p| tokens.ids[p]).collect();
    let picked = tape.gather(logits, &rows)?;
    tape.cross_entropy(picked, &targets)
}

pub fn loss_text_value(output: &LanguageEncoderOutput, tokens: &TokenSequence, plan: &TokenMaskPlan) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = tape.constant(output.logits.clone());
    let l = loss_text(&mut tape, logits, tokens, plan)?;
    Ok(tape.value(l).item())
}
