//! Cross-modal alignment losses between paired speech and text encodings.
//!
//! The sequence-level loss pulls the speech `[CLS]` output towards the text
//! `[CLS]` output under L1. The token-level loss matches every text token to
//! its most similar speech frame (cosine) and rewards the idf-weighted mean
//! of those best similarities, so rare words dominate the alignment signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2D, Var};

/// Lower bound on vector norms inside cosine similarity.
pub const COS_FLOOR: f64 = 1e-12;

/// Encoder outputs for one utterance and its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub pair_id: String,
    /// `(n+1) × hidden`, `[CLS]` first.
    pub speech: Tensor2D,
    /// `(m+1) × hidden`, `[CLS]` first.
    pub text: Tensor2D,
    /// idf weights of text tokens `1..=m`.
    pub idf: Vec<f64>,
}

/// `‖s₀ − t₀‖₁`, optionally divided by the hidden size.
pub fn loss_seq(tape: &mut Tape, speech_cls: Var, text_cls: Var, mean_per_dim: bool) -> Result<Var> {
    let (rs, hs) = tape.shape(speech_cls);
    let (rt, ht) = tape.shape(text_cls);
    if rs != 1 || rt != 1 || hs != ht {
        return Err(Error::Contract(format!(
            "[CLS] shapes {:?} and {:?} differ",
            (rs, hs),
            (rt, ht)
        )));
    }
    let diff = tape.sub(speech_cls, text_cls)?;
    let abs = tape.abs(diff)?;
    let total = tape.sum(abs)?;
    if mean_per_dim {
        tape.scale(total, 1.0 / hs as f64)
    } else {
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct TokLoss {
    pub loss: Var,
    /// Best-matching frame (0-based, `[CLS]` excluded) for every token.
    pub argmax: Vec<usize>,
}

/// `−Σⱼ idf(tⱼ)·maxᵢ cos(sᵢ, tⱼ) / Σⱼ idf(tⱼ)` over frames `frames`
/// (`n × h`) and tokens `tokens` (`m × h`), both without `[CLS]`.
///
/// Gradient reaches only the argmax frame of each token; ties go to the
/// lowest frame index.
pub fn loss_tok(tape: &mut Tape, frames: Var, tokens: Var, idf: &[f64], uniform_fallback: bool) -> Result<TokLoss> {
    let (n, hs) = tape.shape(frames);
    let (m, ht) = tape.shape(tokens);
    if hs != ht {
        return Err(Error::Contract(format!("hidden sizes {hs} and {ht} differ")));
    }
    if n == 0 || m == 0 {
        return Err(Error::Contract(format!("need frames and tokens, got n={n}, m={m}")));
    }
    if idf.len() != m {
        return Err(Error::Contract(format!("{} idf weights for {m} tokens", idf.len())));
    }
    if idf.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Contract("idf weights must be finite and non-negative".into()));
    }
    let mut weights = idf.to_vec();
    let mut total: f64 = weights.iter().sum();
    if total == 0.0 {
        if !uniform_fallback {
            return Err(Error::DegenerateWeights);
        }
        weights = vec![1.0; m];
        total = m as f64;
    }
    let s = tape.row_normalize(frames, COS_FLOOR)?;
    let t = tape.row_normalize(tokens, COS_FLOOR)?;
    let cos = tape.matmul_bt(t, s)?;
    let best = tape.row_max(cos)?;
    let argmax = tape.argmax_of(best).expect("row_max node").to_vec();
    let w = tape.constant(Tensor2D::new(m, 1, weights)?);
    let weighted = tape.mul(best, w)?;
    let sum = tape.sum(weighted)?;
    let loss = tape.scale(sum, -1.0 / total)?;
    Ok(TokLoss { loss, argmax })
}

fn split_cls(tape: &mut Tape, x: &Tensor2D) -> Result<(Var, Var)> {
    if x.rows() < 2 {
        return Err(Error::Contract("encoding needs [CLS] plus at least one row".into()));
    }
    let v = tape.constant(x.clone());
    Ok((tape.slice_rows(v, 0, 1)?, tape.slice_rows(v, 1, x.rows() - 1)?))
}

pub fn loss_seq_value(pair: &AlignedPair, mean_per_dim: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let (s0, _) = split_cls(&mut tape, &pair.speech)?;
    let (t0, _) = split_cls(&mut tape, &pair.text)?;
    let l = loss_seq(&mut tape, s0, t0, mean_per_dim)?;
    Ok(tape.value(l).item())
}

pub fn loss_tok_value(pair: &AlignedPair, uniform_fallback: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, s) = split_cls(&mut tape, &pair.speech)?;
    let (_, t) = split_cls(&mut tape, &pair.text)?;
    let l = loss_tok(&mut tape, s, t, &pair.idf, uniform_fallback)?;
    Ok(tape.value(l.loss).item())
}

/// Per-pair dump of the `n × m` cosine matrix and each token's best frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDump {
    pub pair_id: String,
    /// `cosine[i][j]` between speech frame `i` and text token `j`.
    pub cosine: Vec<Vec<f64>>,
    pub argmax_frames: Vec<usize>,
    pub idf: Vec<f64>,
    pub loss_tok: f64,
}

pub fn alignment_dump(pair: &AlignedPair, uniform_fallback: bool) -> Result<AlignmentDump> {
    let mut tape = Tape::new();
    let (_, s) = split_cls(&mut tape, &pair.speech)?;
    let (_, t) = split_cls(&mut tape, &pair.text)?;
    let l = loss_tok(&mut tape, s, t, &pair.idf, uniform_fallback)?;
    let sn = tape.row_normalize(s, COS_FLOOR)?;
    let tn = tape.row_normalize(t, COS_FLOOR)?;
    let cos = tape.matmul_bt(sn, tn)?;
    let c = tape.value(cos);
    Ok(AlignmentDump {
        pair_id: pair.pair_id.clone(),
        cosine: (0..c.rows()).map(|i| c.row(i).to_vec()).collect(),
        argmax_frames: l.argmax,
        idf: pair.idf.clone(),
        loss_tok: tape.value(l.loss).item(),
    })
}

/// Share of speech `[CLS]` rows whose nearest text `[CLS]` row in L1
/// distance belongs to a pair with the same transcript. Pairs sharing a
/// transcript count as correct matches for each other.
pub fn retrieval_top1(speech_cls: &[Vec<f64>], text_cls: &[Vec<f64>], transcripts: &[String]) -> Result<f64> {
    if speech_cls.len() != text_cls.len() || speech_cls.len() != transcripts.len() || speech_cls.is_empty() {
        return Err(Error::Contract(format!(
            "{} speech rows, {} text rows, {} transcripts",
            speech_cls.len(),
            text_cls.len(),
            transcripts.len()
        )));
    }
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let hits = speech_cls
        .iter()
        .zip(transcripts)
        .filter(|(s, want)| {
            let best = text_cls
                .iter()
                .enumerate()
                .map(|(j, t)| (l1(s, t), j))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map_or(0, |(_, j)| j);
            &transcripts[best] == *want
        })
        .count();
    Ok(hits as f64 / speech_cls.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(speech: Vec<Vec<f64>>, text: Vec<Vec<f64>>, idf: Vec<f64>) -> AlignedPair {
        AlignedPair {
            pair_id: "p".into(),
            speech: Tensor2D::from_rows(&speech).unwrap(),
            text: Tensor2D::from_rows(&text).unwrap(),
            idf,
        }
    }

    #[test]
    fn retrieval_counts_nearest_transcripts() {
        let s = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![1.0, 0.0]];
        let t = vec![vec![0.1, 0.0], vec![4.0, 5.0], vec![9.0, 9.0]];
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert!((retrieval_top1(&s, &t, &names).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let dup = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        assert_eq!(retrieval_top1(&s, &t, &dup).unwrap(), 1.0);
        assert!(retrieval_top1(&s, &t[..2], &names).is_err());
    }

    #[test]
    fn seq_examples() {
        let p = pair(vec![vec![1.0, 2.0], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![1.0]);
        assert_eq!(loss_seq_value(&p, false).unwrap(), 3.0);
        assert_eq!(loss_seq_value(&p, true).unwrap(), 1.5);
        let same = pair(vec![vec![1.0, 2.0], vec![0.0, 1.0]], vec![vec![1.0, 2.0], vec![1.0, 1.0]], vec![1.0]);
        assert_eq!(loss_seq_value(&same, false).unwrap(), 0.0);
        let neg = pair(vec![vec![-1.0, -2.0], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![1.0]);
        assert_eq!(loss_seq_value(&neg, false).unwrap(), 3.0);
    }

    #[test]
    fn seq_rejects_hidden_mismatch() {
        let p = pair(vec![vec![1.0, 2.0], vec![0.0, 0.0]], vec![vec![0.0], vec![1.0]], vec![1.0]);
        assert!(matches!(loss_seq_value(&p, false), Err(Error::Contract(_))));
    }

    #[test]
    fn tok_perfect_match_is_minus_one() {
        let p = pair(
            vec![vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![5.0, 5.0], vec![1.0, 0.0]],
            vec![1.0],
        );
        assert_eq!(loss_tok_value(&p, false).unwrap(), -1.0);
    }

    #[test]
    fn tok_weighted_example() {
        // token 1 matches frame exactly, token 2 best cosine 0.5
        let t2 = vec![0.5, (0.75f64).sqrt()];
        let p = pair(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 0.0], vec![1.0, 0.0], t2],
            vec![2f64.ln(), 4f64.ln()],
        );
        let l = loss_tok_value(&p, false).unwrap();
        assert!((l + 2.0 / 3.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_speech_frame_has_zero_cosine() {
        let p = pair(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![vec![0.0, 0.0], vec![0.3, -0.2]],
            vec![1.0],
        );
        assert_eq!(loss_tok_value(&p, false).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_idf_needs_fallback() {
        let p = pair(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.0]);
        assert!(matches!(loss_tok_value(&p, false), Err(Error::DegenerateWeights)));
        assert_eq!(loss_tok_value(&p, true).unwrap(), -1.0);
    }

    #[test]
    fn dump_is_frames_by_tokens() {
        let p = pair(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![vec![0.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]],
            vec![1.0, 1.0],
        );
        let d = alignment_dump(&p, false).unwrap();
        assert_eq!(d.cosine.len(), 3);
        assert_eq!(d.cosine[0].len(), 2);
        assert_eq!(d.argmax_frames, vec![1, 0]);
        assert_eq!(d.loss_tok, -1.0);
    }
}
