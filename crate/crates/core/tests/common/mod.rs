//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechalign::numerics::Tensor2D;
use speechalign::synthdata::{generate, SynthCorpus, SynthSpec, TaskKind};
use speechalign::trainer::TrainConfig;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489;

/// Normal-approximation 99% interval for the count of successes.
pub fn binomial_ci99(n: usize, p: f64) -> (f64, f64) {
    let half = Z99 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// `−Σ idf_j · max_i cos(s_i, t_j) / Σ idf_j` by explicit enumeration of
/// every frame/token pair.
pub fn tok_brute_force(frames: &[Vec<f64>], tokens: &[Vec<f64>], idf: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut num = 0.0;
    for (t, w) in tokens.iter().zip(idf) {
        let mut best = f64::NEG_INFINITY;
        for s in frames {
            let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
            best = best.max(dot / (norm(s) * norm(t)));
        }
        num += w * best;
    }
    -num / idf.iter().sum::<f64>()
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Rows with a `[CLS]` row of zeros prepended.
pub fn with_cls(rows: &[Vec<f64>]) -> Tensor2D {
    let mut all = vec![vec![0.0; rows[0].len()]];
    all.extend(rows.iter().cloned());
    Tensor2D::from_rows(&all).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A few dozen utterances, enough for seconds-long pipeline runs.
pub fn small_corpus(task: TaskKind, seed: u64) -> SynthCorpus {
    generate(&SynthSpec {
        pretrain_utterances: 40,
        train_utterances: 20,
        valid_utterances: 10,
        test_utterances: 10,
        task,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        lr: 3e-3,
        speech_steps: 15,
        text_steps: 10,
        align_steps: 10,
        speech_batch: 4,
        text_batch: 4,
        align_batch: 4,
        paired_fraction: 0.5,
        hidden: 16,
        speech_layers: 1,
        text_layers: 1,
        speech_heads: 2,
        text_heads: 2,
        speech_ff: 32,
        text_ff: 32,
        ..TrainConfig::default()
    }
}
