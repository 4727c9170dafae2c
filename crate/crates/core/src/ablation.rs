//! Variant × fraction × seed grids over one corpus.

use std::collections::BTreeMap;
use std::path::Path;

use crate::downstream::{finetune_classifier, finetune_span, subsample_training, FinetuneConfig, FinetuneOutcome, MetricsReport};
use crate::error::Result;
use crate::manifest::{load_utterances, Utterance};
use crate::synthdata::{SynthCorpus, TaskKind};
use crate::trainer::{Checkpoint, Stage, TrainConfig, Trainer, Variant};

/// Downstream splits of one task.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Splits {
    /// Reads `train.jsonl`, `valid.jsonl` and `test.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_utterances(&dir.join("train.jsonl"))?,
            valid: load_utterances(&dir.join("valid.jsonl"))?,
            test: load_utterances(&dir.join("test.jsonl"))?,
        })
    }

    pub fn of(corpus: &SynthCorpus) -> Self {
        Self {
            train: corpus.train.clone(),
            valid: corpus.valid.clone(),
            test: corpus.test.clone(),
        }
    }
}

/// Pre-trains every variant, running each shared stage prefix once.
pub fn pretrain_variants(audio: &[Utterance], variants: &[Variant], cfg: &TrainConfig) -> Result<Vec<(Variant, Trainer)>> {
    let mut cache: BTreeMap<Vec<Stage>, Trainer> = BTreeMap::new();
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let fresh = Trainer::new(audio, variant, cfg.clone())?;
        let planned = fresh.planned_stages();
        let start = (0..=planned.len())
            .rev()
            .find_map(|k| cache.get(&planned[..k]).map(|t| t.branch(variant)))
            .transpose()?;
        let mut trainer = start.unwrap_or(fresh);
        for &stage in &planned[trainer.completed().len()..] {
            trainer.run_stage(stage)?;
            if stage != Stage::Joint {
                cache.insert(trainer.completed().to_vec(), trainer.clone());
            }
        }
        out.push((variant, trainer));
    }
    Ok(out)
}

/// Fine-tunes `ckpt` on a `fraction` subsample of the training split.
pub fn run_cell(
    ckpt: &Checkpoint,
    variant: Variant,
    task: TaskKind,
    splits: &Splits,
    fraction: f64,
    cfg: &FinetuneConfig,
) -> Result<(MetricsReport, FinetuneOutcome)> {
    let train = subsample_training(&splits.train, fraction, cfg.seed)?;
    let outcome = match task {
        TaskKind::KeywordClass => finetune_classifier(ckpt, &train, &splits.valid, &splits.test, cfg)?.1,
        TaskKind::SpanLocate => finetune_span(ckpt, &train, &splits.valid, &splits.test, cfg)?.1,
    };
    let report = MetricsReport {
        variant: variant.name().to_string(),
        task: task.name().to_string(),
        fraction,
        seed: cfg.seed,
        metric_name: outcome.metric_name.to_string(),
        value: outcome.test_value,
        best_epoch: outcome.best_epoch,
    };
    Ok((report, outcome))
}

/// Stem naming one grid cell.
pub fn cell_name(variant: Variant, task: TaskKind, fraction: f64, seed: u64) -> String {
    format!("{variant}_{task}_{fraction}_{seed}")
}
