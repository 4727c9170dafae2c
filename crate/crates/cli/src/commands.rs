use std::collections::BTreeSet;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use speechalign::ablation::{cell_name, pretrain_variants, run_cell, Splits};
use speechalign::config::RunConfig;
use speechalign::downstream::{render_table, Classifier, Head, MetricsReport, SpanModel, CLASSIFIER_PREFIX};
use speechalign::features::{fit_speaker_stats, read_wav, write_features_file, LogMel, SpeakerStats};
use speechalign::gradsuite::run_suite;
use speechalign::manifest::{load_utterances, write_manifest_file, ManifestRecord};
use speechalign::numerics::GradCheckOptions;
use speechalign::synthdata::generate;
use speechalign::text::write_vocab;
use speechalign::trainer::{load_checkpoint, save_checkpoint, write_loss_log, Checkpoint, Trainer, Variant};
use speechalign::{Error, Result};

use crate::artifacts::{json_files, recorded_version};

pub const REPORT_SUFFIX: &str = ".metrics.json";

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = generate(&cfg.synth_spec())?;
    corpus.write(out)?;
    log::info!(
        "wrote {} pretrain, {} train, {} valid, {} test utterances to {}",
        corpus.pretrain.len(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// One line of an audio manifest.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AudioRecord {
    utterance_id: String,
    speaker_id: String,
    audio_path: String,
    transcript: String,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    answer_span_frames: Option<[usize; 2]>,
    #[serde(default)]
    question: Option<String>,
}

fn read_audio_manifest(path: &Path) -> Result<Vec<AudioRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn features(cfg: &RunConfig, audio: &Path, stats: Option<&Path>, out: &Path) -> Result<()> {
    let records = read_audio_manifest(audio)?;
    let base = audio.parent().unwrap_or(Path::new("."));
    let mel = LogMel::new(cfg.log_mel())?;
    let mut raw = Vec::with_capacity(records.len());
    for r in &records {
        let path = base.join(&r.audio_path);
        let (samples, rate) = read_wav(&path)?;
        raw.push(mel.compute(&samples, rate, &r.utterance_id, &r.speaker_id)?);
    }
    let table = match stats {
        Some(path) => {
            let list: Vec<SpeakerStats> = serde_json::from_slice(&fs::read(path)?)?;
            list.into_iter().map(|s| (s.speaker_id.clone(), s)).collect()
        }
        None => {
            let fitted = fit_speaker_stats(&raw)?;
            let list: Vec<&SpeakerStats> = fitted.values().collect();
            fs::write(out.join("speaker_stats.json"), serde_json::to_string_pretty(&list)?)?;
            fitted
        }
    };
    fs::create_dir_all(out.join("features"))?;
    let mut manifest = Vec::with_capacity(records.len());
    for (r, f) in records.into_iter().zip(&raw) {
        let s = table
            .get(&r.speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(r.speaker_id.clone()))?;
        let feature_path = format!("features/{}.alnf", r.utterance_id);
        write_features_file(&out.join(&feature_path), &s.apply(f)?)?;
        manifest.push(ManifestRecord {
            utterance_id: r.utterance_id,
            speaker_id: r.speaker_id,
            feature_path,
            transcript: r.transcript,
            label: r.label,
            answer_span_frames: r.answer_span_frames,
            question: r.question,
        });
    }
    write_manifest_file(&out.join("manifest.jsonl"), &manifest)?;
    log::info!("wrote {} feature files to {}", manifest.len(), out.display());
    Ok(())
}

fn save_pretrained(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join("checkpoint.alnc"), &trainer.checkpoint()?)?;
    let mut log = Vec::new();
    write_loss_log(&mut log, trainer.log())?;
    fs::write(dir.join("loss_log.csv"), log)?;
    let mut vocab = Vec::new();
    write_vocab(&mut vocab, trainer.vocab(), trainer.idf())?;
    fs::write(dir.join("vocab.tsv"), vocab)?;
    Ok(())
}

/// Runs every stage; on failure the last good state is still written.
pub fn pretrain(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let audio = load_utterances(manifest)?;
    let mut trainer = Trainer::new(&audio, cfg.variant, cfg.train())?;
    let result = trainer.run();
    save_pretrained(&trainer, out)?;
    if result.is_ok() {
        log::info!("{} pre-training finished after {} logged steps", cfg.variant, trainer.log().len());
    }
    result
}

fn checkpoint_variant(ckpt: &Checkpoint, fallback: Variant) -> Variant {
    serde_json::from_str::<serde_json::Value>(&ckpt.config)
        .ok()
        .and_then(|v| v.get("variant")?.as_str()?.parse().ok())
        .unwrap_or(fallback)
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn finetune(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let splits = Splits::load(data)?;
    let variant = checkpoint_variant(&ckpt, cfg.variant);
    let (report, outcome) = run_cell(&ckpt, variant, cfg.task, &splits, cfg.fraction, &cfg.finetune())?;
    save_checkpoint(&out.join("finetuned.alnc"), &outcome.checkpoint)?;
    let stem = cell_name(variant, cfg.task, cfg.fraction, cfg.seed);
    write_report(&out.join(format!("{stem}{REPORT_SUFFIX}")), &report)?;
    fs::write(out.join("valid_history.csv"), history_csv(&outcome.valid_history))?;
    println!(
        "{variant} {} @{}: test {} {:.4} (best epoch {})",
        cfg.task, cfg.fraction, report.metric_name, report.value, report.best_epoch
    );
    Ok(())
}

fn history_csv(values: &[f64]) -> String {
    let mut s = String::from("epoch,valid\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{v}\n", i + 1));
    }
    s
}

#[derive(Serialize)]
struct Evaluation<'a> {
    checkpoint: &'a Path,
    manifest: &'a Path,
    utterances: usize,
    metric_name: &'a str,
    value: f64,
}

pub fn evaluate(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let utts = load_utterances(manifest)?;
    let head: Box<dyn Head> = if ckpt.params.keys().any(|k| k.starts_with(CLASSIFIER_PREFIX)) {
        Box::new(Classifier::from_checkpoint(&ckpt)?)
    } else {
        Box::new(SpanModel::from_checkpoint(&ckpt)?)
    };
    let value = head.metric(&utts)?;
    let eval = Evaluation {
        checkpoint,
        manifest,
        utterances: utts.len(),
        metric_name: head.metric_name(),
        value,
    };
    fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&eval)?)?;
    println!("{} {:.4} over {} utterances", eval.metric_name, value, utts.len());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let opts = GradCheckOptions {
        eps: cfg.gradcheck_eps,
        tol: cfg.gradcheck_tol,
        max_entries_per_param: None,
    };
    let suite = run_suite(cfg.seed, opts)?;
    fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&suite)?)?;
    for e in &suite {
        println!(
            "{:<20} {} max rel error {:.3e} (instance seed {})",
            e.loss.name(),
            if e.passed() { "ok  " } else { "FAIL" },
            e.report.max_rel_error(),
            e.instance_seed
        );
    }
    for e in suite {
        e.report.into_result()?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let audio = load_utterances(&data.join("pretrain.jsonl"))?;
    let splits = Splits::load(data)?;
    let seeds = if cfg.ablate_seeds.is_empty() { vec![cfg.seed] } else { cfg.ablate_seeds.clone() };
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let mut reports = Vec::new();
    for &seed in &seeds {
        let train_cfg = speechalign::trainer::TrainConfig { seed, ..cfg.train() };
        let fine_cfg = speechalign::downstream::FinetuneConfig { seed, ..cfg.finetune() };
        for (variant, trainer) in pretrain_variants(&audio, &cfg.ablate_variants, &train_cfg)? {
            save_pretrained(&trainer, &out.join("pretrain").join(format!("{variant}_{seed}")))?;
            let ckpt = trainer.checkpoint()?;
            for &fraction in &cfg.ablate_fractions {
                let (report, _) = run_cell(&ckpt, variant, cfg.task, &splits, fraction, &fine_cfg)?;
                let stem = cell_name(variant, cfg.task, fraction, seed);
                write_report(&reports_dir.join(format!("{stem}{REPORT_SUFFIX}")), &report)?;
                log::info!("{stem}: {} {:.4}", report.metric_name, report.value);
                reports.push(report);
            }
        }
    }
    let table = render_table(&reports);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Every metrics report under `dir` with the tool version recorded for it.
fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, String, MetricsReport)>> {
    let mut out = Vec::new();
    for path in json_files(dir)? {
        if !path.to_string_lossy().ends_with(REPORT_SUFFIX) {
            continue;
        }
        let report: MetricsReport = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let version = recorded_version(path.parent().unwrap_or(dir), dir)?;
        out.push((path, version, report));
    }
    Ok(out)
}

pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut found = Vec::new();
    for d in dirs {
        found.extend(collect_reports(d)?);
    }
    if found.is_empty() {
        return Err(Error::Input("no metrics reports found".into()));
    }
    let versions: BTreeSet<&str> = found.iter().map(|(_, v, _)| v.as_str()).collect();
    if versions.len() > 1 {
        return Err(Error::Integrity(format!("reports come from mixed tool versions: {versions:?}")));
    }
    let reports: Vec<MetricsReport> = found.into_iter().map(|(_, _, r)| r).collect();
    let table = render_table(&reports);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("table.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}
