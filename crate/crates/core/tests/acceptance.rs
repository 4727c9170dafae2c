//! Acceptance criteria 1 to 10, one test and one pass/fail line each.
//!
//! Criteria 4 to 8 share one desk-scale pipeline run (`configs/desk.toml`,
//! seeds 0, 1 and 2), computed once by whichever of them runs first. It
//! takes about 18 minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use speechalign::ablation::{pretrain_variants, run_cell, Splits};
use speechalign::alignment::{loss_tok_value, retrieval_top1, AlignedPair};
use speechalign::config::RunConfig;
use speechalign::downstream::{aos, FrameSpan};
use speechalign::features::{read_features, write_features};
use speechalign::gradsuite::run_suite;
use speechalign::masking::plan_masks;
use speechalign::numerics::GradCheckOptions;
use speechalign::synthdata::{generate, SynthSpec, TaskKind};
use speechalign::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Stage, Trainer, Variant};
use speechalign::Error;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        id,
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let suite = run_suite(0, GradCheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = suite.iter().map(|e| e.report.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = suite.iter().filter(|e| !e.passed()).map(|e| e.loss.name()).collect();
    let pass = failed.is_empty() && suite.len() == 8 && elapsed <= Duration::from_secs(300);
    verdict(1, pass, format!("{} losses, max rel error {worst:.2e}, failed {failed:?}, {elapsed:.1?}", suite.len()))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = common::rng(2024);
    let mut worst = 0.0f64;
    let cases = 300;
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=12);
        let h = rng.random_range(1..=10);
        let frames = common::random_rows(&mut rng, n, h);
        let tokens = common::random_rows(&mut rng, m, h);
        let idf: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..4.0)).collect();
        let pair = AlignedPair {
            pair_id: format!("{case}"),
            speech: common::with_cls(&frames),
            text: common::with_cls(&tokens),
            idf: idf.clone(),
        };
        let got = loss_tok_value(&pair, false).unwrap();
        worst = worst.max((got - common::tok_brute_force(&frames, &tokens, &idf)).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed <= Duration::from_secs(60);
    verdict(2, pass, format!("{cases} instances, max abs diff {worst:.1e}, {elapsed:.1?}"))
}

fn criterion_3() -> Verdict {
    let (mut n_t, mut n_c, mut k_t, mut k_c) = (0, 0, 0, 0);
    for seed in 0..250 {
        let plan = plan_masks(500, 500, 0.15, 0.15, 10_000 + seed).unwrap();
        n_t += plan.frames;
        n_c += plan.channels;
        k_t += plan.masked_time_indices.len();
        k_c += plan.masked_channel_indices.len();
    }
    let inside = |k: usize, n: usize| {
        let (lo, hi) = common::binomial_ci99(n, 0.15);
        let r = k as f64 / n as f64;
        (lo <= r && r <= hi, r)
    };
    let (ok_t, r_t) = inside(k_t, n_t);
    let (ok_c, r_c) = inside(k_c, n_c);
    let pass = ok_t && ok_c && n_t >= 100_000 && n_c >= 100_000;
    verdict(3, pass, format!("time {r_t:.4} over {n_t}, channel {r_c:.4} over {n_c}"))
}

/// Metric values keyed by (variant, task, fraction in percent), one entry
/// per seed.
type Cells = BTreeMap<(Variant, TaskKind, u32), Vec<f64>>;

struct DeskRun {
    stage1_ratio: f64,
    stage1_steps: usize,
    retrieval: Vec<(usize, f64)>,
    cells: Cells,
}

const DESK_VARIANTS: [Variant; 5] = [Variant::Scratch, Variant::Speech, Variant::Seq, Variant::SeqMlm, Variant::Tok];

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(desk_run)
}

fn desk_run() -> DeskRun {
    let cfg = RunConfig::load(Path::new(DESK)).unwrap();
    let mut cells = Cells::new();
    let mut retrieval = Vec::new();
    let (mut stage1_ratio, mut stage1_steps) = (f64::NAN, 0);
    for seed in [0u64, 1, 2] {
        let spec = SynthSpec { seed, ..cfg.synth_spec() };
        let kw = generate(&SynthSpec { task: TaskKind::KeywordClass, ..spec.clone() }).unwrap();
        let sp = generate(&SynthSpec { task: TaskKind::SpanLocate, ..spec }).unwrap();
        let train_cfg = speechalign::trainer::TrainConfig { seed, ..cfg.train() };
        let fine_cfg = speechalign::downstream::FinetuneConfig { seed, ..cfg.finetune() };
        let start = Instant::now();
        for (variant, trainer) in pretrain_variants(&kw.pretrain, &DESK_VARIANTS, &train_cfg).unwrap() {
            if seed == 0 && variant == Variant::Speech {
                let losses: Vec<f64> = trainer.log().iter().filter(|r| r.stage == Stage::SpeechMlm).map(|r| r.loss).collect();
                let tail = &losses[losses.len().saturating_sub(50)..];
                stage1_ratio = tail.iter().sum::<f64>() / tail.len() as f64 / losses[0];
                stage1_steps = losses.len();
            }
            if variant == Variant::Seq {
                let cls = trainer.paired_cls().unwrap();
                retrieval.push((cls.transcripts.len(), retrieval_top1(&cls.speech, &cls.text, &cls.transcripts).unwrap()));
            }
            let ckpt = trainer.checkpoint().unwrap();
            for (task, corpus, fractions) in [(TaskKind::KeywordClass, &kw, &[1.0, 0.1][..]), (TaskKind::SpanLocate, &sp, &[1.0][..])] {
                for &fraction in fractions {
                    let (report, _) = run_cell(&ckpt, variant, task, &Splits::of(corpus), fraction, &fine_cfg).unwrap();
                    println!("  seed {seed} {:<8} {:<13} @{fraction:<4} {:.3}", variant.name(), task.name(), report.value);
                    cells.entry((variant, task, (fraction * 100.0).round() as u32)).or_default().push(report.value);
                }
            }
        }
        println!("  seed {seed} done in {:.0?}", start.elapsed());
    }
    DeskRun {
        stage1_ratio,
        stage1_steps,
        retrieval,
        cells,
    }
}

/// 3-seed mean in points.
fn mean(cells: &Cells, variant: Variant, task: TaskKind, percent: u32) -> f64 {
    let v = &cells[&(variant, task, percent)];
    assert_eq!(v.len(), 3);
    100.0 * v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_4(run: &DeskRun) -> Verdict {
    let pass = run.stage1_ratio < 0.2 && run.stage1_steps <= 2000;
    verdict(4, pass, format!("final/initial L_sp {:.3} after {} steps", run.stage1_ratio, run.stage1_steps))
}

fn criterion_5(run: &DeskRun) -> Verdict {
    let pass = run.retrieval.iter().all(|&(n, acc)| n >= 50 && acc >= 0.9);
    verdict(5, pass, format!("(pairs, top-1) per seed {:?}", run.retrieval))
}

fn criterion_6(run: &DeskRun) -> Verdict {
    let kw = |v| mean(&run.cells, v, TaskKind::KeywordClass, 10);
    let span = |v| mean(&run.cells, v, TaskKind::SpanLocate, 100);
    let (mlm, speech, scratch) = (kw(Variant::SeqMlm), kw(Variant::Speech), kw(Variant::Scratch));
    let (tok, span_scratch) = (span(Variant::Tok), span(Variant::Scratch));
    let pass = mlm >= speech && speech >= scratch && mlm - scratch >= 5.0 && tok >= span_scratch + 5.0;
    verdict(
        6,
        pass,
        format!(
            "kw@0.1 seq-mlm {mlm:.1} speech {speech:.1} scratch {scratch:.1}; span tok {tok:.1} scratch {span_scratch:.1}"
        ),
    )
}

fn criterion_7(run: &DeskRun) -> Verdict {
    let drop = |v| mean(&run.cells, v, TaskKind::KeywordClass, 100) - mean(&run.cells, v, TaskKind::KeywordClass, 10);
    let (mlm, scratch) = (drop(Variant::SeqMlm), drop(Variant::Scratch));
    verdict(7, mlm < scratch, format!("1.0 -> 0.1 drop seq-mlm {mlm:.1}, scratch {scratch:.1}"))
}

fn criterion_8(run: &DeskRun) -> Verdict {
    let kw = |v| mean(&run.cells, v, TaskKind::KeywordClass, 100);
    let span = |v| mean(&run.cells, v, TaskKind::SpanLocate, 100);
    let (kw_seq, kw_tok, sp_seq, sp_tok) = (kw(Variant::Seq), kw(Variant::Tok), span(Variant::Seq), span(Variant::Tok));
    let pass = kw_seq >= kw_tok - 1.0 && sp_tok >= sp_seq - 1.0;
    verdict(8, pass, format!("kw@1.0 seq {kw_seq:.1} tok {kw_tok:.1}; span seq {sp_seq:.1} tok {sp_tok:.1}"))
}

fn criterion_9() -> Verdict {
    let span = |s, e| FrameSpan::new(s, e).unwrap();
    let examples = aos(span(3, 7), span(3, 7)) == 1.0
        && aos(span(0, 1), span(5, 9)) == 0.0
        && aos(span(0, 4), span(2, 6)) == 3.0 / 7.0;
    let mut rng = common::rng(9);
    let mut random = || {
        let s = rng.random_range(0..40);
        span(s, s + rng.random_range(0..15))
    };
    let mut violations = 0;
    for _ in 0..1000 {
        let (a, b) = (random(), random());
        let disjoint = a.end < b.start || b.end < a.start;
        if aos(a, b) != aos(b, a) || aos(a, a) != 1.0 || (aos(a, b) == 0.0) != disjoint || aos(a, b) > 1.0 || (aos(a, b) == 1.0) != (a == b) {
            violations += 1;
        }
    }
    verdict(9, examples && violations == 0, format!("examples {examples}, {violations} property violations in 1000 pairs"))
}

fn end_to_end(dir: &Path) -> Vec<u8> {
    let corpus = common::small_corpus(TaskKind::KeywordClass, 8);
    corpus.write(dir).unwrap();
    let mut t = Trainer::new(&corpus.pretrain, Variant::SeqMlm, common::small_train_config(8)).unwrap();
    t.run().unwrap();
    let fine = speechalign::downstream::FinetuneConfig {
        seed: 8,
        epochs: 2,
        batch: 4,
        head_hidden: 16,
        ..Default::default()
    };
    let (_, out) = run_cell(&t.checkpoint().unwrap(), Variant::SeqMlm, TaskKind::KeywordClass, &Splits::of(&corpus), 1.0, &fine).unwrap();
    save_checkpoint(&dir.join("pre.alnc"), &t.checkpoint().unwrap()).unwrap();
    save_checkpoint(&dir.join("fine.alnc"), &out.checkpoint).unwrap();
    let mut all = Vec::new();
    for name in ["pretrain.jsonl", "train.jsonl", "test.jsonl", "pre.alnc", "fine.alnc"] {
        all.extend(fs::read(dir.join(name)).unwrap());
    }
    for u in &corpus.pretrain {
        all.extend(fs::read(dir.join(&u.record.feature_path)).unwrap());
    }
    all
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let first = end_to_end(&tmp.path().join("a"));
    let rerun = first == end_to_end(&tmp.path().join("b"));

    let path = tmp.path().join("a/fine.alnc");
    let bytes = fs::read(&path).unwrap();
    let ckpt_round_trip = load_checkpoint(&path).unwrap().to_bytes() == bytes;
    let corrupt_ckpt = [bytes.len() - 1, 20, 8]
        .into_iter()
        .all(|i| {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            matches!(Checkpoint::from_bytes(&b), Err(Error::Integrity(_) | Error::Version { .. }))
        })
        && matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_)));

    let corpus = common::small_corpus(TaskKind::KeywordClass, 8);
    let feat_path = tmp.path().join("a").join(&corpus.pretrain[0].record.feature_path);
    let fbytes = fs::read(&feat_path).unwrap();
    let mut again = Vec::new();
    write_features(&mut again, &read_features(&mut fbytes.as_slice()).unwrap()).unwrap();
    let feat_round_trip = again == fbytes;
    let mut bad_magic = fbytes.clone();
    bad_magic[1] = b'Z';
    let corrupt_feat = matches!(read_features(&mut &fbytes[..fbytes.len() - 1]), Err(Error::Integrity(_)))
        && matches!(read_features(&mut bad_magic.as_slice()), Err(Error::Integrity(_)));

    let pass = rerun && ckpt_round_trip && corrupt_ckpt && feat_round_trip && corrupt_feat;
    verdict(
        10,
        pass,
        format!(
            "rerun identical {rerun}, checkpoint round trip {ckpt_round_trip}, corrupt checkpoint rejected {corrupt_ckpt}, \
             feature round trip {feat_round_trip}, corrupt feature file rejected {corrupt_feat}"
        ),
    )
}

fn check(v: Verdict) {
    println!("criterion {:>2}: {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    assert!(v.pass, "criterion {} failed: {}", v.id, v.detail);
}

#[test]
fn criterion_01_gradient_correctness() {
    check(criterion_1());
}

#[test]
fn criterion_02_token_alignment_oracle() {
    check(criterion_2());
}

#[test]
fn criterion_03_mask_statistics() {
    check(criterion_3());
}

#[test]
fn criterion_04_learnability() {
    check(criterion_4(desk()));
}

#[test]
fn criterion_05_alignment_retrieval() {
    check(criterion_5(desk()));
}

#[test]
fn criterion_06_pretraining_helps_low_resource() {
    check(criterion_6(desk()));
}

#[test]
fn criterion_07_data_efficiency() {
    check(criterion_7(desk()));
}

#[test]
fn criterion_08_task_match() {
    check(criterion_8(desk()));
}

#[test]
fn criterion_09_aos() {
    check(criterion_9());
}

#[test]
fn criterion_10_persistence() {
    check(criterion_10());
}
