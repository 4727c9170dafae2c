//! Deterministic synthetic paired speech/text corpora.
//!
//! Every vocabulary word owns a fixed `T × d` spectrogram-like template. An
//! utterance is the concatenation of its words' templates plus Gaussian
//! noise, and its transcript is the word sequence. Word order follows a
//! sparse bigram chain so that both modalities carry context.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_features_file, FeatureMatrix};
use crate::manifest::{write_manifest_file, ManifestRecord, Utterance};
use crate::numerics::Tensor2D;

const WORDS: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
];

/// Probability of following the bigram chain rather than jumping uniformly.
const CHAIN_PROB: f64 = 0.8;
const SUCCESSORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Each utterance holds exactly one of `num_classes` keywords; the label
    /// is which one.
    #[default]
    KeywordClass,
    /// The question names one word of the utterance; the answer is its
    /// frame range.
    SpanLocate,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::KeywordClass => "keyword-class",
            TaskKind::SpanLocate => "span-locate",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::KeywordClass, TaskKind::SpanLocate]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub template_frames: usize,
    pub channels: usize,
    pub noise: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub pretrain_utterances: usize,
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub test_utterances: usize,
    pub num_classes: usize,
    pub speakers: usize,
    pub task: TaskKind,
    pub seed: u64,
    /// Minimum pairwise L2 distance between templates.
    pub template_floor: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            template_frames: 5,
            channels: 16,
            noise: 0.1,
            min_words: 3,
            max_words: 5,
            pretrain_utterances: 500,
            train_utterances: 200,
            valid_utterances: 50,
            test_utterances: 50,
            num_classes: 5,
            speakers: 4,
            task: TaskKind::KeywordClass,
            seed: 0,
            template_floor: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        if self.vocab_size < 2 {
            return fail("need at least two words");
        }
        if self.template_frames == 0 || self.channels == 0 {
            return fail("templates need frames and channels");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail("word count range is empty");
        }
        if self.speakers == 0 {
            return fail("need at least one speaker");
        }
        match self.task {
            TaskKind::KeywordClass => {
                if self.num_classes < 2 || self.num_classes >= self.vocab_size {
                    return fail("keyword classes must leave filler words");
                }
            }
            TaskKind::SpanLocate => {
                if self.max_words > self.vocab_size {
                    return fail("span utterances use distinct words");
                }
            }
        }
        Ok(())
    }

    pub fn word(&self, i: usize) -> String {
        WORDS.get(i).map_or_else(|| format!("w{i}"), |w| w.to_string())
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub words: Vec<String>,
    /// One `template_frames × channels` pattern per word.
    pub templates: Vec<Tensor2D>,
    pub pretrain: Vec<Utterance>,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn make_templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Tensor2D> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..spec.vocab_size)
        .map(|_| {
            let raw = Tensor2D::from_fn(spec.template_frames, spec.channels, |_, _| normal.sample(rng));
            // Box-smooth over neighbouring frames and channels, then rescale
            // to unit RMS.
            let (t_max, c_max) = (spec.template_frames - 1, spec.channels - 1);
            let smooth = Tensor2D::from_fn(spec.template_frames, spec.channels, |t, c| {
                let (t0, t1) = (t.saturating_sub(1), (t + 1).min(t_max));
                let (c0, c1) = (c.saturating_sub(1), (c + 1).min(c_max));
                let mut sum = 0.0;
                for tt in t0..=t1 {
                    for cc in c0..=c1 {
                        sum += raw.get(tt, cc);
                    }
                }
                sum / ((t1 - t0 + 1) * (c1 - c0 + 1)) as f64
            });
            let rms = (smooth.squared_norm() / smooth.len() as f64).sqrt().max(1e-12);
            smooth.map(|v| v / rms)
        })
        .collect()
}

fn min_pairwise_distance(templates: &[Tensor2D]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let d: f64 = templates[i]
                .data()
                .iter()
                .zip(templates[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

struct Grammar {
    successors: Vec<Vec<usize>>,
}

impl Grammar {
    fn new(vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let successors = (0..vocab)
            .map(|_| (0..SUCCESSORS.min(vocab)).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        Self { successors }
    }

    /// Samples `len` words from `allowed`, never repeating a word when
    /// `distinct` is set.
    fn sample(&self, len: usize, allowed: &[usize], distinct: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let ok = |w: &usize| allowed.contains(w) && !(distinct && out.contains(w));
            let next = out
                .last()
                .filter(|_| rng.random::<f64>() < CHAIN_PROB)
                .and_then(|&prev| {
                    let cands: Vec<usize> = self.successors[prev].iter().copied().filter(ok).collect();
                    cands.choose(rng).copied()
                });
            let next = match next {
                Some(w) => w,
                None => {
                    let pool: Vec<usize> = allowed.iter().copied().filter(ok).collect();
                    *pool.choose(rng).expect("validated spec leaves words available")
                }
            };
            out.push(next);
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Split {
    Pretrain,
    Train,
    Valid,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

fn render(spec: &SynthSpec, templates: &[Tensor2D], words: &[usize], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut values = Vec::with_capacity(words.len() * spec.template_frames * spec.channels);
    for &w in words {
        for &v in templates[w].data() {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            values.push((v + n) as f32);
        }
    }
    values
}

/// Builds the corpus. Identical specs give identical corpora.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = make_templates(spec, &mut rng);
    if min_pairwise_distance(&templates) < spec.template_floor {
        return Err(Error::Spec(format!(
            "templates closer than {} apart; use another seed or more channels",
            spec.template_floor
        )));
    }
    let grammar = Grammar::new(spec.vocab_size, &mut rng);
    let words: Vec<String> = (0..spec.vocab_size).map(|i| spec.word(i)).collect();
    let all: Vec<usize> = (0..spec.vocab_size).collect();
    let fillers: Vec<usize> = (spec.num_classes..spec.vocab_size).collect();

    let mut counter = 0usize;
    let mut make = |split: Split, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Utterance>> {
        (0..count)
            .map(|i| {
                let len = rng.random_range(spec.min_words..=spec.max_words);
                let mut record = ManifestRecord {
                    utterance_id: format!("{}-{i:05}", split.name()),
                    speaker_id: format!("spk{}", counter % spec.speakers),
                    feature_path: format!("features/{}-{i:05}.alnf", split.name()),
                    transcript: String::new(),
                    label: None,
                    answer_span_frames: None,
                    question: None,
                };
                counter += 1;
                let seq = match (split, spec.task) {
                    (Split::Pretrain, _) => grammar.sample(len, &all, false, rng),
                    (_, TaskKind::KeywordClass) => {
                        let mut seq = grammar.sample(len - 1, &fillers, false, rng);
                        let keyword = rng.random_range(0..spec.num_classes);
                        seq.insert(rng.random_range(0..=seq.len()), keyword);
                        record.label = Some(keyword);
                        seq
                    }
                    (_, TaskKind::SpanLocate) => {
                        let seq = grammar.sample(len, &all, true, rng);
                        let slot = rng.random_range(0..seq.len());
                        let start = slot * spec.template_frames;
                        record.answer_span_frames = Some([start, start + spec.template_frames - 1]);
                        record.question = Some(words[seq[slot]].clone());
                        seq
                    }
                };
                record.transcript = seq.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");
                let values = render(spec, &templates, &seq, rng);
                let features = FeatureMatrix::new(
                    record.utterance_id.clone(),
                    record.speaker_id.clone(),
                    seq.len() * spec.template_frames,
                    spec.channels,
                    values,
                )?;
                Ok(Utterance { record, features })
            })
            .collect()
    };
    let pretrain = make(Split::Pretrain, spec.pretrain_utterances, &mut rng)?;
    let train = make(Split::Train, spec.train_utterances, &mut rng)?;
    let valid = make(Split::Valid, spec.valid_utterances, &mut rng)?;
    let test = make(Split::Test, spec.test_utterances, &mut rng)?;
    Ok(SynthCorpus {
        spec: spec.clone(),
        words,
        templates,
        pretrain,
        train,
        valid,
        test,
    })
}

impl SynthCorpus {
    /// Writes `features/*.alnf`, one manifest per split and `synth_spec.toml`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("features"))?;
        for (name, split) in [
            ("pretrain", &self.pretrain),
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for u in split {
                write_features_file(&dir.join(&u.record.feature_path), &u.features)?;
            }
            let records: Vec<ManifestRecord> = split.iter().map(|u| u.record.clone()).collect();
            write_manifest_file(&dir.join(format!("{name}.jsonl")), &records)?;
        }
        fs::write(
            dir.join("synth_spec.toml"),
            toml::to_string(&self.spec).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(())
    }

    /// Identifies each template-sized block of `feats` by nearest template.
    pub fn nearest_template_words(&self, feats: &FeatureMatrix) -> Vec<usize> {
        let t = self.spec.template_frames;
        (0..feats.frames() / t)
            .map(|slot| {
                let block = &feats.values()[slot * t * self.spec.channels..(slot + 1) * t * self.spec.channels];
                (0..self.templates.len())
                    .min_by(|&a, &b| {
                        let da = sq_dist(block, self.templates[a].data());
                        let db = sq_dist(block, self.templates[b].data());
                        da.total_cmp(&db)
                    })
                    .unwrap()
            })
            .collect()
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind) -> SynthSpec {
        SynthSpec {
            pretrain_utterances: 20,
            train_utterances: 10,
            valid_utterances: 5,
            test_utterances: 5,
            task,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_single_word_is_its_template() {
        let spec = SynthSpec {
            noise: 0.0,
            min_words: 1,
            max_words: 1,
            ..small(TaskKind::SpanLocate)
        };
        let corpus = generate(&spec).unwrap();
        let u = &corpus.pretrain[0];
        let w = corpus.words.iter().position(|w| *w == u.record.transcript).unwrap();
        let expected: Vec<f32> = corpus.templates[w].data().iter().map(|&v| v as f32).collect();
        assert_eq!(u.features.values(), &expected[..]);
    }

    #[test]
    fn span_gold_follows_slot_arithmetic() {
        let corpus = generate(&small(TaskKind::SpanLocate)).unwrap();
        for u in corpus.train.iter().chain(&corpus.test) {
            let [start, end] = u.record.answer_span_frames.unwrap();
            let words: Vec<&str> = u.record.transcript.split(' ').collect();
            let slot = start / 5;
            assert_eq!(start, slot * 5);
            assert_eq!(end, start + 4);
            assert_eq!(words[slot], u.record.question.as_deref().unwrap());
        }
    }

    #[test]
    fn keyword_utterances_hold_exactly_one_keyword() {
        let spec = small(TaskKind::KeywordClass);
        let corpus = generate(&spec).unwrap();
        for u in &corpus.train {
            let keywords: Vec<usize> = u
                .record
                .transcript
                .split(' ')
                .filter_map(|w| corpus.words.iter().position(|x| x == w))
                .filter(|&i| i < spec.num_classes)
                .collect();
            assert_eq!(keywords, vec![u.record.label.unwrap()]);
        }
    }

    #[test]
    fn nearest_template_oracle_is_exact_without_noise() {
        let spec = SynthSpec {
            noise: 0.0,
            ..small(TaskKind::KeywordClass)
        };
        let corpus = generate(&spec).unwrap();
        for u in corpus.pretrain.iter().chain(&corpus.train) {
            let predicted: Vec<&str> = corpus
                .nearest_template_words(&u.features)
                .into_iter()
                .map(|i| corpus.words[i].as_str())
                .collect();
            assert_eq!(predicted.join(" "), u.record.transcript);
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let one_word = SynthSpec {
            vocab_size: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&one_word), Err(Error::Spec(_))));
        let too_close = SynthSpec {
            template_floor: 1e9,
            ..small(TaskKind::KeywordClass)
        };
        assert!(matches!(generate(&too_close), Err(Error::Spec(_))));
    }
}
