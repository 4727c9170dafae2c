use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Lower bound on per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and population standard deviation of one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub speaker_id: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frame_count: usize,
}

impl SpeakerStats {
    /// Standardizes one utterance. Rejects already-normalized input and
    /// utterances from a different speaker.
    pub fn apply(&self, feats: &FeatureMatrix) -> Result<FeatureMatrix> {
        if feats.normalized {
            return Err(Error::AlreadyNormalized(feats.utterance_id.clone()));
        }
        if feats.speaker_id != self.speaker_id {
            return Err(Error::UnknownSpeaker(feats.speaker_id.clone()));
        }
        if feats.channels() != self.mean.len() {
            return Err(Error::shape(
                "speaker_normalize",
                format!("{} channels vs {} in stats", feats.channels(), self.mean.len()),
            ));
        }
        let mut out = feats.clone();
        let d = feats.channels();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        out.normalized = true;
        Ok(out)
    }
}

/// Computes stats per speaker over every frame of that speaker's utterances.
pub fn fit_speaker_stats(feats: &[FeatureMatrix]) -> Result<BTreeMap<String, SpeakerStats>> {
    let mut sums: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for f in feats {
        if f.speaker_id.is_empty() {
            return Err(Error::Input(format!("utterance `{}` has no speaker id", f.utterance_id)));
        }
        let d = f.channels();
        let entry = sums
            .entry(f.speaker_id.as_str())
            .or_insert_with(|| (vec![0.0; d], vec![0.0; d], 0));
        if entry.0.len() != d {
            return Err(Error::shape("speaker_normalize", "channel count differs within speaker"));
        }
        for t in 0..f.frames() {
            for (c, &v) in f.frame(t).iter().enumerate() {
                entry.0[c] += v as f64;
            }
        }
        entry.2 += f.frames();
    }
    // Second pass for the centered sum of squares.
    let means: BTreeMap<&str, Vec<f64>> = sums
        .iter()
        .map(|(k, (s, _, n))| (*k, s.iter().map(|v| v / *n as f64).collect()))
        .collect();
    for f in feats {
        let mean = &means[f.speaker_id.as_str()];
        let entry = sums.get_mut(f.speaker_id.as_str()).unwrap();
        for t in 0..f.frames() {
            for (c, &v) in f.frame(t).iter().enumerate() {
                let dv = v as f64 - mean[c];
                entry.1[c] += dv * dv;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(speaker, (_, sq, n))| {
            let mean = means[speaker].clone();
            let std = sq.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
            (
                speaker.to_string(),
                SpeakerStats {
                    speaker_id: speaker.to_string(),
                    mean,
                    std,
                    frame_count: n,
                },
            )
        })
        .collect())
}

/// Fits per-speaker stats on `feats` and applies them, preserving order.
pub fn speaker_normalize(feats: &[FeatureMatrix]) -> Result<(Vec<FeatureMatrix>, Vec<SpeakerStats>)> {
    let stats = fit_speaker_stats(feats)?;
    let normalized = feats
        .iter()
        .map(|f| {
            stats
                .get(&f.speaker_id)
                .ok_or_else(|| Error::UnknownSpeaker(f.speaker_id.clone()))?
                .apply(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((normalized, stats.into_values().collect()))
}
