//! Log-Mel front-end, per-speaker normalization and the feature file format.

mod format;
mod mel;
mod normalize;
mod wav;

pub use format::{read_features, read_features_file, write_features, write_features_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use mel::{hz_to_mel, mel_to_hz, LogMel, LogMelConfig, LOG_FLOOR};
pub use normalize::{fit_speaker_stats, speaker_normalize, SpeakerStats, STD_FLOOR};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// One utterance as `frames × channels` log-Mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub speaker_id: String,
    frames: usize,
    channels: usize,
    values: Vec<f32>,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
        frames: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || channels == 0 {
            return Err(Error::Input("feature matrix needs at least one frame and channel".into()));
        }
        if values.len() != frames * channels {
            return Err(Error::shape(
                "feature_matrix",
                format!("{} values for {frames}x{channels}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            frames,
            channels,
            values,
            normalized: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, channel: usize) -> f32 {
        self.values[frame * self.channels + channel]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Values widened to `f64` for the model.
    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D::from_fn(self.frames, self.channels, |r, c| self.get(r, c) as f64)
    }

    /// Keeps frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Input(format!(
                "frame range {start}+{len} outside {} frames",
                self.frames
            )));
        }
        let mut out = Self::new(
            self.utterance_id.clone(),
            self.speaker_id.clone(),
            len,
            self.channels,
            self.values[start * self.channels..(start + len) * self.channels].to_vec(),
        )?;
        out.normalized = self.normalized;
        Ok(out)
    }
}
