use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Energies below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    /// Window length in samples.
    pub window: usize,
    /// Hop length in samples.
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    /// 16 kHz, 25 ms Hann window, 10 ms hop, 80 bands over 0-8 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and FFT plan.
pub struct LogMel {
    cfg: LogMelConfig,
    hann: Vec<f64>,
    /// `n_mels × (window/2 + 1)` triangular weights.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: LogMelConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 || cfg.n_mels == 0 {
            return Err(Error::Config("window, hop and n_mels must be positive".into()));
        }
        let nyquist = cfg.sample_rate as f64 / 2.0;
        if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel range {}..{} Hz invalid for {} Hz audio",
                cfg.f_min, cfg.f_max, cfg.sample_rate
            )));
        }
        // Periodic Hann.
        let hann = (0..cfg.window)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos())
            .collect();
        let bins = cfg.window / 2 + 1;
        let bin_hz: Vec<f64> = (0..bins)
            .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.window as f64)
            .collect();
        let centers = Self::band_edges(&cfg);
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
                bin_hz
                    .iter()
                    .map(|&f| {
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        Ok(Self {
            cfg,
            hann,
            filters,
            fft,
        })
    }

    /// `n_mels + 2` band edges in Hz, evenly spaced on the mel scale.
    fn band_edges(cfg: &LogMelConfig) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect()
    }

    /// Peak frequency of each mel band.
    pub fn center_frequencies(&self) -> Vec<f64> {
        Self::band_edges(&self.cfg)[1..=self.cfg.n_mels].to_vec()
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    /// Number of frames produced for `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.cfg.window {
            0
        } else {
            1 + (len - self.cfg.window) / self.cfg.hop
        }
    }

    /// Unnormalized log-Mel features of mono audio.
    pub fn compute(
        &self,
        samples: &[f32],
        sample_rate: u32,
        utterance_id: &str,
        speaker_id: &str,
    ) -> Result<FeatureMatrix> {
        if sample_rate != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "audio is {sample_rate} Hz, front-end expects {} Hz",
                self.cfg.sample_rate
            )));
        }
        let frames = self.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::Input(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                self.cfg.window
            )));
        }
        let bins = self.cfg.window / 2 + 1;
        let mut values = Vec::with_capacity(frames * self.cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.window];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(samples[start + i] as f64 * self.hann[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push(energy.max(LOG_FLOOR).ln() as f32);
            }
        }
        FeatureMatrix::new(utterance_id, speaker_id, frames, self.cfg.n_mels, values)
    }
}
