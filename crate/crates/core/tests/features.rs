use std::f64::consts::PI;

use proptest::prelude::*;
use speechalign::features::{
    read_features, read_wav, speaker_normalize, write_features, write_wav, FeatureMatrix, LogMel,
    LogMelConfig,
};

/// Naive DFT power spectrum of one Hann-windowed frame, bins 0..=n/2.
fn dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * PI * t as f64 / n as f64).cos();
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                re += x * w * ang.cos();
                im += x * w * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Triangular HTK-style filters computed from scratch.
fn oracle_band_energies(power: &[f64], sr: f64, n_fft: usize, n_mels: usize) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|b| {
            power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * sr / n_fft as f64;
                    let w = if f > edges[b] && f <= edges[b + 1] {
                        (f - edges[b]) / (edges[b + 1] - edges[b])
                    } else if f > edges[b + 1] && f < edges[b + 2] {
                        (edges[b + 2] - f) / (edges[b + 2] - edges[b + 1])
                    } else {
                        0.0
                    };
                    w * p
                })
                .sum()
        })
        .collect()
}

#[test]
fn sine_at_band_center_peaks_in_that_band() {
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    let centers = lm.center_frequencies();
    for band in [30usize, 45, 60, 75] {
        let freq = centers[band];
        let samples: Vec<f32> = (0..16_000)
            .map(|t| (0.5 * (2.0 * PI * freq * t as f64 / 16_000.0).sin()) as f32)
            .collect();
        let feats = lm.compute(&samples, 16_000, "tone", "spk").unwrap();

        let mean: Vec<f64> = (0..80)
            .map(|c| (0..feats.frames()).map(|t| feats.get(t, c) as f64).sum::<f64>() / feats.frames() as f64)
            .collect();
        let argmax = (0..80).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(argmax, band, "tone at {freq:.1} Hz");

        // Oracle on the first frame.
        let frame: Vec<f64> = samples[..400].iter().map(|&s| s as f64).collect();
        let energies = oracle_band_energies(&dft_power(&frame), 16_000.0, 400, 80);
        let oracle_argmax = (0..80).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
        assert_eq!(oracle_argmax, band);
        for (c, e) in energies.iter().enumerate() {
            let expected = e.max(1e-10).ln();
            assert!(
                (feats.get(0, c) as f64 - expected).abs() < 1e-3,
                "band {c}: {} vs {expected}",
                feats.get(0, c)
            );
        }
    }
}

#[test]
fn per_speaker_normalization_standardizes_each_channel() {
    let mut utts = Vec::new();
    for (s, spk) in ["alice", "bob"].iter().enumerate() {
        for u in 0..4 {
            let frames = 5 + u;
            let values = (0..frames * 3)
                .map(|i| ((i * 7 + u * 13 + s * 31) % 17) as f32 * (1.0 + s as f32) - 4.0)
                .collect();
            utts.push(FeatureMatrix::new(format!("{spk}-{u}"), *spk, frames, 3, values).unwrap());
        }
    }
    let (normalized, stats) = speaker_normalize(&utts).unwrap();
    assert_eq!(stats.len(), 2);
    for (orig, norm) in utts.iter().zip(&normalized) {
        assert_eq!(orig.utterance_id, norm.utterance_id);
        assert!(norm.normalized);
    }
    for spk in ["alice", "bob"] {
        for c in 0..3 {
            let vals: Vec<f64> = normalized
                .iter()
                .filter(|f| f.speaker_id == spk)
                .flat_map(|f| (0..f.frames()).map(move |t| f.get(t, c) as f64))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "{spk}/{c}: mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "{spk}/{c}: var {var}");
        }
    }
}

#[test]
fn wav_input_feeds_the_front_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let samples: Vec<f32> = (0..4000).map(|t| 0.3 * (t as f32 * 0.2).sin()).collect();
    write_wav(&path, &samples, 16_000).unwrap();
    let (read, sr) = read_wav(&path).unwrap();
    assert_eq!(sr, 16_000);
    assert_eq!(read.len(), samples.len());
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    let feats = lm.compute(&read, sr, "tone", "spk").unwrap();
    assert_eq!(feats.frames(), 1 + (4000 - 400) / 160);
}

fn feature_matrix() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..6, 1usize..6, "[a-z0-9-]{0,12}", "[a-z]{1,6}", any::<bool>()).prop_flat_map(
        |(rows, cols, utt, spk, normalized)| {
            proptest::collection::vec(-1e6f32..1e6, rows * cols).prop_map(move |values| {
                let mut f = FeatureMatrix::new(utt.clone(), spk.clone(), rows, cols, values).unwrap();
                f.normalized = normalized;
                f
            })
        },
    )
}

proptest! {
    #[test]
    fn feature_files_round_trip_byte_identically(f in feature_matrix()) {
        let mut first = Vec::new();
        write_features(&mut first, &f).unwrap();
        let back = read_features(&mut &first[..]).unwrap();
        prop_assert_eq!(&back, &f);
        let mut second = Vec::new();
        write_features(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }
}
