//! Temporal and channel masking for masked frame reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::numerics::Tensor2D;

pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// The frames and channels zeroed for one reconstruction step.
///
/// Serializes to the diagnostic JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub seed: u64,
    pub p_time: f64,
    pub p_channel: f64,
    pub frames: usize,
    pub channels: usize,
    pub masked_time_indices: Vec<usize>,
    pub masked_channel_indices: Vec<usize>,
}

/// Draws each frame with probability `p_time` and each channel with
/// probability `p_channel`, independently. Pure in its arguments.
pub fn plan_masks(frames: usize, channels: usize, p_time: f64, p_channel: f64, seed: u64) -> Result<MaskPlan> {
    for p in [p_time, p_channel] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("mask probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked_time_indices = (0..frames).filter(|_| rng.random::<f64>() < p_time).collect();
    let masked_channel_indices = (0..channels).filter(|_| rng.random::<f64>() < p_channel).collect();
    Ok(MaskPlan {
        seed,
        p_time,
        p_channel,
        frames,
        channels,
        masked_time_indices,
        masked_channel_indices,
    })
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(frames: usize, channels: usize) -> Self {
        Self {
            seed: 0,
            p_time: 0.0,
            p_channel: 0.0,
            frames,
            channels,
            masked_time_indices: Vec::new(),
            masked_channel_indices: Vec::new(),
        }
    }

    pub fn with_indices(frames: usize, channels: usize, time: Vec<usize>, channel: Vec<usize>) -> Result<Self> {
        let plan = Self {
            masked_time_indices: time,
            masked_channel_indices: channel,
            ..Self::empty(frames, channels)
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if self.masked_time_indices.iter().any(|&i| i >= self.frames)
            || self.masked_channel_indices.iter().any(|&j| j >= self.channels)
        {
            return Err(Error::Plan("mask index out of bounds".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.masked_time_indices.is_empty() && self.masked_channel_indices.is_empty()
    }

    /// `frames × channels` indicator of every position that enters the
    /// reconstruction loss: masked frames plus masked channels. A position
    /// hit by both counts once.
    pub fn loss_positions(&self) -> Tensor2D {
        let mut m = Tensor2D::zeros(self.frames, self.channels);
        for &i in &self.masked_time_indices {
            m.row_mut(i).fill(1.0);
        }
        for &j in &self.masked_channel_indices {
            for i in 0..self.frames {
                m.set(i, j, 1.0);
            }
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Zeroes masked frames and channels, leaving every other entry as is.
pub fn apply_masks(feats: &FeatureMatrix, plan: &MaskPlan) -> Result<FeatureMatrix> {
    if plan.frames != feats.frames() || plan.channels != feats.channels() {
        return Err(Error::Plan(format!(
            "plan is {}x{}, features are {}x{}",
            plan.frames,
            plan.channels,
            feats.frames(),
            feats.channels()
        )));
    }
    plan.validate()?;
    let mut out = feats.clone();
    let d = feats.channels();
    let values = out.values_mut();
    for &i in &plan.masked_time_indices {
        values[i * d..(i + 1) * d].fill(0.0);
    }
    for &j in &plan.masked_channel_indices {
        for i in 0..plan.frames {
            values[i * d + j] = 0.0;
        }
    }
    Ok(out)
}
