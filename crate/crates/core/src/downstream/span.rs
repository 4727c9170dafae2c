use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
}

impl FrameSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Input(format!("span [{start}, {end}] ends before it starts")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn within(&self, frames: usize) -> bool {
        self.end < frames
    }
}

/// Frame-level intersection over union.
pub fn aos(pred: FrameSpan, gold: FrameSpan) -> f64 {
    let lo = pred.start.max(gold.start);
    let hi = pred.end.min(gold.end);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = pred.len() + gold.len() - inter;
    inter as f64 / union as f64
}

/// Highest `start[s] + end[e]` over `s ≤ e ≤ s + max_span`. Ties go to the
/// earliest start, then the shortest span.
pub fn decode_span(start: &[f64], end: &[f64], max_span: usize) -> Result<FrameSpan> {
    if start.len() != end.len() || start.is_empty() {
        return Err(Error::Contract(format!(
            "{} start and {} end logits",
            start.len(),
            end.len()
        )));
    }
    let n = start.len();
    let mut best = (f64::NEG_INFINITY, FrameSpan { start: 0, end: 0 });
    for (s, &ls) in start.iter().enumerate() {
        for (e, &le) in end.iter().enumerate().take((s + max_span + 1).min(n)).skip(s) {
            if ls + le > best.0 {
                best = (ls + le, FrameSpan { start: s, end: e });
            }
        }
    }
    Ok(best.1)
}

/// `2 ×` the 95th-percentile (nearest rank) gold span length.
pub fn default_max_span(golds: &[FrameSpan]) -> usize {
    if golds.is_empty() {
        return 0;
    }
    let mut lens: Vec<usize> = golds.iter().map(FrameSpan::len).collect();
    lens.sort_unstable();
    let rank = (0.95 * lens.len() as f64).ceil() as usize;
    2 * lens[rank.max(1) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: usize, e: usize) -> FrameSpan {
        FrameSpan::new(s, e).unwrap()
    }

    #[test]
    fn aos_examples() {
        assert_eq!(aos(span(3, 7), span(3, 7)), 1.0);
        assert_eq!(aos(span(0, 1), span(5, 9)), 0.0);
        assert_eq!(aos(span(0, 4), span(2, 6)), 3.0 / 7.0);
    }

    #[test]
    fn one_hot_logits_decode_gold() {
        let mut start = vec![0.0; 10];
        let mut end = vec![0.0; 10];
        start[4] = 10.0;
        end[6] = 10.0;
        assert_eq!(decode_span(&start, &end, 8).unwrap(), span(4, 6));
    }

    #[test]
    fn zero_max_span_gives_single_frames() {
        let start = [0.0, 5.0, 0.0, 1.0];
        let end = [0.0, 0.0, 0.0, 9.0];
        let s = decode_span(&start, &end, 0).unwrap();
        assert_eq!(s.start, s.end);
        assert_eq!(s, span(3, 3));
    }

    #[test]
    fn ties_prefer_earliest_then_shortest() {
        let flat = [0.0; 5];
        assert_eq!(decode_span(&flat, &flat, 3).unwrap(), span(0, 0));
    }

    #[test]
    fn end_never_precedes_start() {
        let start = [0.0, 0.0, 9.0];
        let end = [9.0, 0.0, 0.0];
        let s = decode_span(&start, &end, 5).unwrap();
        assert!(s.start <= s.end);
    }

    #[test]
    fn max_span_from_percentile() {
        let golds: Vec<FrameSpan> = (0..20).map(|i| span(0, if i >= 18 { 9 } else { 4 })).collect();
        assert_eq!(default_max_span(&golds), 20);
        let golds: Vec<FrameSpan> = (0..19).map(|_| span(0, 4)).chain([span(0, 29)]).collect();
        // rank ceil(0.95·20) = 19 -> length 5
        assert_eq!(default_max_span(&golds), 10);
    }
}
