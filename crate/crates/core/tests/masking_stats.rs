mod common;

use speechalign::masking::plan_masks;

#[test]
fn mask_rates_fall_in_binomial_interval() {
    let (mut frames, mut channels, mut hit_t, mut hit_c) = (0, 0, 0, 0);
    for seed in 0..200 {
        let plan = plan_masks(600, 600, 0.15, 0.15, seed).unwrap();
        frames += plan.frames;
        channels += plan.channels;
        hit_t += plan.masked_time_indices.len();
        hit_c += plan.masked_channel_indices.len();
    }
    assert!(frames >= 100_000 && channels >= 100_000);
    for (hits, n) in [(hit_t, frames), (hit_c, channels)] {
        let (lo, hi) = common::binomial_ci99(n, 0.15);
        let rate = hits as f64 / n as f64;
        assert!(lo <= rate && rate <= hi, "rate {rate} outside [{lo}, {hi}]");
    }
}

#[test]
fn plans_are_pure_in_the_seed() {
    assert_eq!(plan_masks(50, 20, 0.15, 0.15, 9).unwrap(), plan_masks(50, 20, 0.15, 0.15, 9).unwrap());
    assert_ne!(plan_masks(50, 20, 0.15, 0.15, 9).unwrap(), plan_masks(50, 20, 0.15, 0.15, 10).unwrap());
}
