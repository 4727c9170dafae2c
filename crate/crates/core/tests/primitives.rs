//! Every tape primitive against central finite differences, on random
//! shapes up to 8x8 and 50 seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechalign::numerics::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor2D, Var};
use speechalign::Result;

const SEEDS: u64 = 50;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

/// Draws entries bounded away from zero so kinked primitives stay smooth
/// within the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weights the op output with a fixed random matrix so every output entry
/// carries a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor2D) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(name: &str, store: &ParamStore, f: F)
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let report = grad_check(f, store, GradCheckOptions::default()).unwrap();
    assert!(
        report.passed(),
        "{name}: max rel error {:e}",
        report.max_rel_error()
    );
}

fn shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=8), rng.random_range(1..=8))
}

#[test]
fn binary_primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = shape(&mut rng);
        let k = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        store.insert("a", random(&mut rng, r, k)).unwrap();
        store.insert("b", random(&mut rng, k, c)).unwrap();
        store.insert("bt", random(&mut rng, c, k)).unwrap();
        store.insert("x", random(&mut rng, r, c)).unwrap();
        store.insert("y", random(&mut rng, r, c)).unwrap();
        store.insert("row", random(&mut rng, 1, c)).unwrap();
        let w = random(&mut rng, r, c);

        check("matmul", &store, |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let o = t.matmul(a, b)?;
            weighted_sum(t, o, &w)
        });
        check("matmul_bt", &store, |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "bt")?);
            let o = t.matmul_bt(a, b)?;
            weighted_sum(t, o, &w)
        });
        check("add/sub/mul", &store, |t, p| {
            let (x, y) = (t.param(p, "x")?, t.param(p, "y")?);
            let s = t.add(x, y)?;
            let d = t.sub(s, y)?;
            let m = t.mul(d, y)?;
            let o = t.scale(m, -0.7)?;
            weighted_sum(t, o, &w)
        });
        check("add_row/mul_row", &store, |t, p| {
            let (x, row) = (t.param(p, "x")?, t.param(p, "row")?);
            let a = t.add_row(x, row)?;
            let o = t.mul_row(a, row)?;
            weighted_sum(t, o, &w)
        });
    }
}

#[test]
fn unary_primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (r, c) = shape(&mut rng);
        let c = c.max(2);
        let mut store = ParamStore::new();
        store.insert("x", random(&mut rng, r, c)).unwrap();
        store.insert("z", away_from_zero(&mut rng, r, c)).unwrap();
        let w = random(&mut rng, r, c);

        check("gelu", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.gelu(x)?;
            weighted_sum(t, o, &w)
        });
        check("relu", &store, |t, p| {
            let x = t.param(p, "z")?;
            let o = t.relu(x)?;
            weighted_sum(t, o, &w)
        });
        check("abs", &store, |t, p| {
            let x = t.param(p, "z")?;
            let o = t.abs(x)?;
            weighted_sum(t, o, &w)
        });
        check("softmax", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.softmax(x)?;
            weighted_sum(t, o, &w)
        });
        check("layer_norm", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.layer_norm(x, 1e-5)?;
            weighted_sum(t, o, &w)
        });
        check("row_normalize", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.row_normalize(x, 1e-12)?;
            weighted_sum(t, o, &w)
        });
        check("mean", &store, |t, p| {
            let x = t.param(p, "x")?;
            let sq = t.mul(x, x)?;
            t.mean(sq)
        });
    }
}

#[test]
fn structural_primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (r, c) = shape(&mut rng);
        let mut store = ParamStore::new();
        store.insert("x", random(&mut rng, r, c)).unwrap();
        store.insert("y", random(&mut rng, r, c)).unwrap();
        let w_rows = random(&mut rng, 2 * r, c);
        let w_cols = random(&mut rng, r, 2 * c);
        let start = rng.random_range(0..r);
        let len = rng.random_range(1..=r - start);
        let w_slice = random(&mut rng, len, c);
        let cstart = rng.random_range(0..c);
        let clen = rng.random_range(1..=c - cstart);
        let w_cslice = random(&mut rng, r, clen);
        let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..r)).collect();
        let w_gather = random(&mut rng, idx.len(), c);

        check("concat_rows", &store, |t, p| {
            let (x, y) = (t.param(p, "x")?, t.param(p, "y")?);
            let o = t.concat_rows(&[x, y])?;
            weighted_sum(t, o, &w_rows)
        });
        check("concat_cols", &store, |t, p| {
            let (x, y) = (t.param(p, "x")?, t.param(p, "y")?);
            let o = t.concat_cols(&[x, y])?;
            weighted_sum(t, o, &w_cols)
        });
        check("slice_rows", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.slice_rows(x, start, len)?;
            weighted_sum(t, o, &w_slice)
        });
        check("slice_cols", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.slice_cols(x, cstart, clen)?;
            weighted_sum(t, o, &w_cslice)
        });
        check("gather", &store, |t, p| {
            let x = t.param(p, "x")?;
            let o = t.gather(x, &idx)?;
            weighted_sum(t, o, &w_gather)
        });
    }
}

#[test]
fn loss_primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (r, c) = shape(&mut rng);
        let c = c.max(2);
        let mut store = ParamStore::new();
        store.insert("x", random(&mut rng, r, c)).unwrap();
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let labels = Tensor2D::from_fn(r, c, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let w_col = random(&mut rng, r, 1);

        check("cross_entropy", &store, |t, p| {
            let x = t.param(p, "x")?;
            t.cross_entropy(x, &targets)
        });
        check("bce_with_logits", &store, |t, p| {
            let x = t.param(p, "x")?;
            t.bce_with_logits(x, labels.clone())
        });

        // Keep row maxima separated by more than the finite-difference step.
        let x = store.get("x").unwrap();
        let tie_free = (0..r).all(|i| {
            let mut row = x.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row.len() < 2 || row[0] - row[1] > 1e-3
        });
        if tie_free {
            check("row_max", &store, |t, p| {
                let x = t.param(p, "x")?;
                let o = t.row_max(x)?;
                weighted_sum(t, o, &w_col)
            });
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_is_standardized() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (r, c) = shape(&mut rng);
        let c = c.max(2);
        let x = Tensor2D::from_fn(r, c, |_, _| rng.random_range(-20.0..20.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        let n = tape.layer_norm(v, 0.0).unwrap();
        for i in 0..r {
            let total: f64 = tape.value(s).row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let row = tape.value(n).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn row_max_breaks_ties_toward_lowest_index() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor2D::from_rows(&[vec![0.5, 2.0, 2.0], vec![3.0, 3.0, 1.0]]).unwrap());
    let m = tape.row_max(x).unwrap();
    assert_eq!(tape.argmax_of(m).unwrap(), &[1, 0]);
}
