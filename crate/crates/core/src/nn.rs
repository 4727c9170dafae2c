//! Pre-LN Transformer encoder built on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor2D, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::Config("hidden, heads and ff must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Where parameter nodes come from: trainable leaves, or constants when the
/// module is frozen.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl<'a> Params<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, frozen: false }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, frozen: true }
    }

    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        if self.frozen {
            tape.frozen_param(self.store, name)
        } else {
            tape.param(self.store, name)
        }
    }
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<()> {
    store.insert_xavier(format!("{name}.w"), inputs, outputs, rng)?;
    store.insert_filled(format!("{name}.b"), 1, outputs, 0.0)
}

/// `x · w + b`.
pub fn linear(tape: &mut Tape, p: Params, name: &str, x: Var) -> Result<Var> {
    let w = p.var(tape, &format!("{name}.w"))?;
    let b = p.var(tape, &format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert_filled(format!("{name}.g"), 1, dim, 1.0)?;
    store.insert_filled(format!("{name}.b"), 1, dim, 0.0)
}

pub fn layer_norm(tape: &mut Tape, p: Params, name: &str, x: Var) -> Result<Var> {
    let g = p.var(tape, &format!("{name}.g"))?;
    let b = p.var(tape, &format!("{name}.b"))?;
    let n = tape.layer_norm(x, LN_EPS)?;
    let scaled = tape.mul_row(n, g)?;
    tape.add_row(scaled, b)
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal(len: usize, dim: usize) -> Tensor2D {
    Tensor2D::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn init_encoder<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden;
    for l in 0..cfg.layers {
        let base = format!("{prefix}.layer{l}");
        init_layer_norm(store, &format!("{base}.ln1"), h)?;
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{base}.attn.{proj}"), h, h, rng)?;
        }
        init_layer_norm(store, &format!("{base}.ln2"), h)?;
        init_linear(store, &format!("{base}.ff1"), h, cfg.ff, rng)?;
        init_linear(store, &format!("{base}.ff2"), cfg.ff, h, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln_final"), h)
}

fn attention(tape: &mut Tape, p: Params, base: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let q = linear(tape, p, &format!("{base}.q"), x)?;
    let k = linear(tape, p, &format!("{base}.k"), x)?;
    let v = linear(tape, p, &format!("{base}.v"), x)?;
    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, p, &format!("{base}.o"), joined)
}

/// Runs `x` (`len × hidden`) through every block and the final norm.
pub fn encoder(tape: &mut Tape, p: Params, prefix: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    if tape.shape(x).1 != cfg.hidden {
        return Err(Error::shape(
            "encoder",
            format!("input width {} vs hidden {}", tape.shape(x).1, cfg.hidden),
        ));
    }
    let mut h = x;
    for l in 0..cfg.layers {
        let base = format!("{prefix}.layer{l}");
        let n1 = layer_norm(tape, p, &format!("{base}.ln1"), h)?;
        let a = attention(tape, p, &format!("{base}.attn"), cfg, n1)?;
        h = tape.add(h, a)?;
        let n2 = layer_norm(tape, p, &format!("{base}.ln2"), h)?;
        let f1 = linear(tape, p, &format!("{base}.ff1"), n2)?;
        let f1 = tape.gelu(f1)?;
        let f2 = linear(tape, p, &format!("{base}.ff2"), f1)?;
        h = tape.add(h, f2)?;
    }
    layer_norm(tape, p, &format!("{prefix}.ln_final"), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_first_row_alternates_zero_one() {
        let pe = sinusoidal(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn hidden_must_divide_by_heads() {
        let cfg = EncoderConfig { layers: 1, hidden: 10, heads: 3, ff: 8 };
        assert!(cfg.validate().is_err());
    }
}
