//! Embedded-Gaussian non-local attention between an aligned neighbour
//! feature `x` and the reference feature `y`:
//!
//! `z_p = x_p + W_z Σ_n softmax_n(⟨W_u x_p, W_v y_n⟩) · W_g y_n`
//!
//! The attention matrix is materialised at full resolution, so memory grows
//! as `(H·W)²`: 4096 positions already need 128 MiB per matrix in `f64`.
//! Callers tile large frames (see `eval::MAX_ATTENTION_POSITIONS`).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Layers};

#[derive(Clone, Debug, PartialEq)]
pub struct NonLocal {
    pub u: Conv,
    pub v: Conv,
    pub g: Conv,
    pub z: Conv,
}

impl NonLocal {
    pub fn new(prefix: &str, channels: usize, embed: usize) -> Self {
        NonLocal {
            u: Conv::new(format!("{prefix}.u"), channels, embed, 1),
            v: Conv::new(format!("{prefix}.v"), channels, embed, 1),
            g: Conv::new(format!("{prefix}.g"), channels, embed, 1),
            z: Conv::new(format!("{prefix}.z"), embed, channels, 1),
        }
    }
}

impl Layers for NonLocal {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        f(&self.u);
        f(&self.v);
        f(&self.g);
        f(&self.z);
    }
}

/// `(C, H, W)` → `(C, H·W)`.
fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    tape.reshape(x, &[c, h * w])
}

/// Pre-softmax logits `⟨W_u x_p, W_v y_n⟩` as a `(P, P)` matrix, row `p`.
pub fn attention_logits(tape: &mut Tape, b: &Bindings, x: Var, y: Var, nl: &NonLocal) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape("nonlocal_forward", format!("{:?} vs {:?}", tape.shape(x), tape.shape(y))));
    }
    let u = nl.u.forward(tape, b, x)?;
    let u = flatten(tape, u)?;
    let u_t = tape.transpose(u)?;
    let v = nl.v.forward(tape, b, y)?;
    let v = flatten(tape, v)?;
    tape.matmul(u_t, v)
}

/// Row-normalised attention weights, `(P, P)`.
pub fn attention_weights(tape: &mut Tape, b: &Bindings, x: Var, y: Var, nl: &NonLocal) -> Result<Var> {
    let logits = attention_logits(tape, b, x, y, nl)?;
    tape.softmax(logits, 1)
}

pub fn nonlocal_forward(tape: &mut Tape, b: &Bindings, x: Var, y: Var, nl: &NonLocal) -> Result<Var> {
    let (_, h, w) = tape.value(x).dims3()?;
    let attn = attention_weights(tape, b, x, y, nl)?;
    let g = nl.g.forward(tape, b, y)?;
    let g = flatten(tape, g)?;
    let g_t = tape.transpose(g)?;
    // (P, P) · (P, E) -> (P, E)
    let agg = tape.matmul(attn, g_t)?;
    let agg = tape.transpose(agg)?;
    let embed = tape.shape(agg)[0];
    let agg = tape.reshape(agg, &[embed, h, w])?;
    let out = nl.z.forward(tape, b, agg)?;
    tape.add(x, out)
}
