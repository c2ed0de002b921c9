use rand::Rng;

use crate::autodiff::{Mask, Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    /// Pooling norm whose output starts near a fixed random direction, so
    /// that untrained towers give nearly uniform contrastive logits.
    pub fn output<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], OUTPUT_GAIN)),
            beta: store.add(format!("{name}.beta"), Tensor::randn(&[dim], 1.0, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b[self.gamma], b[self.beta], LN_EPS)
    }
}

/// Which query rows a block computes.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Queries {
    All,
    /// Only row `i`; the block output has a single row.
    Row(usize),
}

/// Pre-norm transformer block with single-head attention and a GELU MLP.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: LayerNormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: LayerNormParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    scale: f64,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let out_s = s / (2.0 * depth as f64).sqrt();
        let mut lin = |suffix: &str, r: usize, c: usize, std: f64| {
            store.add(format!("{name}.{suffix}"), Tensor::randn(&[r, c], std, rng))
        };
        let wq = lin("attn.wq", dim, dim, s);
        let wk = lin("attn.wk", dim, dim, s);
        let wv = lin("attn.wv", dim, dim, s);
        let wo = lin("attn.wo", dim, dim, out_s);
        let w1 = lin("mlp.w1", dim, hidden, s);
        let w2 = lin("mlp.w2", hidden, dim, out_s / (hidden as f64 / dim as f64).sqrt());
        Block {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dim),
            wq,
            wk,
            wv,
            wo,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dim),
            w1,
            b1: store.add(format!("{name}.mlp.b1"), Tensor::zeros(&[hidden])),
            w2,
            b2: store.add(format!("{name}.mlp.b2"), Tensor::zeros(&[dim])),
            scale: s,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var, mask: Mask, queries: Queries) -> Result<Var> {
        let n = self.ln1.forward(tape, b, x)?;
        let (q_in, resid, mask) = match queries {
            Queries::All => (n, x, mask),
            Queries::Row(i) => {
                let mask = match mask {
                    Mask::None => Mask::None,
                    Mask::Causal { offset } => Mask::Causal { offset: offset + i },
                };
                (tape.rows(n, i, 1)?, tape.rows(x, i, 1)?, mask)
            }
        };
        let q = tape.matmul(q_in, b[self.wq])?;
        let k = tape.matmul(n, b[self.wk])?;
        let v = tape.matmul(n, b[self.wv])?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, self.scale)?;
        let attn = tape.softmax_rows(scores, mask)?;
        let mixed = tape.matmul(attn, v)?;
        let o = tape.matmul(mixed, b[self.wo])?;
        let h = tape.add(resid, o)?;

        let m = self.ln2.forward(tape, b, h)?;
        let u = tape.matmul(m, b[self.w1])?;
        let u = tape.add_row(u, b[self.b1])?;
        let u = tape.gelu(u)?;
        let d = tape.matmul(u, b[self.w2])?;
        let d = tape.add_row(d, b[self.b2])?;
        tape.add(h, d)
    }
}

impl Block {
    /// All rows, with attention restricted to consecutive blocks of `seg` rows.
    pub fn forward_segments(&self, tape: &mut Tape, b: &Binding, x: Var, seg: usize, causal: bool) -> Result<Var> {
        let n = self.ln1.forward(tape, b, x)?;
        let q = tape.matmul(n, b[self.wq])?;
        let k = tape.matmul(n, b[self.wk])?;
        let v = tape.matmul(n, b[self.wv])?;
        let mixed = tape.segment_attention(q, k, v, seg, causal, self.scale)?;
        let o = tape.matmul(mixed, b[self.wo])?;
        let h = tape.add(x, o)?;

        let m = self.ln2.forward(tape, b, h)?;
        let u = tape.matmul(m, b[self.w1])?;
        let u = tape.add_row(u, b[self.b1])?;
        let u = tape.gelu(u)?;
        let d = tape.matmul(u, b[self.w2])?;
        let d = tape.add_row(d, b[self.b2])?;
        tape.add(h, d)
    }
}

/// Overwrites rows `start..start + m` of every block of `seg` rows in `x`
/// with the `m` rows of `rows`.
pub(crate) fn overwrite_segments(tape: &mut Tape, x: Var, seg: usize, start: usize, rows: Var) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let m = tape.shape(rows)[0];
    if start + m > seg || n % seg != 0 {
        return Err(crate::error::CilmpError::dim("overwrite_segments", &[n, d], &[start + m, seg]));
    }
    let mut keep = vec![1.0; n * d];
    let mut sel = vec![0.0; n * m];
    for base in (0..n).step_by(seg) {
        for i in 0..m {
            keep[(base + start + i) * d..(base + start + i + 1) * d].fill(0.0);
            sel[(base + start + i) * m + i] = 1.0;
        }
    }
    let keep = tape.constant(Tensor::new(vec![n, d], keep)?);
    let sel = tape.constant(Tensor::new(vec![n, m], sel)?);
    let kept = tape.hadamard(x, keep)?;
    let placed = tape.matmul(sel, rows)?;
    tape.add(kept, placed)
}

/// `count` vertical copies of `x`.
pub(crate) fn tile_rows(tape: &mut Tape, x: Var, count: usize) -> Result<Var> {
    if count == 1 {
        return Ok(x);
    }
    let r = tape.shape(x)[0];
    let mut sel = vec![0.0; count * r * r];
    for c in 0..count {
        for i in 0..r {
            sel[(c * r + i) * r + i] = 1.0;
        }
    }
    let sel = tape.constant(Tensor::new(vec![count * r, r], sel)?);
    tape.matmul(sel, x)
}

/// Replaces `len` rows of `x` starting at `start` with `rows`.
pub(crate) fn replace_rows(tape: &mut Tape, x: Var, start: usize, rows: Var) -> Result<Var> {
    let total = tape.shape(x)[0];
    let len = tape.shape(rows)[0];
    let mut parts = Vec::with_capacity(3);
    if start > 0 {
        parts.push(tape.rows(x, 0, start)?);
    }
    parts.push(rows);
    if start + len < total {
        parts.push(tape.rows(x, start + len, total - start - len)?);
    }
    if parts.len() == 1 {
        return Ok(rows);
    }
    tape.concat(&parts, 0)
}
