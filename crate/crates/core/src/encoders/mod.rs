//! Toy dual-encoder vision-language model.
//!
//! Both towers are stacks of pre-norm transformer blocks. The image tower reads
//! pre-tokenized feature rows behind a learnable classification token; the
//! text tower reads token embeddings under a causal mask and is pooled at the
//! end-of-sequence position. Both outputs are unit vectors.

mod pretrain;
mod transformer;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Tape, Tensor, Var};
use crate::binio::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{CilmpError, Result};
use crate::params::{Binding, ParamId, ParamStore};

pub use pretrain::{info_nce, ClipLoss, PretrainOptions};
use transformer::{overwrite_segments, replace_rows, tile_rows, Block, LayerNormParams, Queries};

/// Reserved token ids. Everything from [`vocab::FIRST_FREE`] upward is
/// assigned by the data generator.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const EOS: usize = 1;
    /// Four-token template that seeds the first-layer text context.
    pub const TEMPLATE: [usize; 4] = [2, 3, 4, 5];
    /// Stand-in for an object noun in pretraining captions.
    pub const GENERIC: usize = 6;
    pub const FIRST_FREE: usize = 7;
}

const ENC_MAGIC: &[u8] = b"CILMPENC1";
pub const EMBED_STD: f64 = 0.02;
/// Initial inverse temperature.
pub const INIT_LOGIT_SCALE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub image_tokens: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    pub deep_prompt_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            num_layers: 2,
            hidden_dim: 128,
            image_tokens: 16,
            text_max_len: 48,
            vocab_size: 64,
            deep_prompt_layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("image_tokens", self.image_tokens),
            ("text_max_len", self.text_max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(CilmpError::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.deep_prompt_layers == 0 || self.deep_prompt_layers > self.num_layers {
            return Err(CilmpError::Config(format!(
                "encoder.deep_prompt_layers = {} must lie in [1, {}]",
                self.deep_prompt_layers, self.num_layers
            )));
        }
        if self.vocab_size <= vocab::FIRST_FREE {
            return Err(CilmpError::Config(format!(
                "encoder.vocab_size must exceed {} reserved tokens",
                vocab::FIRST_FREE
            )));
        }
        Ok(())
    }

    fn as_u32s(&self) -> Result<[u32; 7]> {
        Ok([
            to_u32(self.embed_dim, "embed_dim")?,
            to_u32(self.num_layers, "num_layers")?,
            to_u32(self.hidden_dim, "hidden_dim")?,
            to_u32(self.image_tokens, "image_tokens")?,
            to_u32(self.text_max_len, "text_max_len")?,
            to_u32(self.vocab_size, "vocab_size")?,
            to_u32(self.deep_prompt_layers, "deep_prompt_layers")?,
        ])
    }
}

/// Embedded text ready for the text tower.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSequence {
    pub token_embeddings: Tensor,
    pub eos_index: usize,
}

/// Token ids of a caption together with the position of its end token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eos_index: usize,
}

impl TokenSequence {
    /// Appends the end token to `words`.
    pub fn terminated(words: &[usize]) -> Self {
        let mut ids = words.to_vec();
        ids.push(vocab::EOS);
        TokenSequence {
            eos_index: ids.len() - 1,
            ids,
        }
    }
}

/// Learnable rows that overwrite a fixed slot range entering successive blocks.
#[derive(Clone, Debug)]
pub struct DeepSlots {
    pub start: usize,
    /// Block index receiving `layers[0]`.
    pub from_block: usize,
    pub layers: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenFlag {
    pub frozen: bool,
    pub checksum: u64,
}

#[derive(Clone, Debug)]
struct ImageTower {
    patch: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_post: LayerNormParams,
    proj: ParamId,
}

#[derive(Clone, Debug)]
struct TextTower {
    token_embedding: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNormParams,
    proj: ParamId,
}

/// Both towers, the temperature, and the parameter registry they live in.
///
/// Prompt parameters registered later by other modules share the same
/// registry; the first `encoder_params` entries are the encoders.
#[derive(Clone, Debug)]
pub struct Clip {
    config: EncoderConfig,
    store: ParamStore,
    image: ImageTower,
    text: TextTower,
    log_tau: ParamId,
    encoder_params: usize,
    frozen: Option<FrozenFlag>,
}

impl Clip {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden_dim;
        let n = config.num_layers;
        let mut store = ParamStore::new();

        let proj_std = 1.0 / (d as f64).sqrt();
        let image = ImageTower {
            patch: store.add("image.patch", Tensor::randn(&[d, d], proj_std, rng)),
            cls: store.add("image.cls", Tensor::randn(&[1, d], EMBED_STD, rng)),
            pos: store.add(
                "image.pos",
                Tensor::randn(&[config.image_tokens + 1, d], EMBED_STD, rng),
            ),
            blocks: (0..n)
                .map(|i| Block::new(&mut store, &format!("image.blocks.{i}"), d, h, n, rng))
                .collect(),
            ln_post: LayerNormParams::output(&mut store, "image.ln_post", d, rng),
            proj: store.add("image.proj", Tensor::randn(&[d, d], proj_std, rng)),
        };
        let text = TextTower {
            token_embedding: store.add(
                "text.token_embedding",
                Tensor::randn(&[config.vocab_size, d], EMBED_STD, rng),
            ),
            pos: store.add(
                "text.pos",
                Tensor::randn(&[config.text_max_len, d], EMBED_STD / 2.0, rng),
            ),
            blocks: (0..n)
                .map(|i| Block::new(&mut store, &format!("text.blocks.{i}"), d, h, n, rng))
                .collect(),
            ln_final: LayerNormParams::output(&mut store, "text.ln_final", d, rng),
            proj: store.add("text.proj", Tensor::randn(&[d, d], proj_std, rng)),
        };
        let log_tau = store.add("log_tau", Tensor::scalar(-INIT_LOGIT_SCALE.ln()));
        let encoder_params = store.len();
        Ok(Clip {
            config,
            store,
            image,
            text,
            log_tau,
            encoder_params,
            frozen: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn log_tau(&self) -> ParamId {
        self.log_tau
    }

    /// `τ = exp(log_τ)`.
    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_tau).item().exp()
    }

    pub fn encoder_ids(&self) -> impl Iterator<Item = ParamId> + Clone {
        self.store.ids().take(self.encoder_params)
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_ids().map(|id| self.store.get(id).numel()).sum()
    }

    pub fn token_embedding(&self) -> ParamId {
        self.text.token_embedding
    }

    /// Root mean square of the token embedding table.
    pub fn token_rms(&self) -> f64 {
        let t = self.store.get(self.text.token_embedding);
        (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt()
    }

    /// Embedding row of a single token.
    pub fn token_row(&self, id: usize) -> Result<Tensor> {
        let table = self.store.get(self.text.token_embedding);
        if id >= table.rows() {
            return Err(CilmpError::Index { index: id, len: table.rows() });
        }
        Tensor::new(vec![1, table.cols()], table.row(id).to_vec())
    }

    pub fn embed_tokens(&self, seq: &TokenSequence) -> Result<TextSequence> {
        let mut tape = Tape::new();
        let table = tape.constant(self.store.get(self.text.token_embedding).clone());
        let rows = tape.gather_rows(table, &seq.ids)?;
        Ok(TextSequence {
            token_embeddings: tape.value(rows).clone(),
            eos_index: seq.eos_index,
        })
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.store.checksum(self.encoder_ids())
    }

    /// Excludes every encoder parameter from optimisation. Repeated calls
    /// return the original flag.
    pub fn freeze(&mut self) -> FrozenFlag {
        if let Some(flag) = self.frozen {
            return flag;
        }
        self.store.freeze(self.encoder_ids().collect::<Vec<_>>());
        let flag = FrozenFlag {
            frozen: true,
            checksum: self.encoder_checksum(),
        };
        self.frozen = Some(flag);
        flag
    }

    pub fn frozen(&self) -> Option<FrozenFlag> {
        self.frozen
    }

    /// Image tower on a bound tape. `prompts[k]` are the image prompt tokens
    /// for block `k`: the first set is appended after the feature rows, later
    /// sets overwrite those rows. Returns the normalised embedding as `[1×D]`.
    pub fn image_forward(&self, tape: &mut Tape, b: &Binding, x: Var, prompts: &[Var]) -> Result<Var> {
        let t = self.config.image_tokens;
        let shape = tape.shape(x).to_vec();
        if shape != [t, self.config.embed_dim] {
            return Err(CilmpError::dim("encode_image", &shape, &[t, self.config.embed_dim]));
        }
        if prompts.len() > self.config.num_layers {
            return Err(CilmpError::Config(format!(
                "{} image prompt layers for {} blocks",
                prompts.len(),
                self.config.num_layers
            )));
        }
        let tower = &self.image;
        let feats = tape.matmul(x, b[tower.patch])?;
        let mut seq = tape.concat(&[b[tower.cls], feats], 0)?;
        seq = tape.add(seq, b[tower.pos])?;
        if let Some(&first) = prompts.first() {
            seq = tape.concat(&[seq, first], 0)?;
        }
        let last = tower.blocks.len() - 1;
        for (k, block) in tower.blocks.iter().enumerate() {
            if k > 0 {
                if let Some(&p) = prompts.get(k) {
                    seq = replace_rows(tape, seq, t + 1, p)?;
                }
            }
            let q = if k == last { Queries::Row(0) } else { Queries::All };
            seq = block.forward(tape, b, seq, Mask::None, q)?;
        }
        let pooled = tower.ln_post.forward(tape, b, seq)?;
        let out = tape.matmul(pooled, b[tower.proj])?;
        tape.l2_normalize(out)
    }

    /// Text tower on a bound tape over embedded rows. Rows after `eos_index`
    /// are discarded. Slot rows aimed at block 0 are written into the input
    /// embeddings; later ones overwrite hidden states. Returns the normalised embedding as `[1×D]`.
    pub fn text_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        rows: Var,
        eos_index: usize,
        slots: &[DeepSlots],
    ) -> Result<Var> {
        let len = tape.shape(rows)[0];
        if len > self.config.text_max_len {
            return Err(CilmpError::Length { len, max: self.config.text_max_len });
        }
        if eos_index >= len {
            return Err(CilmpError::Index { index: eos_index, len });
        }
        if tape.shape(rows)[1] != self.config.embed_dim {
            return Err(CilmpError::dim("encode_text", tape.shape(rows), &[len, self.config.embed_dim]));
        }
        for s in slots {
            if s.from_block + s.layers.len() > self.config.num_layers {
                return Err(CilmpError::Config(format!(
                    "prompt slots reach block {} of {}",
                    s.from_block + s.layers.len(),
                    self.config.num_layers
                )));
            }
            for &l in &s.layers {
                if s.start + tape.shape(l)[0] > eos_index {
                    return Err(CilmpError::Index { index: s.start + tape.shape(l)[0], len: eos_index });
                }
            }
        }
        let tower = &self.text;
        let n = eos_index + 1;
        let mut seq = if n < len { tape.rows(rows, 0, n)? } else { rows };
        for s in slots.iter().filter(|s| s.from_block == 0) {
            if let Some(&p) = s.layers.first() {
                seq = replace_rows(tape, seq, s.start, p)?;
            }
        }
        let pos = tape.rows(b[tower.pos], 0, n)?;
        seq = tape.add(seq, pos)?;
        let last = tower.blocks.len() - 1;
        for (k, block) in tower.blocks.iter().enumerate() {
            for s in slots {
                if k >= s.from_block.max(1) {
                    if let Some(&p) = s.layers.get(k - s.from_block) {
                        seq = replace_rows(tape, seq, s.start, p)?;
                    }
                }
            }
            let q = if k == last { Queries::Row(eos_index) } else { Queries::All };
            seq = block.forward(tape, b, seq, Mask::Causal { offset: 0 }, q)?;
        }
        let pooled = tower.ln_final.forward(tape, b, seq)?;
        let out = tape.matmul(pooled, b[tower.proj])?;
        tape.l2_normalize(out)
    }

    /// Text tower over token ids.
    pub fn caption_forward(&self, tape: &mut Tape, b: &Binding, seq: &TokenSequence) -> Result<Var> {
        let rows = tape.gather_rows(b[self.text.token_embedding], &seq.ids)?;
        self.text_forward(tape, b, rows, seq.eos_index, &[])
    }

    /// Image tower over `count` images stacked as `[count·T×D]`, with the
    /// same prompt wiring as [`Clip::image_forward`]. Returns `[count×D]`.
    pub fn image_forward_batch(&self, tape: &mut Tape, b: &Binding, xs: Var, count: usize, prompts: &[Var]) -> Result<Var> {
        let (t, d) = (self.config.image_tokens, self.config.embed_dim);
        if count == 0 || tape.shape(xs) != [count * t, d] {
            return Err(CilmpError::dim("encode_image", tape.shape(xs), &[count * t, d]));
        }
        if prompts.len() > self.config.num_layers {
            return Err(CilmpError::Config(format!(
                "{} image prompt layers for {} blocks",
                prompts.len(),
                self.config.num_layers
            )));
        }
        let tower = &self.image;
        let p = prompts.first().map_or(0, |&v| tape.shape(v)[0]);
        let seg = t + 1 + p;
        let feats = tape.matmul(xs, b[tower.patch])?;
        let mut parts = Vec::with_capacity(count * 3);
        for i in 0..count {
            parts.push(b[tower.cls]);
            parts.push(tape.rows(feats, i * t, t)?);
            if let Some(&first) = prompts.first() {
                parts.push(first);
            }
        }
        let mut seq = tape.concat(&parts, 0)?;
        let pos = if p > 0 {
            let pad = tape.constant(Tensor::zeros(&[p, d]));
            tape.concat(&[b[tower.pos], pad], 0)?
        } else {
            b[tower.pos]
        };
        let pos = tile_rows(tape, pos, count)?;
        seq = tape.add(seq, pos)?;
        for (k, block) in tower.blocks.iter().enumerate() {
            if k > 0 {
                if let Some(&pk) = prompts.get(k) {
                    seq = overwrite_segments(tape, seq, seg, t + 1, pk)?;
                }
            }
            seq = block.forward_segments(tape, b, seq, seg, false)?;
        }
        let heads: Vec<usize> = (0..count).map(|i| i * seg).collect();
        let pooled = tape.gather_rows(seq, &heads)?;
        let pooled = tower.ln_post.forward(tape, b, pooled)?;
        let out = tape.matmul(pooled, b[tower.proj])?;
        tape.l2_normalize(out)
    }

    /// Text tower over `count` sequences of equal length `len` stacked as
    /// `[count·len×D]`, each ending in its end token. `slots` apply to every
    /// sequence. Returns `[count×D]`.
    pub fn text_forward_batch(
        &self,
        tape: &mut Tape,
        b: &Binding,
        rows: Var,
        len: usize,
        slots: &[DeepSlots],
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        if len > self.config.text_max_len {
            return Err(CilmpError::Length { len, max: self.config.text_max_len });
        }
        let total = tape.shape(rows)[0];
        if len == 0 || total == 0 || total % len != 0 || tape.shape(rows)[1] != d {
            return Err(CilmpError::dim("encode_text", tape.shape(rows), &[len, d]));
        }
        let count = total / len;
        for s in slots {
            if s.from_block + s.layers.len() > self.config.num_layers {
                return Err(CilmpError::Config(format!(
                    "prompt slots reach block {} of {}",
                    s.from_block + s.layers.len(),
                    self.config.num_layers
                )));
            }
        }
        let tower = &self.text;
        let mut seq = rows;
        for s in slots.iter().filter(|s| s.from_block == 0) {
            if let Some(&p) = s.layers.first() {
                seq = overwrite_segments(tape, seq, len, s.start, p)?;
            }
        }
        let pos = tape.rows(b[tower.pos], 0, len)?;
        let pos = tile_rows(tape, pos, count)?;
        seq = tape.add(seq, pos)?;
        for (k, block) in tower.blocks.iter().enumerate() {
            for s in slots {
                if k >= s.from_block.max(1) {
                    if let Some(&p) = s.layers.get(k - s.from_block) {
                        seq = overwrite_segments(tape, seq, len, s.start, p)?;
                    }
                }
            }
            seq = block.forward_segments(tape, b, seq, len, true)?;
        }
        let ends: Vec<usize> = (0..count).map(|i| i * len + len - 1).collect();
        let pooled = tape.gather_rows(seq, &ends)?;
        let pooled = tower.ln_final.forward(tape, b, pooled)?;
        let out = tape.matmul(pooled, b[tower.proj])?;
        tape.l2_normalize(out)
    }

    /// `z` for one image, as a `[D]` vector.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_finite() {
            return Err(CilmpError::Evaluation("image contains non-finite values".into()));
        }
        let mut tape = Tape::new();
        let b = self.store.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.image_forward(&mut tape, &b, xv, &[])?;
        Ok(Tensor::vector(tape.value(z).data().to_vec()))
    }

    /// `w` for one embedded sequence, as a `[D]` vector. `injected` holds
    /// per-block prompt rows written at `prompt_start` entering blocks
    /// `0, 1, ...`.
    pub fn encode_text(
        &self,
        seq: &TextSequence,
        injected: Option<(usize, &[Tensor])>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind_constants(&mut tape);
        let rows = tape.constant(seq.token_embeddings.clone());
        let slots: Vec<DeepSlots> = injected
            .map(|(start, layers)| DeepSlots {
                start,
                from_block: 0,
                layers: layers.iter().map(|t| tape.constant(t.clone())).collect(),
            })
            .into_iter()
            .collect();
        let w = self.text_forward(&mut tape, &b, rows, seq.eos_index, &slots)?;
        Ok(Tensor::vector(tape.value(w).data().to_vec()))
    }

    /// Writes the encoder checkpoint.
    pub fn save_encoders(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encoder_bytes()?)?;
        Ok(())
    }

    pub fn encoder_bytes(&self) -> Result<Vec<u8>> {
        let mut out = ENC_MAGIC.to_vec();
        for v in self.config.as_u32s()? {
            put_u32(&mut out, v);
        }
        for id in self.encoder_ids() {
            put_f64s(&mut out, self.store.get(id).data());
        }
        Ok(out)
    }

    pub fn load_encoders(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_encoder_bytes(&std::fs::read(path)?)
    }

    pub fn from_encoder_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ENC_MAGIC)?;
        let header_at = r.offset();
        let mut vals = [0usize; 7];
        for v in vals.iter_mut() {
            *v = r.u32("encoder config")? as usize;
        }
        let config = EncoderConfig {
            embed_dim: vals[0],
            num_layers: vals[1],
            hidden_dim: vals[2],
            image_tokens: vals[3],
            text_max_len: vals[4],
            vocab_size: vals[5],
            deep_prompt_layers: vals[6],
        };
        config
            .validate()
            .map_err(|e| CilmpError::format(header_at, e.to_string()))?;
        let expected = encoder_param_total(&config);
        if r.remaining() != expected.saturating_mul(8) {
            return Err(CilmpError::format(
                r.offset(),
                format!(
                    "payload holds {} bytes, config implies {}",
                    r.remaining(),
                    expected.saturating_mul(8)
                ),
            ));
        }
        let mut clip = Clip::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ids: Vec<ParamId> = clip.encoder_ids().collect();
        for id in ids {
            let n = clip.store.get(id).numel();
            let shape = clip.store.get(id).shape().to_vec();
            let data = r.f64s(n, clip.store.name(id))?;
            clip.store.set_unchecked(id, Tensor::new(shape, data)?);
        }
        r.finish()?;
        Ok(clip)
    }
}

/// Number of encoder scalars implied by a config.
pub fn encoder_param_total(c: &EncoderConfig) -> usize {
    let (d, h, n) = (c.embed_dim, c.hidden_dim, c.num_layers);
    let block = 4 * d * d + 2 * d * h + h + d + 4 * d;
    let image = d * d + d + (c.image_tokens + 1) * d + n * block + 2 * d + d * d;
    let text = c.vocab_size * d + c.text_max_len * d + n * block + 2 * d + d * d;
    image + text + 1
}

#[cfg(test)]
mod tests;
