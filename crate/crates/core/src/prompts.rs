//! Adaptive class prompts built from intervened concept tokens and learnable
//! context, the tuning loss, and inference.
//!
//! Every class prompt is the text sequence
//!
//! ```text
//! [ h̃_y (L_h rows) ; V (L rows) ; class token ; end token ]
//! ```
//!
//! where `h̃_y = B A Ψ(h_y, z)` row-wise. Prompts of all classes (and, for
//! image-conditioned modes, of all images in a batch) go through the text
//! tower in one stacked pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::concepts::ConceptBank;
use crate::encoders::{vocab, Clip, DeepSlots, EncoderConfig, EMBED_STD};
use crate::error::{CilmpError, Result};
use crate::intervention::{
    orthonormalize_rows, side_rows, BilateralIds, InterventionMode, InterventionShape, PositionSets,
};
use crate::params::{Binding, Optimizer, ParamId, ParamStore};

/// Which variant of the prompt learner is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Image-conditioned intervention through the relationship descriptor.
    Cilmp,
    /// Image-conditioned intervention without the product term.
    NoRd,
    /// Unconditional intervention.
    NoConditional,
    /// Projected concept tokens with no intervention.
    NoIntervention,
    /// Context tokens and class token only.
    CoopBaseline,
    /// Full model over a bank whose layers are pooled into one vector.
    TextMode,
}

impl PromptMode {
    pub const ALL: [PromptMode; 6] = [
        PromptMode::Cilmp,
        PromptMode::NoRd,
        PromptMode::NoConditional,
        PromptMode::NoIntervention,
        PromptMode::CoopBaseline,
        PromptMode::TextMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Cilmp => "cilmp",
            PromptMode::NoRd => "no_rd",
            PromptMode::NoConditional => "no_conditional",
            PromptMode::NoIntervention => "no_intervention",
            PromptMode::CoopBaseline => "coop_baseline",
            PromptMode::TextMode => "text_mode",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CilmpError::Config(format!("unknown mode `{s}`")))
    }

    pub fn intervention(self) -> InterventionMode {
        match self {
            PromptMode::Cilmp | PromptMode::TextMode => InterventionMode::Conditional,
            PromptMode::NoRd => InterventionMode::ImageOnly,
            PromptMode::NoConditional => InterventionMode::Unconditional,
            PromptMode::NoIntervention | PromptMode::CoopBaseline => InterventionMode::Identity,
        }
    }

    pub fn uses_bank(self) -> bool {
        self != PromptMode::CoopBaseline
    }

    pub fn uses_image(self) -> bool {
        self.intervention().uses_image()
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Text context length `L`.
    pub context_len: usize,
    /// Image prompt tokens per deep layer; 0 disables image prompts.
    pub image_prompt_len: usize,
    pub r_proj: usize,
    pub r_sub: usize,
    pub r_z: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    /// Re-orthonormalise the rows of every `R` after each optimizer step.
    pub orthonormalize_r: bool,
    /// Initial RMS of projected concept rows relative to the token
    /// embeddings.
    pub projection_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            context_len: 4,
            image_prompt_len: 4,
            r_proj: 8,
            r_sub: 8,
            r_z: 8,
            prefix_len: 4,
            suffix_len: 4,
            orthonormalize_r: false,
            projection_scale: 1.0,
        }
    }
}

impl PromptConfig {
    pub fn positions(&self) -> PositionSets {
        PositionSets {
            prefix: self.prefix_len,
            suffix: self.suffix_len,
        }
    }

    fn shape(&self, enc: &EncoderConfig, width: usize) -> InterventionShape {
        InterventionShape {
            concept_dim: width,
            prompt_dim: enc.embed_dim,
            rank: self.r_sub,
            z_rank: self.r_z,
        }
    }
}

/// Snapshot of the context parameters and class-token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext {
    /// `V` per deep layer, each `[L×D_p]`.
    pub layers: Vec<Tensor>,
    /// One frozen embedding row per class, `[C×D_p]`.
    pub class_embeddings: Tensor,
}

/// `W = B A` with `A: [r×D_h]`, `B: [D_p×r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub a: Tensor,
    pub b: Tensor,
}

/// Concept rows followed by context rows; the class and end tokens are
/// appended when the prompt is turned into a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptivePrompt {
    pub tokens: Tensor,
    pub class_row: Tensor,
}

impl AdaptivePrompt {
    /// Full embedded sequence `[tokens; class; end]`.
    pub fn sequence(&self, end_row: &Tensor) -> Result<crate::encoders::TextSequence> {
        let d = self.tokens.cols();
        let mut data = self.tokens.data().to_vec();
        data.extend_from_slice(self.class_row.data());
        data.extend_from_slice(end_row.data());
        let rows = self.tokens.rows() + 2;
        Ok(crate::encoders::TextSequence {
            token_embeddings: Tensor::new(vec![rows, d], data)?,
            eos_index: rows - 1,
        })
    }
}

/// Shared first-layer context and the class-name row of `class_index`.
pub fn build_base_prompt(class_index: usize, ctx: &PromptContext) -> Result<(Tensor, Tensor)> {
    let c = ctx.class_embeddings.rows();
    if class_index >= c {
        return Err(CilmpError::Index { index: class_index, len: c });
    }
    let v = ctx
        .layers
        .first()
        .cloned()
        .ok_or_else(|| CilmpError::Config("prompt context has no layers".into()))?;
    let row = Tensor::new(vec![1, ctx.class_embeddings.cols()], ctx.class_embeddings.row(class_index).to_vec())?;
    Ok((v, row))
}

/// `h̃ = h̄ Aᵀ Bᵀ` row-wise.
pub fn project(h_seq: &Tensor, proj: &ProjectionParams) -> Result<Tensor> {
    let (a, b) = (&proj.a, &proj.b);
    if h_seq.cols() != a.cols() || b.cols() != a.rows() {
        return Err(CilmpError::dim("project", h_seq.shape(), a.shape()));
    }
    h_seq.matmul(&a.transpose())?.matmul(&b.transpose())
}

/// `[h̃; V]` plus the class row. Fails when the full sequence (with class
/// and end tokens) would exceed `max_len`.
pub fn assemble(h_tilde: &Tensor, class_index: usize, ctx: &PromptContext, max_len: usize) -> Result<AdaptivePrompt> {
    let (v, class_row) = build_base_prompt(class_index, ctx)?;
    if h_tilde.rows() > 0 && h_tilde.cols() != v.cols() {
        return Err(CilmpError::dim("assemble", h_tilde.shape(), v.shape()));
    }
    let len = h_tilde.rows() + v.rows() + 2;
    if len > max_len {
        return Err(CilmpError::Length { len, max: max_len });
    }
    let mut data = h_tilde.data().to_vec();
    data.extend_from_slice(v.data());
    Ok(AdaptivePrompt {
        tokens: Tensor::new(vec![h_tilde.rows() + v.rows(), v.cols()], data)?,
        class_row,
    })
}

#[derive(Clone, Copy, Debug)]
struct ProjectionIds {
    a: ParamId,
    b: ParamId,
}

/// Class probabilities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Frozen encoders plus every prompt-side parameter of one mode.
#[derive(Clone, Debug)]
pub struct PromptModel {
    clip: Clip,
    bank: ConceptBank,
    mode: PromptMode,
    config: PromptConfig,
    class_tokens: Vec<usize>,
    text_ctx: Vec<ParamId>,
    image_ctx: Vec<ParamId>,
    projection: Option<ProjectionIds>,
    intervention: BilateralIds,
    prompt_ids: Vec<ParamId>,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Rows per image handled in one inference tape.
const EVAL_CHUNK: usize = 32;

impl PromptModel {
    /// Freezes the encoders of `clip` and registers the prompt parameters of
    /// `mode`. Shared parameters are drawn first and in a fixed order, so two
    /// modes built from the same `rng` state start from identical values.
    pub fn new<R: Rng + ?Sized>(
        mut clip: Clip,
        bank: &ConceptBank,
        class_tokens: Vec<usize>,
        mode: PromptMode,
        config: PromptConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = bank.num_classes();
        if c < 2 {
            return Err(CilmpError::Config(format!("{c} classes; at least 2 are needed")));
        }
        if class_tokens.len() != c {
            return Err(CilmpError::Config(format!(
                "{} class tokens for {c} classes",
                class_tokens.len()
            )));
        }
        let enc = clip.config().clone();
        if let Some(&t) = class_tokens.iter().find(|&&t| t >= enc.vocab_size) {
            return Err(CilmpError::Index { index: t, len: enc.vocab_size });
        }
        if config.context_len == 0 {
            return Err(CilmpError::Config("context length must be at least 1".into()));
        }
        if config.r_proj == 0 {
            return Err(CilmpError::Config("r_proj must be positive".into()));
        }
        let bank = if mode == PromptMode::TextMode { bank.pooled()? } else { bank.clone() };
        let len = Self::sequence_len_for(mode, &config, bank.seq_len());
        if len > enc.text_max_len {
            return Err(CilmpError::Length { len, max: enc.text_max_len });
        }
        if mode.uses_bank() {
            config.positions().validate(bank.seq_len())?;
        }
        clip.freeze();

        let d = enc.embed_dim;
        let depth = enc.deep_prompt_layers;
        let mut prompt_ids = Vec::new();
        let template_rows: Vec<Tensor> = vocab::TEMPLATE
            .iter()
            .take(config.context_len)
            .map(|&t| clip.token_row(t))
            .collect::<Result<_>>()?;
        let token_rms = clip.token_rms();
        let store = clip.store_mut();
        let mut text_ctx = Vec::with_capacity(depth);
        for k in 0..depth {
            let mut v = Tensor::randn(&[config.context_len, d], EMBED_STD, rng);
            if k == 0 {
                for (i, row) in template_rows.iter().enumerate() {
                    v.data_mut()[i * d..(i + 1) * d].copy_from_slice(row.data());
                }
            }
            text_ctx.push(store.add(format!("prompt.text_ctx.{k}"), v));
        }
        let mut image_ctx = Vec::new();
        if config.image_prompt_len > 0 {
            for k in 0..depth {
                let v = Tensor::randn(&[config.image_prompt_len, d], EMBED_STD, rng);
                image_ctx.push(store.add(format!("prompt.image_ctx.{k}"), v));
            }
        }
        prompt_ids.extend(&text_ctx);
        prompt_ids.extend(&image_ctx);
        let projection = if mode.uses_bank() {
            let r = config.r_proj;
            let a = store.add("projection.A", Tensor::randn(&[r, bank.width()], 1.0, rng));
            // Unit concept rows map to tokens at the scale of the vocabulary.
            let b = store.add("projection.B", Tensor::randn(&[d, r], config.projection_scale * token_rms / (r as f64).sqrt(), rng));
            prompt_ids.extend([a, b]);
            Some(ProjectionIds { a, b })
        } else {
            None
        };
        let intervention = BilateralIds::register(
            store,
            config.shape(&enc, bank.width()),
            config.positions(),
            mode.intervention(),
            rng,
        )?;
        prompt_ids.extend(intervention.ids());
        Ok(PromptModel {
            clip,
            bank,
            mode,
            config,
            class_tokens,
            text_ctx,
            image_ctx,
            projection,
            intervention,
            prompt_ids,
        })
    }

    fn sequence_len_for(mode: PromptMode, config: &PromptConfig, seq_len: usize) -> usize {
        let concepts = if mode.uses_bank() { seq_len } else { 0 };
        concepts + config.context_len + 2
    }

    /// Trainable scalars implied by the shapes alone.
    pub fn param_formula(mode: PromptMode, config: &PromptConfig, enc: &EncoderConfig, seq_len: usize, width: usize) -> usize {
        let _ = seq_len;
        let d = enc.embed_dim;
        let depth = enc.deep_prompt_layers;
        let ctx = depth * config.context_len * d + depth * config.image_prompt_len * d;
        if !mode.uses_bank() {
            return ctx;
        }
        let proj = config.r_proj * width + d * config.r_proj;
        ctx + proj + BilateralIds::param_count(mode.intervention(), config.shape(enc, width))
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn clip(&self) -> &Clip {
        &self.clip
    }

    pub fn store(&self) -> &ParamStore {
        self.clip.store()
    }

    /// The bank prompts are built from (pooled in text mode).
    pub fn bank(&self) -> &ConceptBank {
        &self.bank
    }

    pub fn num_classes(&self) -> usize {
        self.bank.num_classes()
    }

    pub fn class_tokens(&self) -> &[usize] {
        &self.class_tokens
    }

    /// Trainable parameters in registry order.
    pub fn prompt_ids(&self) -> &[ParamId] {
        &self.prompt_ids
    }

    /// Intervention parameters in registry order.
    pub fn intervention_ids(&self) -> Vec<ParamId> {
        self.intervention.ids()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store().trainable_count()
    }

    pub fn sequence_len(&self) -> usize {
        Self::sequence_len_for(self.mode, &self.config, self.bank.seq_len())
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.clip.encoder_checksum()
    }

    pub fn context(&self) -> Result<PromptContext> {
        let store = self.store();
        let mut rows = Vec::new();
        for &t in &self.class_tokens {
            rows.extend_from_slice(self.clip.token_row(t)?.data());
        }
        Ok(PromptContext {
            layers: self.text_ctx.iter().map(|&id| store.get(id).clone()).collect(),
            class_embeddings: Tensor::new(vec![self.class_tokens.len(), self.clip.config().embed_dim], rows)?,
        })
    }

    pub fn projection_params(&self) -> Option<ProjectionParams> {
        self.projection.map(|p| ProjectionParams {
            a: self.store().get(p.a).clone(),
            b: self.store().get(p.b).clone(),
        })
    }

    /// Overwrites one prompt parameter.
    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.clip.store_mut().set(id, value)
    }

    fn stack_images(images: &[&Tensor], enc: &EncoderConfig) -> Result<Tensor> {
        let (t, d) = (enc.image_tokens, enc.embed_dim);
        let mut data = Vec::with_capacity(images.len() * t * d);
        for x in images {
            if x.shape() != [t, d] {
                return Err(CilmpError::dim("encode_image", x.shape(), &[t, d]));
            }
            if !x.is_finite() {
                return Err(CilmpError::Evaluation("image contains non-finite values".into()));
            }
            data.extend_from_slice(x.data());
        }
        Tensor::new(vec![images.len() * t, d], data)
    }

    /// Normalised image embeddings `[B×D]` through the image prompts.
    pub fn image_embeddings(&self, tape: &mut Tape, b: &Binding, images: &[&Tensor]) -> Result<Var> {
        let xs = tape.constant(Self::stack_images(images, self.clip.config())?);
        let prompts: Vec<Var> = self.image_ctx.iter().map(|&id| b[id]).collect();
        self.clip.image_forward_batch(tape, b, xs, images.len(), &prompts)
    }

    /// Intervened concept rows of `pairs` (class, image row of `m`) stacked
    /// as `[pairs·L_h×D_h]`.
    fn intervened(&self, tape: &mut Tape, b: &Binding, pairs: &[(usize, usize)], m: Option<Var>) -> Result<Var> {
        let (l, dh) = (self.bank.seq_len(), self.bank.width());
        let c = self.bank.num_classes();
        let table = tape.constant(Tensor::new(vec![c * l, dh], self.bank.data().to_vec())?);
        let ids = &self.intervention;
        let pos = self.config.positions();
        let mode = self.mode.intervention();
        if mode == InterventionMode::Identity || pos.prefix + pos.suffix == 0 {
            let idx: Vec<usize> = pairs.iter().flat_map(|&(y, _)| (0..l).map(move |i| y * l + i)).collect();
            return tape.gather_rows(table, &idx);
        }
        let side = |tape: &mut Tape, start: usize, len: usize, s: Option<crate::intervention::SideIds>| -> Result<Option<Var>> {
            if len == 0 {
                return Ok(None);
            }
            let s = s.ok_or_else(|| CilmpError::Config("intervention parameters missing".into()))?;
            let idx: Vec<usize> = pairs
                .iter()
                .flat_map(|&(y, _)| (start..start + len).map(move |i| y * l + i))
                .collect();
            let h = tape.gather_rows(table, &idx)?;
            let mrows = match m {
                Some(m) => {
                    let midx: Vec<usize> = pairs.iter().flat_map(|&(_, i)| std::iter::repeat_n(i, len)).collect();
                    Some(tape.gather_rows(m, &midx)?)
                }
                None => None,
            };
            Ok(Some(side_rows(tape, h, mrows, (b[s.r], b[s.w], b[s.b]), mode)?))
        };
        let pre = side(tape, 0, pos.prefix, ids.prefix)?;
        let suf = side(tape, pos.suffix_start(l), pos.suffix, ids.suffix)?;
        // Pool = [prefix rows; suffix rows; untouched bank], then one gather.
        let n = pairs.len();
        let mut pool = Vec::with_capacity(3);
        pool.extend(pre);
        pool.extend(suf);
        pool.push(table);
        let pool = tape.concat(&pool, 0)?;
        let suf_base = n * pos.prefix;
        let bank_base = suf_base + n * pos.suffix;
        let suffix_start = pos.suffix_start(l);
        let mut idx = Vec::with_capacity(n * l);
        for (k, &(y, _)) in pairs.iter().enumerate() {
            for i in 0..l {
                idx.push(if i < pos.prefix {
                    k * pos.prefix + i
                } else if i >= suffix_start {
                    suf_base + k * pos.suffix + (i - suffix_start)
                } else {
                    bank_base + y * l + i
                });
            }
        }
        tape.gather_rows(pool, &idx)
    }

    /// Normalised text embeddings of the prompts for `pairs`, `[pairs×D]`.
    fn prompt_embeddings(&self, tape: &mut Tape, b: &Binding, pairs: &[(usize, usize)], m: Option<Var>) -> Result<Var> {
        let n = pairs.len();
        let len = self.sequence_len();
        let ctx_len = self.config.context_len;
        let mut token_ids = self.class_tokens.clone();
        token_ids.push(vocab::EOS);
        let tokens = tape.gather_rows(b[self.clip.token_embedding()], &token_ids)?;
        let v0 = b[self.text_ctx[0]];
        let (pool, concept_rows) = match self.projection {
            Some(p) => {
                let h_bar = self.intervened(tape, b, pairs, m)?;
                let low = tape.matmul_nt(h_bar, b[p.a])?;
                let h_tilde = tape.matmul_nt(low, b[p.b])?;
                (tape.concat(&[h_tilde, v0, tokens], 0)?, self.bank.seq_len())
            }
            None => (tape.concat(&[v0, tokens], 0)?, 0),
        };
        let ctx_base = n * concept_rows;
        let tok_base = ctx_base + ctx_len;
        let c = self.class_tokens.len();
        let mut idx = Vec::with_capacity(n * len);
        for (k, &(y, _)) in pairs.iter().enumerate() {
            idx.extend((0..concept_rows).map(|i| k * concept_rows + i));
            idx.extend((0..ctx_len).map(|i| ctx_base + i));
            idx.push(tok_base + y);
            idx.push(tok_base + c);
        }
        let rows = tape.gather_rows(pool, &idx)?;
        let slots = if self.text_ctx.len() > 1 {
            vec![DeepSlots {
                start: concept_rows,
                from_block: 1,
                layers: self.text_ctx[1..].iter().map(|&id| b[id]).collect(),
            }]
        } else {
            Vec::new()
        };
        self.clip.text_forward_batch(tape, b, rows, len, &slots)
    }

    /// Class text embeddings for every image: `[B·C×D]` ordered image-major
    /// when the prompts depend on the image, `[C×D]` otherwise.
    pub fn class_embeddings(&self, tape: &mut Tape, b: &Binding, z: Var) -> Result<Var> {
        let c = self.num_classes();
        if self.mode.uses_image() {
            let count = tape.shape(z)[0];
            let m = self.intervention.image_code(tape, b, z)?;
            let pairs: Vec<(usize, usize)> = (0..count).flat_map(|i| (0..c).map(move |y| (y, i))).collect();
            self.prompt_embeddings(tape, b, &pairs, m)
        } else {
            let pairs: Vec<(usize, usize)> = (0..c).map(|y| (y, 0)).collect();
            self.prompt_embeddings(tape, b, &pairs, None)
        }
    }

    /// `z_iᵀ g(p̃_c) / τ` as `[B×C]`.
    pub fn logits(&self, tape: &mut Tape, b: &Binding, images: &[&Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(CilmpError::Config("empty batch".into()));
        }
        let z = self.image_embeddings(tape, b, images)?;
        let w = self.class_embeddings(tape, b, z)?;
        let sims = tape.matmul_nt(z, w)?;
        let sims = if self.mode.uses_image() {
            // Keep the block-diagonal entries z_i · w_(i,c) and fold to [B×C].
            let (n, c) = (images.len(), self.num_classes());
            let mut mask = vec![0.0; n * n * c];
            let mut fold = vec![0.0; n * c * c];
            for i in 0..n {
                for y in 0..c {
                    mask[i * n * c + i * c + y] = 1.0;
                }
            }
            for s in 0..n * c {
                fold[s * c + s % c] = 1.0;
            }
            let mask = tape.constant(Tensor::new(vec![n, n * c], mask)?);
            let fold = tape.constant(Tensor::new(vec![n * c, c], fold)?);
            let kept = tape.hadamard(sims, mask)?;
            tape.matmul(kept, fold)?
        } else {
            sims
        };
        tape.scale(sims, 1.0 / self.clip.temperature())
    }

    /// Mean cross-entropy of the class logits against `labels`.
    pub fn loss(&self, tape: &mut Tape, b: &Binding, images: &[&Tensor], labels: &[usize]) -> Result<Var> {
        if images.len() != labels.len() {
            return Err(CilmpError::dim("cilmp_loss", &[images.len()], &[labels.len()]));
        }
        let c = self.num_classes();
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(CilmpError::Label { label: y, classes: c });
        }
        let logits = self.logits(tape, b, images)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Loss value with every parameter held constant.
    pub fn loss_value(&self, images: &[&Tensor], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.store().bind_constants(&mut tape);
        let l = self.loss(&mut tape, &b, images, labels)?;
        Ok(tape.value(l).item())
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_step(&mut self, opt: &mut Optimizer, images: &[&Tensor], labels: &[usize]) -> Result<f64> {
        Ok(self.train_step_stats(opt, images, labels)?.loss)
    }

    /// As [`PromptModel::train_step`], also reporting the gradient norm over
    /// the prompt parameters.
    pub fn train_step_stats(&mut self, opt: &mut Optimizer, images: &[&Tensor], labels: &[usize]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let b = self.store().bind(&mut tape);
        let l = self.loss(&mut tape, &b, images, labels)?;
        let loss = tape.value(l).item();
        if !loss.is_finite() {
            return Err(CilmpError::Numerical(format!("loss is {loss}")));
        }
        let grads = tape.backward(l)?;
        let grad_norm = self
            .prompt_ids
            .iter()
            .filter_map(|&id| grads.get(b[id]))
            .flat_map(|g| g.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(CilmpError::Numerical(format!("gradient norm is {grad_norm} at loss {loss}")));
        }
        opt.step(self.clip.store_mut(), &b, &grads)?;
        if self.config.orthonormalize_r {
            self.reorthonormalize();
        }
        Ok(StepStats { loss, grad_norm })
    }

    /// Replaces every `R` by its row-orthonormalised version.
    pub fn reorthonormalize(&mut self) {
        let sides = [self.intervention.prefix, self.intervention.suffix];
        let store = self.clip.store_mut();
        for s in sides.into_iter().flatten() {
            let (q, _) = orthonormalize_rows(store.get(s.r));
            store.set_unchecked(s.r, q);
        }
    }

    /// Class probabilities for each image.
    pub fn predict_batch(&self, images: &[&Tensor]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let b = self.store().bind_constants(&mut tape);
            let logits = self.logits(&mut tape, &b, chunk)?;
            let probs = tape.softmax_rows(logits, crate::autodiff::Mask::None)?;
            let p = tape.value(probs);
            for i in 0..chunk.len() {
                let row = p.row(i).to_vec();
                out.push(Prediction {
                    label: argmax(&row),
                    probabilities: row,
                });
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    /// Class text embeddings conditioned on one image, `[C×D]`.
    pub fn class_text_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store().bind_constants(&mut tape);
        let z = self.image_embeddings(&mut tape, &b, &[x])?;
        let w = self.class_embeddings(&mut tape, &b, z)?;
        Ok(tape.value(w).clone())
    }
}
