use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Clip, TokenSequence};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CilmpError, Result};
use crate::params::{Binding, Optimizer, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::Adam {
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
        }
    }
}

/// Symmetric contrastive loss and its two directions.
#[derive(Clone, Copy, Debug)]
pub struct ClipLoss {
    pub total: Var,
    pub image_to_text: Var,
    pub text_to_image: Var,
}

/// Contrastive loss over matched rows of `z` and `w` (both `[N×D]`) with
/// logits `z wᵀ / τ`, `τ = exp(log_tau)`.
pub fn info_nce(tape: &mut Tape, z: Var, w: Var, log_tau: Var) -> Result<ClipLoss> {
    let n = tape.shape(z)[0];
    if n < 2 {
        return Err(CilmpError::Config(
            "contrastive loss needs at least two pairs per batch".into(),
        ));
    }
    let sims = tape.matmul_nt(z, w)?;
    let neg = tape.scale(log_tau, -1.0)?;
    let inv_tau = tape.exp(neg)?;
    let logits = tape.scale_by(sims, inv_tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let image_to_text = tape.softmax_cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let text_to_image = tape.softmax_cross_entropy(lt, &targets)?;
    let sum = tape.add(image_to_text, text_to_image)?;
    let total = tape.scale(sum, 0.5)?;
    Ok(ClipLoss {
        total,
        image_to_text,
        text_to_image,
    })
}

/// Splits `0..n` into shuffled batches, folding a trailing singleton into
/// the previous batch.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

impl Clip {
    /// Image and caption embeddings of the selected pairs. Captions of one
    /// common length that end in their end token share a single stacked pass.
    fn embed_pairs(
        &self,
        tape: &mut Tape,
        b: &Binding,
        images: &[Tensor],
        captions: &[TokenSequence],
        batch: &[usize],
    ) -> Result<(Var, Var)> {
        let len = captions[batch[0]].ids.len();
        let uniform = batch
            .iter()
            .all(|&i| captions[i].ids.len() == len && captions[i].eos_index + 1 == len);
        let shape = images[batch[0]].shape().to_vec();
        if uniform && batch.iter().all(|&i| images[i].shape() == shape.as_slice()) {
            let mut pixels = Vec::with_capacity(batch.len() * images[batch[0]].numel());
            let mut ids = Vec::with_capacity(batch.len() * len);
            for &i in batch {
                pixels.extend_from_slice(images[i].data());
                ids.extend_from_slice(&captions[i].ids);
            }
            let xs = tape.constant(Tensor::new(vec![batch.len() * shape[0], shape[1]], pixels)?);
            let z = self.image_forward_batch(tape, b, xs, batch.len(), &[])?;
            let rows = tape.gather_rows(b[self.text.token_embedding], &ids)?;
            let w = self.text_forward_batch(tape, b, rows, len, &[])?;
            return Ok((z, w));
        }
        let mut zs = Vec::with_capacity(batch.len());
        let mut ws = Vec::with_capacity(batch.len());
        for &i in batch {
            let x = tape.constant(images[i].clone());
            zs.push(self.image_forward(tape, b, x, &[])?);
            ws.push(self.caption_forward(tape, b, &captions[i])?);
        }
        Ok((tape.concat(&zs, 0)?, tape.concat(&ws, 0)?))
    }

    /// Contrastive pretraining of both towers and the temperature. Returns
    /// the mean loss of every epoch.
    pub fn pretrain(
        &mut self,
        images: &[Tensor],
        captions: &[TokenSequence],
        opts: &PretrainOptions,
    ) -> Result<Vec<f64>> {
        if images.len() != captions.len() {
            return Err(CilmpError::dim("pretrain", &[images.len()], &[captions.len()]));
        }
        if images.len() < 2 || opts.batch_size < 2 {
            return Err(CilmpError::Config(
                "contrastive pretraining needs batches of at least two pairs".into(),
            ));
        }
        if self.frozen.is_some() {
            return Err(CilmpError::Frozen("encoders".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Optimizer::new(opts.optimizer.clone());
        let mut trace = Vec::with_capacity(opts.epochs);
        for epoch in 0..opts.epochs {
            let mut total = 0.0;
            let plan = batches(images.len(), opts.batch_size, &mut rng);
            for batch in &plan {
                let mut tape = Tape::new();
                let b = self.store.bind(&mut tape);
                let (z, w) = self.embed_pairs(&mut tape, &b, images, captions, batch)?;
                let loss = info_nce(&mut tape, z, w, b[self.log_tau])?;
                let value = tape.value(loss.total).item();
                if !value.is_finite() {
                    return Err(CilmpError::Numerical(format!(
                        "pretraining loss is {value} at epoch {epoch}"
                    )));
                }
                total += value;
                let grads = tape.backward(loss.total)?;
                opt.step(&mut self.store, &b, &grads)?;
            }
            trace.push(total / plan.len() as f64);
        }
        Ok(trace)
    }
}
