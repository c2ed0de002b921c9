//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "CILMPCKPT1" | u32 n | n bytes of config JSON | every parameter value as f64
//! ```
//!
//! Parameters follow registry order: encoders first, then the prompt
//! parameters of the configured mode.

use std::path::Path;

use serde_json::Value;

use super::config::ExperimentConfig;
use super::data::{stream, Stream, SyntheticDataset};
use super::train::build_model;
use crate::autodiff::Tensor;
use crate::binio::{put_f64s, put_u32, to_u32, Reader};
use crate::concepts::ConceptBank;
use crate::encoders::Clip;
use crate::error::{CilmpError, Result};
use crate::prompts::PromptModel;

pub const CHECKPOINT_MAGIC: &[u8] = b"CILMPCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub values: Vec<f64>,
    /// Byte offset of the first parameter value.
    values_offset: usize,
}

pub fn checkpoint_bytes(cfg: &ExperimentConfig, model: &PromptModel) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg)?;
    let store = model.store();
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + json.len() + 8 * store.total_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, to_u32(json.len(), "config length")?);
    out.extend_from_slice(&json);
    for e in store.entries() {
        put_f64s(&mut out, e.value.data());
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ExperimentConfig, model: &PromptModel) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(cfg, model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Fields that fix parameter shapes, as a JSON tree.
fn structure(cfg: &ExperimentConfig) -> Value {
    let mut prompt = serde_json::to_value(&cfg.prompt).expect("serialisable");
    if let Some(p) = prompt.as_object_mut() {
        p.remove("orthonormalize_r");
        p.remove("projection_scale");
    }
    serde_json::json!({
        "classes": cfg.classes,
        "mode": cfg.mode,
        "encoder": cfg.encoder,
        "bank": { "seq_len": cfg.bank.seq_len, "width": cfg.bank.width },
        "prompt": prompt,
    })
}

/// First dotted path at which two JSON trees differ.
fn first_difference(a: &Value, b: &Value, path: &str) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, &sub) {
                            return Some(d);
                        }
                    }
                    None => return Some((sub, va.to_string(), "nothing".into())),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.u32("config length")? as usize;
        let at = r.offset();
        let json = r.take(n, "config")?;
        let config: ExperimentConfig = serde_json::from_slice(json)
            .map_err(|e| CilmpError::format(at, format!("config JSON: {e}")))?;
        let values_offset = r.offset();
        if r.remaining() % 8 != 0 {
            return Err(CilmpError::format(
                values_offset,
                format!("parameter block of {} bytes is not a whole number of f64", r.remaining()),
            ));
        }
        let values = r.f64s(r.remaining() / 8, "parameters")?;
        r.finish()?;
        Ok(Checkpoint {
            config,
            values,
            values_offset,
        })
    }

    /// Errors with the first shape-relevant field where the checkpoint's
    /// config differs from `expected`.
    pub fn check_compatible(&self, expected: &ExperimentConfig) -> Result<()> {
        match first_difference(&structure(&self.config), &structure(expected), "") {
            None => Ok(()),
            Some((field, ours, theirs)) => Err(CilmpError::format(
                CHECKPOINT_MAGIC.len() + 4,
                format!("config field `{field}` is {ours} in the checkpoint but {theirs} expected"),
            )),
        }
    }

    /// Rebuilds the trained model over the world's bank and class tokens.
    pub fn restore(&self, ds: &SyntheticDataset, bank: &ConceptBank) -> Result<PromptModel> {
        let cfg = &self.config;
        let mut clip = Clip::new(cfg.encoder.clone(), &mut stream(cfg.seed, Stream::EncoderInit))?;
        let mut values = self.values.iter().copied();
        let mut offset = self.values_offset;
        let mut take = |shape: &[usize], offset: &mut usize| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(CilmpError::format(*offset, "truncated parameter block"));
            }
            *offset += 8 * n;
            Tensor::new(shape.to_vec(), data)
        };
        let encoder_ids: Vec<_> = clip.encoder_ids().collect();
        for &id in &encoder_ids {
            let shape = clip.store().get(id).shape().to_vec();
            let t = take(&shape, &mut offset)?;
            clip.store_mut().set(id, t)?;
        }
        let mut model = build_model(cfg, ds, bank, clip)?;
        let rest: Vec<_> = model.store().ids().skip(encoder_ids.len()).collect();
        for id in rest {
            let shape = model.store().get(id).shape().to_vec();
            let t = take(&shape, &mut offset)?;
            model.set_param(id, t)?;
        }
        let used = (offset - self.values_offset) / 8;
        if used != self.values.len() || model.store().total_count() != used {
            return Err(CilmpError::format(
                offset,
                format!("checkpoint holds {} values, the model has {}", self.values.len(), model.store().total_count()),
            ));
        }
        Ok(model)
    }
}
