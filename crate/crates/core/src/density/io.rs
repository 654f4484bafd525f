//! HVCM model files.
//!
//! Layout (little-endian): magic `HVCM`, u32 version, u32 json_len, a JSON
//! header, then for each class and each group: f64 weight, `d/G` f64 mean,
//! packed lower triangle of the Cholesky factor. The projection head
//! (`d x head_input_dim` weights, `d` bias) follows, and finally the encoder
//! parameters when the header names an encoder.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gaussian::{GroupGaussian, RidgePolicy};
use super::model::{ClassModel, Embedding, HvcmModel, ModelConfig};
use crate::attributes::{ProjectionHead, StatsMode};
use crate::error::{HvcmError, Result};
use crate::io_util::{write_atomic, Reader};
use crate::linalg::{packed_len, Cholesky};
use crate::trainer::encoder::{param_count, Encoder};

pub const MODEL_MAGIC: [u8; 4] = *b"HVCM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    groups: usize,
    d: usize,
    q: usize,
    classes: usize,
    stats_mode: StatsMode,
    ridge_policy: RidgePolicy,
    threshold: Option<f64>,
    class_counts: Vec<usize>,
    applied_ridge: Vec<Vec<f64>>,
    head_input_dim: usize,
    encoder_widths: Option<Vec<usize>>,
}

pub fn encode_model(model: &HvcmModel) -> Result<Vec<u8>> {
    let header = Header {
        groups: model.groups(),
        d: model.attr_dim(),
        q: model.input_dim(),
        classes: model.class_count(),
        stats_mode: model.config.stats_mode,
        ridge_policy: model.config.ridge_policy,
        threshold: model.threshold,
        class_counts: model.classes.iter().map(|c| c.count).collect(),
        applied_ridge: model
            .classes
            .iter()
            .map(|c| c.components.iter().map(GroupGaussian::ridge).collect())
            .collect(),
        head_input_dim: model.embedding.head.input_dim(),
        encoder_widths: model.embedding.encoder.as_ref().map(|e| e.widths().to_vec()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| HvcmError::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for class in &model.classes {
        for (comp, &w) in class.components.iter().zip(&class.weights) {
            put(w);
            comp.mean().iter().for_each(|&v| put(v));
            comp.chol().packed().into_iter().for_each(&mut put);
        }
    }
    let head = &model.embedding.head;
    head.weight().iter().chain(head.bias()).for_each(|&v| put(v));
    if let Some(enc) = &model.embedding.encoder {
        enc.params().iter().for_each(|&v| put(v));
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<HvcmModel> {
    let mut r = Reader::new(bytes);
    let magic = r.array4()?;
    if magic != MODEL_MAGIC {
        return Err(HvcmError::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(HvcmError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| HvcmError::Malformed(format!("model header: {e}")))?;
    let Header {
        groups,
        d,
        q,
        classes,
        ..
    } = header;
    crate::attributes::check_group_count(d, groups)
        .map_err(|e| HvcmError::Malformed(format!("model header: {e}")))?;
    if header.class_counts.len() != classes
        || header.applied_ridge.len() != classes
        || header.applied_ridge.iter().any(|r| r.len() != groups)
    {
        return Err(HvcmError::Malformed("model header: per-class arrays have wrong length".into()));
    }
    let width = d / groups;
    let mut class_models = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut components = Vec::with_capacity(groups);
        let mut weights = Vec::with_capacity(groups);
        for g in 0..groups {
            weights.push(r.f64()?);
            let mean = r.f64s(width)?;
            let chol = Cholesky::from_packed(&r.f64s(packed_len(width))?, width)
                .ok_or_else(|| HvcmError::Malformed(format!("class {c} group {g}: bad factor")))?;
            components.push(GroupGaussian::from_factor(mean, chol, header.applied_ridge[c][g])?);
        }
        class_models.push(ClassModel {
            class_id: c,
            count: header.class_counts[c],
            components,
            weights,
        });
    }
    let head_in = header.head_input_dim;
    let head_weight = r.f64s(d * head_in)?;
    let head_bias = r.f64s(d)?;
    let head = ProjectionHead::new(head_in, d, head_weight, head_bias)?;
    let encoder = match header.encoder_widths {
        Some(widths) => {
            let params = r.f64s(param_count(&widths))?;
            let enc = Encoder::from_parts(widths, params)?;
            if enc.output_dim() != head_in {
                return Err(HvcmError::Malformed("encoder output does not feed the head".into()));
            }
            Some(enc)
        }
        None => None,
    };
    if r.remaining() != 0 {
        return Err(HvcmError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let embedding = Embedding { encoder, head };
    if embedding.input_dim() != q {
        return Err(HvcmError::Malformed("header q disagrees with the embedding".into()));
    }
    Ok(HvcmModel {
        classes: class_models,
        config: ModelConfig {
            groups,
            ridge_policy: header.ridge_policy,
            stats_mode: header.stats_mode,
        },
        embedding,
        threshold: header.threshold,
        frozen: true,
    })
}

pub fn save_model(model: &HvcmModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HvcmModel> {
    decode_model(&fs::read(path)?)
}
