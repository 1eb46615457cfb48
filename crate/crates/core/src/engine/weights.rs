//! Weight file: `u32` little-endian header length, a UTF-8 JSON header, then
//! every tensor as little-endian f32 in header order.
//!
//! Header: `{"format": "kvprune-tiny-f32", "config": {...}, "tensors": [{"name", "shape"}, ...]}`.
//! Tensor order is `embed`, then per layer `attn_norm, wq, wk, wv, wo,
//! mlp_norm, w_up, w_down`, then `final_norm`, `lm_head`. Matrices are row-major
//! with shape `[rows, cols]`; norm gains have shape `[dim]`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::model::{LayerWeights, Matrix, TinyModel, TinyModelConfig};
use crate::engine::EngineError;

pub const FORMAT_TAG: &str = "kvprune-tiny-f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format: String,
    pub config: TinyModelConfig,
    pub tensors: Vec<TensorInfo>,
}

enum Slot<'a> {
    Vector(&'a [f64]),
    Matrix(&'a Matrix),
}

fn slots(model: &TinyModel) -> Vec<(String, Slot<'_>)> {
    let mut out = vec![("embed".to_string(), Slot::Matrix(&model.embed))];
    for (l, layer) in model.layers.iter().enumerate() {
        out.push((format!("layers.{l}.attn_norm"), Slot::Vector(&layer.attn_norm)));
        out.push((format!("layers.{l}.wq"), Slot::Matrix(&layer.wq)));
        out.push((format!("layers.{l}.wk"), Slot::Matrix(&layer.wk)));
        out.push((format!("layers.{l}.wv"), Slot::Matrix(&layer.wv)));
        out.push((format!("layers.{l}.wo"), Slot::Matrix(&layer.wo)));
        out.push((format!("layers.{l}.mlp_norm"), Slot::Vector(&layer.mlp_norm)));
        out.push((format!("layers.{l}.w_up"), Slot::Matrix(&layer.w_up)));
        out.push((format!("layers.{l}.w_down"), Slot::Matrix(&layer.w_down)));
    }
    out.push(("final_norm".to_string(), Slot::Vector(&model.final_norm)));
    out.push(("lm_head".to_string(), Slot::Matrix(&model.lm_head)));
    out
}

pub fn save(model: &TinyModel, mut w: impl Write) -> Result<(), EngineError> {
    let slots = slots(model);
    let header = WeightHeader {
        format: FORMAT_TAG.to_string(),
        config: model.config,
        tensors: slots
            .iter()
            .map(|(name, slot)| TensorInfo {
                name: name.clone(),
                shape: match slot {
                    Slot::Vector(v) => vec![v.len()],
                    Slot::Matrix(m) => vec![m.rows, m.cols],
                },
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| EngineError::Weights(e.to_string()))?;
    let io = |e: std::io::Error| EngineError::Weights(e.to_string());
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, slot) in &slots {
        let data = match slot {
            Slot::Vector(v) => *v,
            Slot::Matrix(m) => &m.data[..],
        };
        let mut buf = Vec::with_capacity(data.len() * 4);
        for &x in data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn load(mut r: impl Read) -> Result<TinyModel, EngineError> {
    let io = |e: std::io::Error| EngineError::Weights(e.to_string());
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: WeightHeader = serde_json::from_slice(&json).map_err(|e| EngineError::Weights(e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(EngineError::Weights(format!("unknown format tag {:?}", header.format)));
    }
    // a freshly built model gives the expected layout; its values are overwritten
    let mut model = TinyModel::new(header.config)?;
    let expected: Vec<TensorInfo> = slots(&model)
        .iter()
        .map(|(name, slot)| TensorInfo {
            name: name.clone(),
            shape: match slot {
                Slot::Vector(v) => vec![v.len()],
                Slot::Matrix(m) => vec![m.rows, m.cols],
            },
        })
        .collect();
    if expected != header.tensors {
        return Err(EngineError::Weights("tensor layout does not match the config".into()));
    }
    let mut read_into = |dst: &mut [f64]| -> Result<(), EngineError> {
        let mut buf = vec![0u8; dst.len() * 4];
        r.read_exact(&mut buf).map_err(io)?;
        for (d, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
            *d = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        Ok(())
    };
    read_into(&mut model.embed.data)?;
    for layer in &mut model.layers {
        let LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_up,
            w_down,
        } = layer;
        read_into(attn_norm)?;
        read_into(&mut wq.data)?;
        read_into(&mut wk.data)?;
        read_into(&mut wv.data)?;
        read_into(&mut wo.data)?;
        read_into(mlp_norm)?;
        read_into(&mut w_up.data)?;
        read_into(&mut w_down.data)?;
    }
    read_into(&mut model.final_norm)?;
    read_into(&mut model.lm_head.data)?;
    Ok(model)
}
