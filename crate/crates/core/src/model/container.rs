//! Weight container file format.
//!
//! Layout: magic bytes `NSCP1`, an 8-byte little-endian header length, a
//! UTF-8 JSON header mapping tensor names to `{shape, offset}` (offsets are
//! byte positions inside the payload region) with the model config under the
//! `config` key, then raw little-endian `f32` payloads in header order.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerWeights, ModelBundle, ModelConfig};

const MAGIC: &[u8; 5] = b"NSCP1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Canonical tensor order: embeddings, per-layer weights, final gain,
/// unembedding. Both writer and reader follow it.
fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for i in 0..config.n_layers {
        for w in [
            "wq", "wk", "wv", "wo", "wgate", "wup", "wdown", "attn_gain", "ffn_gain",
        ] {
            names.push(format!("layer.{i}.{w}"));
        }
    }
    names.push("final_gain".to_string());
    names.push("unemb".to_string());
    names
}

fn tensor_view<'a>(bundle: &'a ModelBundle, name: &str) -> (Vec<usize>, &'a [f32]) {
    let matrix = |m: &'a Matrix| (vec![m.rows(), m.cols()], m.data());
    let gain = |g: &'a [f32]| (vec![g.len()], g);
    match name {
        "tok_emb" => matrix(&bundle.token_embedding),
        "pos_emb" => matrix(&bundle.position_embedding),
        "final_gain" => gain(&bundle.final_norm_gain),
        "unemb" => matrix(&bundle.unembedding),
        _ => {
            let rest = name.strip_prefix("layer.").expect("known name");
            let (idx, kind) = rest.split_once('.').expect("known name");
            let layer = &bundle.layers[idx.parse::<usize>().expect("known name")];
            match kind {
                "wq" => matrix(&layer.w_q),
                "wk" => matrix(&layer.w_k),
                "wv" => matrix(&layer.w_v),
                "wo" => matrix(&layer.w_o),
                "wgate" => matrix(&layer.w_gate),
                "wup" => matrix(&layer.w_up),
                "wdown" => matrix(&layer.w_down),
                "attn_gain" => gain(&layer.attn_norm_gain),
                "ffn_gain" => gain(&layer.ffn_norm_gain),
                _ => unreachable!("tensor_names only emits known kinds"),
            }
        }
    }
}

/// Write a bundle to `path` in the container format.
pub fn write_model<P: AsRef<Path>>(path: P, bundle: &ModelBundle) -> Result<()> {
    bundle.validate()?;
    let names = tensor_names(&bundle.config);
    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0u64;
    for name in &names {
        let (shape, data) = tensor_view(bundle, name);
        tensors.push(TensorEntry {
            name: name.clone(),
            shape,
            offset,
        });
        offset += 4 * data.len() as u64;
    }
    let header = Header {
        config: bundle.config,
        tensors,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Container(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for name in &names {
        let (_, data) = tensor_view(bundle, name);
        for &x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a bundle back. Shapes are validated against the embedded config and
/// all values must be finite.
pub fn read_model<P: AsRef<Path>>(path: P) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Container("file shorter than magic + header length".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Container(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..MAGIC.len().min(bytes.len())],
            MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_start = MAGIC.len() + 8;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Container("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| Error::Container(format!("header decode: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[payload_start..];

    let read_tensor = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))?;
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > payload.len() {
            return Err(Error::Container(format!(
                "tensor {name} extends past end of payload"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok((entry.shape.clone(), data))
    };

    let read_matrix = |name: &str| -> Result<Matrix> {
        let (shape, data) = read_tensor(name)?;
        if shape.len() != 2 {
            return Err(Error::Container(format!(
                "tensor {name} has rank {}, expected 2",
                shape.len()
            )));
        }
        Matrix::from_vec(shape[0], shape[1], data)
            .map_err(|e| Error::Container(format!("tensor {name}: {e}")))
    };

    let read_gain = |name: &str| -> Result<Vec<f32>> {
        let (shape, data) = read_tensor(name)?;
        if shape.len() != 1 {
            return Err(Error::Container(format!(
                "tensor {name} has rank {}, expected 1",
                shape.len()
            )));
        }
        Ok(data)
    };

    let config = header.config;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            w_q: read_matrix(&format!("layer.{i}.wq"))?,
            w_k: read_matrix(&format!("layer.{i}.wk"))?,
            w_v: read_matrix(&format!("layer.{i}.wv"))?,
            w_o: read_matrix(&format!("layer.{i}.wo"))?,
            w_gate: read_matrix(&format!("layer.{i}.wgate"))?,
            w_up: read_matrix(&format!("layer.{i}.wup"))?,
            w_down: read_matrix(&format!("layer.{i}.wdown"))?,
            attn_norm_gain: read_gain(&format!("layer.{i}.attn_gain"))?,
            ffn_norm_gain: read_gain(&format!("layer.{i}.ffn_gain"))?,
        });
    }
    let bundle = ModelBundle {
        config,
        token_embedding: read_matrix("tok_emb")?,
        position_embedding: read_matrix("pos_emb")?,
        layers,
        final_norm_gain: read_gain("final_gain")?,
        unembedding: read_matrix("unemb")?,
    };
    bundle
        .validate()
        .map_err(|e| Error::Container(format!("loaded bundle invalid: {e}")))?;
    Ok(bundle)
}
