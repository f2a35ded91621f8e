//! Attention-matrix export: a JSON header plus a little-endian `f32` sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::sgca::AttentionRecord;
use crate::training::{greedy_rollout, Split};

pub const HEADER_FILE: &str = "attention.json";
pub const DATA_FILE: &str = "attention.f32";
pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub episode_id: String,
    pub step: usize,
    pub layer_index: usize,
    pub candidate_index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the sidecar, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub version: u32,
    pub n_layers: usize,
    pub variant: String,
    pub records: Vec<RecordHeader>,
}

/// Greedy rollouts over the first `episodes` episodes of `split`, keeping every
/// attention record in rollout order.
pub fn collect_attention(
    model: &Model,
    store: &ParamStore,
    split: &Split,
    episodes: usize,
    step_cap: usize,
) -> Result<Vec<AttentionRecord>> {
    if model.sgca.is_none() {
        return Err(Error::Config(format!("variant '{}' has no grounding stack to dump", model.variant().name())));
    }
    let mut out = Vec::new();
    for i in 0..episodes.min(split.episodes.len()) {
        out.extend(greedy_rollout(model, store, split.env(i)?, step_cap)?.records);
    }
    Ok(out)
}

pub fn write_attention_dump(
    dir: &Path,
    n_layers: usize,
    variant: &str,
    records: &[AttentionRecord],
) -> Result<DumpHeader> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut headers = Vec::with_capacity(records.len());
    let mut offset = 0;
    for r in records {
        if r.data.len() != r.rows * r.cols {
            return Err(Error::Shape(format!("record holds {} values for {}x{}", r.data.len(), r.rows, r.cols)));
        }
        headers.push(RecordHeader {
            episode_id: r.episode_id.clone(),
            step: r.step,
            layer_index: r.layer_index,
            candidate_index: r.candidate_index,
            rows: r.rows,
            cols: r.cols,
            offset,
        });
        bytes.extend(r.data.iter().flat_map(|&x| (x as f32).to_le_bytes()));
        offset += r.data.len();
    }
    let header = DumpHeader { version: DUMP_VERSION, n_layers, variant: variant.to_string(), records: headers };
    std::fs::write(dir.join(DATA_FILE), bytes)?;
    std::fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

pub fn read_attention_dump(dir: &Path) -> Result<(DumpHeader, Vec<AttentionRecord>)> {
    let header: DumpHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(HEADER_FILE))?)?;
    if header.version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported attention dump version {}", header.version)));
    }
    let bytes = std::fs::read(dir.join(DATA_FILE))?;
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let mut records = Vec::with_capacity(header.records.len());
    for h in &header.records {
        let end = h.offset + h.rows * h.cols;
        let data = values
            .get(h.offset..end)
            .ok_or_else(|| Error::Format(format!("record at offset {} runs past the sidecar", h.offset)))?
            .to_vec();
        records.push(AttentionRecord {
            layer_index: h.layer_index,
            candidate_index: h.candidate_index,
            step: h.step,
            episode_id: h.episode_id.clone(),
            rows: h.rows,
            cols: h.cols,
            data,
        });
    }
    Ok((header, records))
}
