//! Dictionary persistence: a JSON document with the grid metadata plus a
//! sidecar file of little-endian 64-bit floats in `flatten_params` order,
//! referenced by filename.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dfp_core::arch::ArchSpec;
use dfp_core::dict::{build_dictionary, Block, BlockDictionary, InitPolicy};

use crate::schema::{spec_from_doc, spec_to_doc, SpecDoc};

#[derive(Serialize, Deserialize)]
struct GridCellDoc {
    row: usize,
    col: usize,
    kind: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct DictDoc {
    spec: SpecDoc,
    params_file: String,
    param_count: usize,
    grid: Vec<GridCellDoc>,
}

fn cell_kind(b: &Block) -> &'static str {
    match b {
        Block::LearnedDense(_) => "learned_dense",
        Block::LearnedConv(_) => "learned_conv",
        Block::Identity => "identity",
        Block::NegIdentity => "neg_identity",
    }
}

pub fn save_dictionary(path: &Path, spec: &ArchSpec, params: &[f64]) -> Result<()> {
    let dict = build_dictionary(spec, InitPolicy::Zeros, 0);
    if params.len() != dict.param_count() {
        bail!(
            "parameter vector has length {}, dictionary needs {}",
            params.len(),
            dict.param_count()
        );
    }
    let sidecar_name = {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dictionary");
        format!("{stem}.params")
    };
    let grid = dict
        .cells()
        .iter()
        .map(|c| GridCellDoc {
            row: c.row,
            col: c.col,
            kind: cell_kind(&c.block).to_string(),
            rows: dict.row_dims()[c.row],
            cols: dict.col_dims()[c.col],
        })
        .collect();
    let doc = DictDoc {
        spec: spec_to_doc(spec),
        params_file: sidecar_name.clone(),
        param_count: params.len(),
        grid,
    };
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let sidecar = path.with_file_name(&sidecar_name);
    fs::write(&sidecar, bytes).with_context(|| format!("writing {}", sidecar.display()))?;
    fs::write(path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<(ArchSpec, BlockDictionary)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: DictDoc = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let spec = spec_from_doc(&doc.spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    let sidecar = path.with_file_name(&doc.params_file);
    let bytes =
        fs::read(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
    if bytes.len() != doc.param_count * 8 {
        bail!(
            "sidecar {} has {} bytes, expected {}",
            sidecar.display(),
            bytes.len(),
            doc.param_count * 8
        );
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let dict = build_dictionary(&spec, InitPolicy::Zeros, 0)
        .load_params(&params)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((spec, dict))
}
