//! Per-anchor proposal dumps for plotting.
//!
//! The JSONL file holds one record per anchor point, then one heatmap
//! record per frame. A companion named-tensor file keeps the raw values the
//! records were derived from, so active sets can be recomputed offline.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cpnet_core::cp::{activation_set, feature_change_heatmap, residual_insert, ActivationProvenance};
use cpnet_core::format::write_named;
use cpnet_core::knn::KnnBackend;
use cpnet_core::ops::BnMode;
use cpnet_core::toy::{batch_tensor, ToyDataset, ToyNet};
use cpnet_core::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub neighbors: Vec<Neighbor>,
    pub heat: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameHeatmap {
    pub frame: usize,
    pub heatmap: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

impl std::str::FromStr for SplitName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            other => Err(CliError::invalid(format!(
                "unknown split {other:?} (expected train or val)"
            ))),
        }
    }
}

/// Companion file next to a JSONL dump.
pub fn raw_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("raw.cpt1")
}

#[derive(Clone, Debug)]
pub struct VizSummary {
    pub anchors: usize,
    pub k: usize,
    pub raw: PathBuf,
}

/// Dumps the CP module's proposals for one sample in eval mode.
///
/// Raw tensors: `input` `[THW, C]` features entering the module, `pairs`
/// `[THW, k, C]` per-proposal outputs, `output` `[THW, C]` pooled outputs
/// and `proposals` `[THW, k]` neighbor rows.
pub fn visualize(
    net: &mut ToyNet,
    ds: &ToyDataset,
    split: SplitName,
    index: usize,
    backend: KnnBackend,
    out_path: &Path,
) -> Result<VizSummary> {
    if !net.has_cp() {
        return Err(CliError::invalid("checkpoint has no CP module to visualize"));
    }
    let samples = match split {
        SplitName::Train => &ds.train,
        SplitName::Val => &ds.val,
    };
    let sample = samples
        .get(index)
        .ok_or_else(|| CliError::invalid(format!("sample {index} out of range for {} samples", samples.len())))?;
    let (videos, _) = batch_tensor(&[sample])?;
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &videos, BnMode::Eval, backend)?;
    let trace = f.cp.expect("network has a CP module");
    let dims = trace.dims;
    let input = tape.value(trace.input).clone();
    let pairs = tape.value(trace.pairs).clone();
    let output = tape.value(trace.output).clone();
    let (m, c) = (input.shape()[0], input.shape()[1]);
    let topk = &trace.proposals[0];
    let k = topk.k();
    let argmax = tape.argmax(trace.output).expect("max node").to_vec();
    let prov = ActivationProvenance::new(argmax, k, c)?;

    let mut after = residual_insert(&input, &output)?;
    after.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let heat = feature_change_heatmap(&input, &after, dims)?;

    let file = std::fs::File::create(out_path).map_err(|e| CliError::io(out_path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: String| writeln!(w, "{value}").map_err(|e| CliError::io(out_path, e));
    for i in 0..m {
        let active = activation_set(&prov, i)?;
        let (t, h, ww) = dims.position(i);
        let neighbors = topk
            .row(i)
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                let (t, h, w) = dims.position(j);
                Neighbor {
                    t,
                    h,
                    w,
                    active: active.contains(&slot),
                }
            })
            .collect();
        let rec = AnchorRecord {
            t,
            h,
            w: ww,
            neighbors,
            heat: heat.data()[i],
        };
        line(serde_json::to_string(&rec).expect("record serializes"))?;
    }
    let hw = dims.h * dims.w;
    for frame in 0..dims.t {
        let heatmap = heat.data()[frame * hw..(frame + 1) * hw]
            .chunks(dims.w)
            .map(<[f32]>::to_vec)
            .collect();
        line(serde_json::to_string(&FrameHeatmap { frame, heatmap }).expect("record serializes"))?;
    }
    w.flush().map_err(|e| CliError::io(out_path, e))?;

    let raw = raw_path(out_path);
    let proposals = Tensor::new(vec![m, k], topk.as_slice().iter().map(|&j| j as f32).collect())?;
    write_named(
        &raw,
        &[
            ("input".into(), input),
            ("pairs".into(), pairs),
            ("output".into(), output),
            ("proposals".into(), proposals),
        ],
    )?;
    Ok(VizSummary { anchors: m, k, raw })
}
