//! Correspondence embedding: a shared MLP over (anchor feature, proposed
//! feature, displacement) triples, max-pooled over the `k` proposals.
//!
//! The MLP maps `2C + 3 -> C/4 -> C/2 -> C`; each affine layer is followed
//! by batch normalization and the first two by a rectifier. The last
//! normalization scale starts at zero so a freshly initialized module
//! outputs exactly zero and a residual insertion is the identity.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::knn::{Dims, FeaturePointCloud, TopKIndex};
use crate::ops::BnMode;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// One affine layer of the shared MLP and the normalization after it.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl AffineNorm {
    fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineNorm {
            weight: msra(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
            gamma: Tensor::full(&[fan_out], 1.0).with_requires_grad(true),
            beta: Tensor::zeros(&[fan_out]).with_requires_grad(true),
            running: RunningStats::new(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Weights of one CP module's shared MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CpModuleParams {
    pub layers: [AffineNorm; 3],
}

/// He/MSRA normal initialization: variance `2 / fan_in`.
pub fn msra(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng)).with_requires_grad(true)
}

/// Fresh MLP for `channels` input channels.
pub fn init_params(channels: usize, seed: u64) -> Result<CpModuleParams> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "CP module channels must be a positive multiple of 4, got {channels}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [2 * channels + 3, channels / 4, channels / 2, channels];
    let mut layers = [0, 1, 2].map(|l| AffineNorm::new(widths[l], widths[l + 1], &mut rng));
    layers[2].gamma = Tensor::zeros(&[channels]).with_requires_grad(true);
    Ok(CpModuleParams { layers })
}

impl CpModuleParams {
    /// Feature channels `C` the module consumes and produces.
    pub fn channels(&self) -> usize {
        self.layers[2].fan_out()
    }

    /// `[2C+3, C/4, C/2, C]`.
    pub fn widths(&self) -> [usize; 4] {
        [
            self.layers[0].fan_in(),
            self.layers[0].fan_out(),
            self.layers[1].fan_out(),
            self.layers[2].fan_out(),
        ]
    }

    pub fn final_gamma(&self) -> &Tensor {
        &self.layers[2].gamma
    }

    fn check(&self) -> Result<()> {
        let [i, a, b, c] = self.widths();
        let consistent = i == 2 * c + 3
            && self.layers[1].fan_in() == a
            && self.layers[2].fan_in() == b
            && self.layers.iter().all(|l| {
                l.bias.shape() == [l.fan_out()] && l.gamma.shape() == [l.fan_out()] && l.beta.shape() == [l.fan_out()]
            });
        if !consistent {
            return Err(Error::shape(
                "correspondence_embed",
                format!("inconsistent MLP widths {:?}", self.widths()),
            ));
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, gamma, beta.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("mlp{l}.weight"), &layer.weight));
            out.push((format!("mlp{l}.bias"), &layer.bias));
            out.push((format!("mlp{l}.gamma"), &layer.gamma));
            out.push((format!("mlp{l}.beta"), &layer.beta));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(12);
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            out.push(&mut layer.gamma);
            out.push(&mut layer.beta);
        }
        out
    }

    /// Records every trainable tensor on `tape`, in [`Self::tensors`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|(_, t)| tape.param(t)).collect()
    }
}

/// Winning proposal slot for every (point, channel) of a pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationProvenance {
    argmax: Vec<u32>,
    k: usize,
    channels: usize,
}

impl ActivationProvenance {
    pub fn new(argmax: Vec<u32>, k: usize, channels: usize) -> Result<Self> {
        if channels == 0 || !argmax.len().is_multiple_of(channels) || argmax.iter().any(|&j| j as usize >= k) {
            return Err(Error::invalid("provenance slots must lie in [0, k)"));
        }
        Ok(ActivationProvenance { argmax, k, channels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> usize {
        self.argmax.len() / self.channels
    }

    pub fn winner(&self, point: usize, channel: usize) -> usize {
        self.argmax[point * self.channels + channel] as usize
    }
}

/// Slots that win at least one channel of the max pooling for `point`.
pub fn activation_set(prov: &ActivationProvenance, point: usize) -> Result<BTreeSet<usize>> {
    if point >= prov.points() {
        return Err(Error::IndexOutOfRange {
            op: "activation_set",
            index: point,
            len: prov.points(),
        });
    }
    Ok((0..prov.channels).map(|c| prov.winner(point, c)).collect())
}

/// Normalized neighbor-minus-anchor `(dt, dh, dw)` per proposal, `[rows*k, 3]`.
pub fn displacements(dims: Dims, topk: &TopKIndex) -> Vec<f32> {
    let mut out = Vec::with_capacity(topk.as_slice().len() * 3);
    for i in 0..topk.rows() {
        let a = dims.normalized(i);
        for &j in topk.row(i) {
            let b = dims.normalized(j);
            out.extend_from_slice(&[b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
        }
    }
    out
}

/// Tape handles of one embedding pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    /// Per-proposal MLP outputs, `[M, k, C]`.
    pub pairs: Var,
    /// Max-pooled output, `[M, C]`.
    pub output: Var,
}

/// Correspondence embedding over a batch of stacked point clouds.
///
/// `features` is `[M, C]`; `proposals` holds `M x k` rows into it and
/// `disp` the matching `[M*k, 3]` displacements. `vars` come from
/// [`CpModuleParams::bind`]. In train mode the running statistics of
/// `params` are updated.
#[allow(clippy::too_many_arguments)]
pub fn embed_on_tape(
    tape: &mut Tape,
    features: Var,
    proposals: &[usize],
    k: usize,
    disp: Vec<f32>,
    params: &mut CpModuleParams,
    vars: &[Var],
    mode: BnMode,
) -> Result<EmbedVars> {
    params.check()?;
    let c = params.channels();
    let fs = tape.value(features).shape().to_vec();
    if fs.len() != 2 || fs[1] != c {
        return Err(Error::shape(
            "correspondence_embed",
            format!("features {fs:?} do not have {c} channels"),
        ));
    }
    let m = fs[0];
    if proposals.len() != m * k || disp.len() != m * k * 3 {
        return Err(Error::shape(
            "correspondence_embed",
            format!("{m} points need {} proposals, got {}", m * k, proposals.len()),
        ));
    }
    if vars.len() != 12 {
        return Err(Error::invalid("expected 12 bound CP parameters"));
    }
    let hidden = params.widths()[1];
    let (w1, b1) = (vars[0], vars[1]);

    // First layer on [f_anchor; f_neighbor; disp] split into its three
    // column blocks, so only the projected rows are gathered.
    let w_anchor = tape.slice_cols(w1, 0, c)?;
    let w_neighbor = tape.slice_cols(w1, c, c)?;
    let w_disp = tape.slice_cols(w1, 2 * c, 3)?;
    let proj_anchor = tape.linear(features, w_anchor, None)?;
    let proj_neighbor = tape.linear(features, w_neighbor, None)?;
    let anchor_rows: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let ga = tape.gather_rows(proj_anchor, &anchor_rows, k)?;
    let ga = tape.reshape(ga, &[m * k, hidden])?;
    let gn = tape.gather_rows(proj_neighbor, proposals, k)?;
    let gn = tape.reshape(gn, &[m * k, hidden])?;
    let d = tape.constant(Tensor::new(vec![m * k, 3], disp)?);
    let gd = tape.linear(d, w_disp, Some(b1))?;
    let h = tape.add(ga, gn)?;
    let mut h = tape.add(h, gd)?;

    for l in 0..3 {
        if l > 0 {
            h = tape.linear(h, vars[4 * l], Some(vars[4 * l + 1]))?;
        }
        h = tape.batch_norm(h, vars[4 * l + 2], vars[4 * l + 3], &mut params.layers[l].running, mode)?;
        if l < 2 {
            h = tape.relu(h);
        }
    }
    let pairs = tape.reshape(h, &[m, k, c])?;
    let output = tape.max_over_set(pairs)?;
    Ok(EmbedVars { pairs, output })
}

/// Result of a standalone embedding pass.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// `g`: pooled output, `[THW, C]`.
    pub output: Tensor,
    /// `zeta`: per-proposal MLP outputs, `[THW, k, C]`.
    pub pairs: Tensor,
    pub provenance: ActivationProvenance,
}

/// Embeds one point cloud. `params` is left untouched; train mode uses
/// batch statistics over the `THW * k` proposals.
pub fn embed(cloud: &FeaturePointCloud, topk: &TopKIndex, params: &CpModuleParams, mode: BnMode) -> Result<Embedding> {
    topk.validate(cloud.dims())?;
    if cloud.channels() != params.channels() {
        return Err(Error::shape(
            "correspondence_embed",
            format!(
                "cloud has {} channels, MLP expects {}",
                cloud.channels(),
                params.channels()
            ),
        ));
    }
    let mut params = params.clone();
    let mut tape = Tape::new();
    let f = tape.constant(cloud.features().clone());
    let vars = params.bind(&mut tape);
    let disp = displacements(cloud.dims(), topk);
    let ev = embed_on_tape(&mut tape, f, topk.as_slice(), topk.k(), disp, &mut params, &vars, mode)?;
    let argmax = tape.argmax(ev.output).expect("max node").to_vec();
    Ok(Embedding {
        output: tape.value(ev.output).clone(),
        pairs: tape.value(ev.pairs).clone(),
        provenance: ActivationProvenance::new(argmax, topk.k(), params.channels())?,
    })
}

/// `g` and its provenance for one point cloud.
pub fn correspondence_embed(
    cloud: &FeaturePointCloud,
    topk: &TopKIndex,
    params: &CpModuleParams,
    mode: BnMode,
) -> Result<(Tensor, ActivationProvenance)> {
    let e = embed(cloud, topk, params, mode)?;
    Ok((e.output, e.provenance))
}

/// Element-wise sum of a block output and a CP output; the caller applies
/// the rectifier afterwards.
pub fn residual_insert(block_output: &Tensor, cp_output: &Tensor) -> Result<Tensor> {
    if block_output.shape() != cp_output.shape() {
        return Err(Error::shape(
            "residual_insert",
            format!("{:?} vs {:?}", block_output.shape(), cp_output.shape()),
        ));
    }
    let data = block_output
        .data()
        .iter()
        .zip(cp_output.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(block_output.shape().to_vec(), data)
}

/// Per-position L1 change over channels, reshaped to `[T, H, W]`.
pub fn feature_change_heatmap(before: &Tensor, after: &Tensor, dims: Dims) -> Result<Tensor> {
    if before.shape() != after.shape() || before.rank() != 2 || before.shape()[0] != dims.points() {
        return Err(Error::shape(
            "feature_change_heatmap",
            format!("{:?} vs {:?} for {dims:?}", before.shape(), after.shape()),
        ));
    }
    let c = before.shape()[1];
    let heat = before
        .data()
        .chunks(c)
        .zip(after.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum())
        .collect();
    Tensor::new(vec![dims.t, dims.h, dims.w], heat)
}
