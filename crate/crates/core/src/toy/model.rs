//! The two toy architectures: a per-frame two-convolution network (C2D),
//! and the same network with a CP module after the first convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cp::{self, CpModuleParams};
use crate::error::{Error, Result};
use crate::knn::{Dims, FeaturePointCloud, KnnBackend, TopKIndex};
use crate::ops::BnMode;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 16;
pub const CLASSES: usize = 4;
pub const DEFAULT_K: usize = 8;

/// Stream offset separating CP initialization from the backbone's, so a
/// CPNet and a C2D built from one seed share conv/fc weights.
const CP_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpLayer {
    pub params: CpModuleParams,
    pub k: usize,
}

impl Conv {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv {
            weight: cp::msra(&[cout, cin, 3, 3], cin * 9, rng),
            bias: Tensor::zeros(&[cout]).with_requires_grad(true),
        }
    }
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[c], 1.0).with_requires_grad(true),
            beta: Tensor::zeros(&[c]).with_requires_grad(true),
            running: RunningStats::new(c),
        }
    }
}

/// conv(1->16) - BN - ReLU - [CP, residual, ReLU] - conv(16->16) - BN -
/// ReLU - global average pool - fc(16->4).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub cp: Option<CpLayer>,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub fc: Dense,
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// One handle per trainable tensor, in [`ToyNet::params`] order.
    pub param_vars: Vec<Var>,
    pub cp: Option<CpTrace>,
}

pub struct CpTrace {
    /// CP input as stacked point clouds, `[N*THW, C]`.
    pub input: Var,
    /// Per-proposal MLP outputs, `[N*THW, k, C]`.
    pub pairs: Var,
    /// Pooled CP output, `[N*THW, C]`.
    pub output: Var,
    /// Per-sample proposals (local row indices).
    pub proposals: Vec<TopKIndex>,
    pub dims: Dims,
}

fn backbone(seed: u64) -> ToyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1 = Conv::new(1, CHANNELS, &mut rng);
    let conv2 = Conv::new(CHANNELS, CHANNELS, &mut rng);
    let fc = Dense {
        weight: cp::msra(&[CLASSES, CHANNELS], CHANNELS, &mut rng),
        bias: Tensor::zeros(&[CLASSES]).with_requires_grad(true),
    };
    ToyNet {
        conv1,
        bn1: BatchNorm::new(CHANNELS),
        cp: None,
        conv2,
        bn2: BatchNorm::new(CHANNELS),
        fc,
    }
}

/// Per-frame convolutions only.
pub fn build_toy_c2d(seed: u64) -> ToyNet {
    backbone(seed)
}

/// C2D plus one CP module with `k` proposals per point. `k` is checked
/// against the 4-frame 32x32 toy geometry.
pub fn build_toy_cpnet(k: usize, seed: u64) -> Result<ToyNet> {
    use super::dataset::{FRAMES, SIZE};
    Dims::new(FRAMES, SIZE, SIZE).check_k(k)?;
    let mut net = backbone(seed);
    net.cp = Some(CpLayer {
        params: cp::init_params(CHANNELS, seed ^ CP_SEED_OFFSET)?,
        k,
    });
    Ok(net)
}

impl ToyNet {
    pub fn has_cp(&self) -> bool {
        self.cp.is_some()
    }

    /// Trainable tensors with stable names, in binding order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("bn1.gamma".into(), &self.bn1.gamma),
            ("bn1.beta".into(), &self.bn1.beta),
        ];
        if let Some(cp) = &self.cp {
            out.extend(cp.params.tensors().into_iter().map(|(n, t)| (format!("cp.{n}"), t)));
        }
        out.extend([
            ("conv2.weight".into(), &self.conv2.weight),
            ("conv2.bias".into(), &self.conv2.bias),
            ("bn2.gamma".into(), &self.bn2.gamma),
            ("bn2.beta".into(), &self.bn2.beta),
            ("fc.weight".into(), &self.fc.weight),
            ("fc.bias".into(), &self.fc.bias),
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
        ];
        if let Some(cp) = &mut self.cp {
            out.extend(cp.params.tensors_mut());
        }
        out.extend([
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Running statistics of every normalization layer, by name.
    pub fn running_stats(&self) -> Vec<(String, &RunningStats)> {
        let mut out = vec![("bn1".to_string(), &self.bn1.running)];
        if let Some(cp) = &self.cp {
            for (l, layer) in cp.params.layers.iter().enumerate() {
                out.push((format!("cp.mlp{l}"), &layer.running));
            }
        }
        out.push(("bn2".to_string(), &self.bn2.running));
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        let mut out = vec![&mut self.bn1.running];
        if let Some(cp) = &mut self.cp {
            out.extend(cp.params.layers.iter_mut().map(|l| &mut l.running));
        }
        out.push(&mut self.bn2.running);
        out
    }

    /// Logits for `videos` of shape `[N, T, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape, videos: &Tensor, mode: BnMode, backend: KnnBackend) -> Result<Forward> {
        let s = videos.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "toy forward",
                format!("videos must be [N,T,H,W], got {s:?}"),
            ));
        }
        let (n, t, h, w) = (s[0], s[1], s[2], s[3]);
        let dims = Dims::new(t, h, w);
        let c = CHANNELS;

        let param_vars: Vec<Var> = self.params().into_iter().map(|(_, p)| tape.param(p)).collect();
        let mut pv = param_vars.iter().copied();
        let mut next = || pv.next().expect("parameter count");

        let x = tape.constant(videos.clone().reshape(&[n * t, 1, h, w])?);
        let (w1, b1, g1, be1) = (next(), next(), next(), next());
        let hid = tape.conv2d(x, w1, b1)?;
        let hid = tape.batch_norm(hid, g1, be1, &mut self.bn1.running, mode)?;
        let mut hid = tape.relu(hid);

        let mut trace = None;
        if let Some(cpl) = &mut self.cp {
            dims.check_k(cpl.k)?;
            let cp_vars: Vec<Var> = (0..12).map(|_| next()).collect();
            let v = tape.reshape(hid, &[n, t, c, h, w])?;
            let v = tape.permute(v, &[0, 1, 3, 4, 2])?;
            let points = tape.reshape(v, &[n * t * h * w, c])?;

            let per = dims.points();
            let mut proposals = Vec::with_capacity(n);
            let mut global = Vec::with_capacity(n * per * cpl.k);
            let mut disp = Vec::with_capacity(n * per * cpl.k * 3);
            for i in 0..n {
                let rows = &tape.value(points).data()[i * per * c..(i + 1) * per * c];
                let cloud = FeaturePointCloud::new(Tensor::new(vec![per, c], rows.to_vec())?, dims)?;
                let topk = backend.select(&cloud, cpl.k)?;
                global.extend(topk.offset(i * per));
                disp.extend(cp::displacements(dims, &topk));
                proposals.push(topk);
            }
            let ev = cp::embed_on_tape(tape, points, &global, cpl.k, disp, &mut cpl.params, &cp_vars, mode)?;
            let g = tape.reshape(ev.output, &[n, t, h, w, c])?;
            let g = tape.permute(g, &[0, 1, 4, 2, 3])?;
            let g = tape.reshape(g, &[n * t, c, h, w])?;
            let sum = tape.add(hid, g)?;
            hid = tape.relu(sum);
            trace = Some(CpTrace {
                input: points,
                pairs: ev.pairs,
                output: ev.output,
                proposals,
                dims,
            });
        }

        let (w2, b2, g2, be2) = (next(), next(), next(), next());
        let hid = tape.conv2d(hid, w2, b2)?;
        let hid = tape.batch_norm(hid, g2, be2, &mut self.bn2.running, mode)?;
        let hid = tape.relu(hid);
        let v = tape.reshape(hid, &[n, t, c, h, w])?;
        let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
        let pooled = tape.global_avg_pool(v)?;
        let (wf, bf) = (next(), next());
        let logits = tape.linear(pooled, wf, Some(bf))?;
        Ok(Forward {
            logits,
            param_vars,
            cp: trace,
        })
    }

    /// Eval-mode logits without recording gradients for later use.
    pub fn logits(&mut self, videos: &Tensor, backend: KnnBackend) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, videos, BnMode::Eval, backend)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Named tensors for a checkpoint: parameters, running statistics and `k`.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.zero_grad();
                (n, t)
            })
            .collect();
        for (name, rs) in self.running_stats() {
            let c = rs.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], rs.mean.clone()).expect("shape"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], rs.var.clone()).expect("shape"),
            ));
        }
        if let Some(cp) = &self.cp {
            out.push(("cp.k".into(), Tensor::scalar(cp.k as f32)));
        }
        out
    }

    /// Rebuilds a network from [`Self::to_named_tensors`] output.
    pub fn from_named_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))
        };
        let mut net = match find("cp.k") {
            Ok(k) => {
                let k = k
                    .item()
                    .filter(|v| v.fract() == 0.0 && *v >= 1.0)
                    .ok_or_else(|| Error::format("checkpoint", "cp.k must be a positive integer"))?;
                build_toy_cpnet(k as usize, 0)?
            }
            Err(_) => build_toy_c2d(0),
        };
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(net.params_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone().with_requires_grad(true);
        }
        let stat_names: Vec<String> = net.running_stats().into_iter().map(|(n, _)| n).collect();
        for (name, rs) in stat_names.iter().zip(net.running_stats_mut()) {
            for (suffix, dst) in [("running_mean", &mut rs.mean), ("running_var", &mut rs.var)] {
                let t = find(&format!("{name}.{suffix}"))?;
                if t.numel() != dst.len() {
                    return Err(Error::format("checkpoint", format!("{name}.{suffix} has wrong length")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(net)
    }
}
