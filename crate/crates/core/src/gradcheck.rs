//! Central-difference gradient checks for every differentiable op and for
//! the end-to-end toy CPNet loss.
//!
//! A coordinate is compared only when both perturbed passes take the same
//! discrete branches as the unperturbed pass (equal
//! [`Tape::selection_fingerprint`]). Derivatives use the five-point central
//! stencil. When a perturbation crosses a branch, the step is shrunk by 4x
//! up to [`SHRINK_STEPS`] times before the coordinate is counted as skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cp;
use crate::error::{Error, Result};
use crate::knn::{knn_brute, Dims, FeaturePointCloud, KnnBackend};
use crate::ops::BnMode;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;
use crate::toy::model::{build_toy_cpnet, ToyNet};

/// Lower bound on the denominator of the relative error.
pub const REL_FLOOR: f32 = 1e-2;
pub const SHRINK_STEPS: usize = 1;
/// Coordinates sampled per input tensor.
pub const COORDS_PER_INPUT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub epsilon: f32,
    pub tolerance: f32,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            epsilon: 2e-2,
            tolerance: 1e-2,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::invalid(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f32,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f32) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed(self.config.tolerance))
    }

    /// Fixed-width table, one row per group.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>8} {:>8} {:>12}  status\n",
            "group", "checked", "skipped", "max_rel_err"
        );
        for g in &self.groups {
            let status = if g.passed(self.config.tolerance) { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<22} {:>8} {:>8} {:>12.3e}  {status}\n",
                g.name, g.checked, g.skipped, g.max_rel_error
            ));
        }
        out
    }
}

pub fn relative_error(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A scalar function of some input tensors, recorded on a tape. Returns
/// the loss and the handles of the inputs in order.
type Objective<'a> = dyn Fn(&[Tensor]) -> Result<(Tape, Var, Vec<Var>)> + 'a;

fn loss_and_fingerprint(f: &Objective<'_>, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let (tape, loss, _) = f(inputs)?;
    Ok((tape.value(loss).data()[0] as f64, tape.selection_fingerprint()))
}

fn check_objective(
    name: &str,
    inputs: Vec<Tensor>,
    f: &Objective<'_>,
    config: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GroupReport> {
    let (tape, loss, vars) = f(&inputs)?;
    let base_fp = tape.selection_fingerprint();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();
    drop(tape);

    let mut report = GroupReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    let mut work = inputs.clone();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = if t.numel() <= COORDS_PER_INPUT {
            (0..t.numel()).collect()
        } else {
            (0..COORDS_PER_INPUT).map(|_| rng.random_range(0..t.numel())).collect()
        };
        for j in coords {
            let orig = t.data()[j];
            let mut eps = config.epsilon;
            let mut numeric = None;
            for _ in 0..=SHRINK_STEPS {
                let mut vals = [0.0f64; 4];
                let mut stable = true;
                for (slot, m) in [2.0f32, 1.0, -1.0, -2.0].into_iter().enumerate() {
                    work[i].data_mut()[j] = orig + m * eps;
                    let (l, fp) = loss_and_fingerprint(f, &work)?;
                    vals[slot] = l;
                    stable &= fp == base_fp;
                    if !stable {
                        break;
                    }
                }
                work[i].data_mut()[j] = orig;
                if stable {
                    numeric = Some(five_point(vals, eps as f64) as f32);
                    break;
                }
                eps /= 4.0;
            }
            match numeric {
                Some(n) => {
                    report.checked += 1;
                    let e = relative_error(analytic[i][j], n);
                    report.max_rel_error = report.max_rel_error.max(e);
                }
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

/// Five-point central difference from `f(x+2h), f(x+h), f(x-h), f(x-2h)`.
fn five_point(v: [f64; 4], h: f64) -> f64 {
    (8.0 * (v[1] - v[2]) - (v[0] - v[3])) / (12.0 * h)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).with_requires_grad(true)
}

/// `sum(out * r)` for a fixed pseudo-random `r`, scaled so the loss is O(1).
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product::<usize>() as f32;
    let scale = n.sqrt().recip();
    let r = Tensor::from_fn(&shape, |_| {
        let z: f32 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn leaves(tape: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| tape.leaf(x)).collect()
}

/// Builds an objective `project(op(leaves))` for a tape-level op.
fn op_objective<'a>(seed: u64, op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a) -> Box<Objective<'a>> {
    Box::new(move |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, xs);
        let out = op(&mut tape, &vars)?;
        let loss = project(&mut tape, out, seed)?;
        Ok((tape, loss, vars))
    })
}

fn running(c: usize, rng: &mut ChaCha8Rng) -> RunningStats {
    RunningStats {
        mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
    }
}

/// CP parameters with non-zero final gammas so every layer gets gradient.
fn random_cp_params(channels: usize, rng: &mut ChaCha8Rng) -> Result<cp::CpModuleParams> {
    let mut p = cp::init_params(channels, rng.random())?;
    for layer in p.layers.iter_mut() {
        layer.gamma = Tensor::from_fn(&[layer.fan_out()], |_| rng.random_range(0.5..1.5)).with_requires_grad(true);
        layer.beta = input(&[layer.fan_out()], rng).with_requires_grad(true);
        layer.bias = input(&[layer.fan_out()], rng).with_requires_grad(true);
    }
    Ok(p)
}

fn check_ops(config: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: Box<Objective<'_>>, rng: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_objective(name, inputs, &*f, config, rng)?);
        Ok(())
    };
    let s: u64 = rng.random();

    let xs = vec![input(&[2, 3, 5, 4], rng), input(&[4, 3, 3, 3], rng), input(&[4], rng)];
    run("conv2d", xs, op_objective(s, |t, v| t.conv2d(v[0], v[1], v[2])), rng)?;

    let gamma = Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5)).with_requires_grad(true);
    let xs = vec![input(&[4, 3, 2, 2], rng), gamma, input(&[3], rng)];
    run(
        "batch_norm_train",
        xs.clone(),
        op_objective(s, |t, v| {
            let mut rs = RunningStats::new(3);
            t.batch_norm(v[0], v[1], v[2], &mut rs, BnMode::Train)
        }),
        rng,
    )?;
    let rs = running(3, rng);
    run(
        "batch_norm_eval",
        xs,
        op_objective(s, move |t, v| {
            let mut rs = rs.clone();
            t.batch_norm(v[0], v[1], v[2], &mut rs, BnMode::Eval)
        }),
        rng,
    )?;
    let gamma = Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5)).with_requires_grad(true);
    let xs = vec![input(&[9, 4], rng), gamma, input(&[4], rng)];
    run(
        "batch_norm_rows",
        xs,
        op_objective(s, |t, v| {
            let mut rs = RunningStats::new(4);
            t.batch_norm(v[0], v[1], v[2], &mut rs, BnMode::Train)
        }),
        rng,
    )?;

    run(
        "relu",
        vec![input(&[3, 7], rng)],
        op_objective(s, |t, v| Ok(t.relu(v[0]))),
        rng,
    )?;

    let xs = vec![input(&[5, 4], rng), input(&[3, 4], rng), input(&[3], rng)];
    run(
        "linear",
        xs,
        op_objective(s, |t, v| t.linear(v[0], v[1], Some(v[2]))),
        rng,
    )?;

    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    run(
        "softmax_cross_entropy",
        vec![input(&[4, 5], rng)],
        Box::new(move |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, xs);
            let loss = tape.softmax_cross_entropy(vars[0], &labels)?;
            Ok((tape, loss, vars))
        }),
        rng,
    )?;

    let indices: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
    run(
        "gather_rows",
        vec![input(&[5, 3], rng)],
        op_objective(s, move |t, v| t.gather_rows(v[0], &indices, 2)),
        rng,
    )?;

    run(
        "max_over_set",
        vec![input(&[3, 4, 5], rng)],
        op_objective(s, |t, v| t.max_over_set(v[0])),
        rng,
    )?;

    run(
        "global_avg_pool",
        vec![input(&[2, 3, 2, 2, 2], rng)],
        op_objective(s, |t, v| t.global_avg_pool(v[0])),
        rng,
    )?;

    run(
        "permute_reshape_slice",
        vec![input(&[2, 3, 4], rng)],
        op_objective(s, |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            t.slice_cols(r, 1, 3)
        }),
        rng,
    )?;

    run(
        "add_mul",
        vec![input(&[3, 4], rng), input(&[3, 4], rng)],
        op_objective(s, |t, v| {
            let m = t.mul(v[0], v[1])?;
            t.add(m, v[0])
        }),
        rng,
    )?;

    out.push(check_embedding(config, rng)?);
    out.push(check_toy_cpnet(config, rng)?);
    Ok(out)
}

/// The CE layer on a fixed proposal set: gradients w.r.t. the features and
/// all twelve MLP tensors.
fn check_embedding(config: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GroupReport> {
    let dims = Dims::new(2, 3, 3);
    let channels = 16;
    let k = 4;
    let features = input(&[dims.points(), channels], rng);
    let cloud = FeaturePointCloud::new(features.clone(), dims)?;
    let topk = knn_brute(&cloud, k)?;
    let disp = cp::displacements(dims, &topk);
    let params = random_cp_params(channels, rng)?;
    let mut inputs = vec![features];
    inputs.extend(params.tensors().into_iter().map(|(_, t)| t.clone()));
    let seed: u64 = rng.random();

    let f = move |xs: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut p = params.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(&xs[1..]) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, xs);
        let ev = cp::embed_on_tape(
            &mut tape,
            vars[0],
            topk.as_slice(),
            k,
            disp.clone(),
            &mut p,
            &vars[1..],
            BnMode::Train,
        )?;
        let loss = project(&mut tape, ev.output, seed)?;
        Ok((tape, loss, vars))
    };
    check_objective("correspondence_embed", inputs, &f, config, rng)
}

/// Cross-entropy of a small toy CPNet (k-NN recomputed every pass) with
/// respect to every network parameter.
fn check_toy_cpnet(config: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GroupReport> {
    let k = 3;
    let mut net = build_toy_cpnet(k, rng.random())?;
    net.cp.as_mut().expect("cp layer").params = random_cp_params(net_channels(&net), rng)?;
    let videos = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
    let inputs: Vec<Tensor> = net.params().into_iter().map(|(_, t)| t.clone()).collect();

    let f = move |xs: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut n = net.clone();
        for (dst, src) in n.params_mut().into_iter().zip(xs) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let fwd = n.forward(&mut tape, &videos, BnMode::Train, KnnBackend::Brute)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        Ok((tape, loss, fwd.param_vars))
    };
    check_objective("toy_cpnet_end_to_end", inputs, &f, config, rng)
}

fn net_channels(net: &ToyNet) -> usize {
    net.conv1.weight.shape()[0]
}

/// Runs every group once for `config.seed`.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups = check_ops(config, &mut rng)?;
    Ok(GradcheckReport {
        config: *config,
        groups,
    })
}
