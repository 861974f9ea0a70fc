//! Independent reference implementations used as test oracles. Everything
//! here is written as plain loops in `f64`, sharing no code with the crate.

#![allow(dead_code)]

use cpnet_core::cp::CpModuleParams;
use cpnet_core::knn::{Dims, FeaturePointCloud};
use cpnet_core::toy::dataset::{FRAMES, MAX_STEP, MIN_STEP, SIZE, SQUARE};
use cpnet_core::toy::ToySample;
use cpnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries uniform in `[-1, 1)`.
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

pub fn assert_close(actual: &[f32], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a as f64 - e).abs() <= tol,
            "{what}[{i}]: got {a}, expected {e} (tol {tol})"
        );
    }
}

/// 3x3 cross-correlation with zero padding, one output element at a time.
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, ci, h, w] = x.shape().try_into().unwrap();
    let co = k.shape()[0];
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![0.0f64; n * co * h * w];
    for img in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bd[o] as f64;
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = xd[((img * ci + c) * h + sy as usize) * w + sx as usize];
                                let kv = kd[((o * ci + c) * 3 + ky) * 3 + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((img * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel mean and biased variance of an `[N, C, ...]` tensor, two passes.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let at = |i: usize, ch: usize, p: usize| x.data()[(i * c + ch) * sp + p] as f64;
    let count = (n * sp) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        for i in 0..n {
            for p in 0..sp {
                mean[ch] += at(i, ch, p);
            }
        }
        mean[ch] /= count;
        for i in 0..n {
            for p in 0..sp {
                var[ch] += (at(i, ch, p) - mean[ch]).powi(2);
            }
        }
        var[ch] /= count;
    }
    (mean, var)
}

/// Train-mode batch normalization with batch statistics.
pub fn batch_norm_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
    let (mean, var) = channel_moments(x);
    let s = x.shape();
    let c = s[1];
    let sp: usize = s[2..].iter().product();
    x.data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = (idx / sp) % c;
            gamma[ch] as f64 * (v as f64 - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch] as f64
        })
        .collect()
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Full-sort nearest neighbours among other frames, ties by ascending index.
pub fn topk_oracle(cloud: &FeaturePointCloud, k: usize) -> Vec<Vec<usize>> {
    let dims = cloud.dims();
    let hw = dims.h * dims.w;
    (0..cloud.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..cloud.len())
                .filter(|&j| j / hw != i / hw)
                .map(|j| (sq_dist(cloud.row(i), cloud.row(j)), j))
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Random cloud whose other-frame distances are pairwise distinct per row
/// by a clear margin; resamples with fresh jitter until that holds.
pub fn jittered_cloud(dims: Dims, c: usize, rng: &mut ChaCha8Rng) -> FeaturePointCloud {
    let m = dims.points();
    let hw = dims.h * dims.w;
    loop {
        let t = uniform(&[m, c], rng);
        let cloud = FeaturePointCloud::new(t, dims).unwrap();
        let distinct = (0..m).all(|i| {
            let mut d: Vec<f64> = (0..m)
                .filter(|&j| j / hw != i / hw)
                .map(|j| sq_dist(cloud.row(i), cloud.row(j)))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d.windows(2).all(|w| w[1] - w[0] > 1e-5 * w[1].max(1.0))
        });
        if distinct {
            return cloud;
        }
    }
}

/// Normalized `(t, h, w)` of a row, computed from the row-ordering rule.
pub fn coords(dims: Dims, row: usize) -> [f64; 3] {
    let hw = dims.h * dims.w;
    [
        (row / hw) as f64 / dims.t as f64,
        ((row % hw) / dims.w) as f64 / dims.h as f64,
        (row % dims.w) as f64 / dims.w as f64,
    ]
}

/// Per-pair evaluation of the correspondence embedding in train mode.
///
/// Returns `(g, zeta)` with `g` as `[M, C]` and `zeta` as `[M, k, C]`.
/// Each pair input is the literal concatenation
/// `[f_anchor; f_neighbor; neighbor coords - anchor coords]`; normalization
/// statistics are taken over all `M * k` pairs.
pub fn embed_oracle(cloud: &FeaturePointCloud, rows: &[Vec<usize>], params: &CpModuleParams) -> (Vec<f64>, Vec<f64>) {
    let dims = cloud.dims();
    let mut acts: Vec<Vec<f64>> = Vec::new();
    for (i, nb) in rows.iter().enumerate() {
        for &j in nb {
            let mut v: Vec<f64> = cloud.row(i).iter().chain(cloud.row(j)).map(|&x| x as f64).collect();
            let (a, b) = (coords(dims, i), coords(dims, j));
            v.extend((0..3).map(|ax| b[ax] - a[ax]));
            acts.push(v);
        }
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let (out_w, in_w) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let wd = layer.weight.data();
        let mut z: Vec<Vec<f64>> = acts
            .iter()
            .map(|v| {
                (0..out_w)
                    .map(|o| {
                        layer.bias.data()[o] as f64 + (0..in_w).map(|q| wd[o * in_w + q] as f64 * v[q]).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let count = z.len() as f64;
        for o in 0..out_w {
            let mean = z.iter().map(|r| r[o]).sum::<f64>() / count;
            let var = z.iter().map(|r| (r[o] - mean).powi(2)).sum::<f64>() / count;
            let (g, b) = (layer.gamma.data()[o] as f64, layer.beta.data()[o] as f64);
            for r in z.iter_mut() {
                let y = g * (r[o] - mean) / (var + 1e-5).sqrt() + b;
                r[o] = if l < 2 { y.max(0.0) } else { y };
            }
        }
        acts = z;
    }
    let k = rows.first().map_or(0, |r| r.len());
    let c = params.channels();
    let zeta: Vec<f64> = acts.iter().flatten().copied().collect();
    let mut g = vec![f64::NEG_INFINITY; rows.len() * c];
    for i in 0..rows.len() {
        for j in 0..k {
            for ch in 0..c {
                g[i * c + ch] = g[i * c + ch].max(zeta[(i * k + j) * c + ch]);
            }
        }
    }
    (g, zeta)
}

/// Slots attaining the channel-wise maximum of `zeta[i]` (smallest slot on
/// ties), collected over channels.
pub fn activation_set_oracle(zeta: &[f32], k: usize, c: usize, i: usize) -> std::collections::BTreeSet<usize> {
    (0..c)
        .map(|ch| {
            let mut best = 0;
            for j in 1..k {
                if zeta[(i * k + j) * c + ch] > zeta[(i * k + best) * c + ch] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Checks every per-sample invariant; returns a description of the first
/// violation.
pub fn sample_violation(s: &ToySample) -> Option<String> {
    let mut corners = Vec::new();
    for t in 0..FRAMES {
        let f = s.frame(t);
        if f.iter().any(|&p| p > 1) || f.iter().map(|&p| p as usize).sum::<usize>() != 4 {
            return Some(format!("frame {t} is not four lit pixels"));
        }
        let (r, c) = s.corner(t)?;
        if r + SQUARE > SIZE || c + SQUARE > SIZE {
            return Some(format!("frame {t} square leaves the canvas"));
        }
        if (0..SQUARE).any(|dr| (0..SQUARE).any(|dc| f[(r + dr) * SIZE + c + dc] != 1)) {
            return Some(format!("frame {t} lit pixels are not a 2x2 block"));
        }
        corners.push((r as isize, c as isize));
    }
    let (ur, uc) = s.label.unit();
    for w in corners.windows(2) {
        let (dr, dc) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        let along = dr * ur + dc * uc;
        let across = dr * uc.abs() + dc * ur.abs();
        if !(MIN_STEP as isize..=MAX_STEP as isize).contains(&along) || across != 0 {
            return Some(format!("step ({dr},{dc}) does not match {:?}", s.label));
        }
    }
    None
}
