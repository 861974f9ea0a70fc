use std::cmp::Ordering;

use rayon::prelude::*;

use super::{similarity, Dims, FeaturePointCloud, TopKIndex, MASKED};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `THW x THW` similarity scores, optionally with same-frame blocks masked.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    values: Tensor,
    masked: Option<Dims>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_masked(&self) -> bool {
        self.masked.is_some()
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values.data()[i * self.size() + j]
    }
}

/// Negative squared L2 distance between every pair of rows.
pub fn pairwise_similarity(cloud: &FeaturePointCloud) -> Result<SimilarityMatrix> {
    let n = cloud.len();
    let mut values = vec![0.0f32; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let fi = cloud.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = similarity(fi, cloud.row(j));
        }
    });
    Ok(SimilarityMatrix {
        values: Tensor::new(vec![n, n], values)?,
        masked: None,
    })
}

/// Sets the `T` diagonal `HW x HW` blocks to [`MASKED`].
pub fn mask_same_frame(mut sim: SimilarityMatrix, dims: Dims) -> Result<SimilarityMatrix> {
    if sim.masked.is_some() {
        return Err(Error::AlreadyMasked);
    }
    let n = sim.size();
    if n != dims.points() {
        return Err(Error::shape(
            "mask_same_frame",
            format!("{n} rows do not match {dims:?}"),
        ));
    }
    let hw = dims.frame_size();
    let data = sim.values.data_mut();
    for i in 0..n {
        let f = i / hw;
        data[i * n + f * hw..i * n + (f + 1) * hw].fill(MASKED);
    }
    sim.masked = Some(dims);
    Ok(sim)
}

/// Descending similarity, then ascending index.
#[inline]
fn rank_order(a: &(f32, usize), b: &(f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Row-wise indices of the `k` largest entries.
pub fn arg_top_k(sim: &SimilarityMatrix, k: usize) -> Result<TopKIndex> {
    let dims = sim.masked.ok_or(Error::NotMasked)?;
    dims.check_k(k)?;
    let n = sim.size();
    let data = sim.values.data();
    let mut out = vec![0usize; n * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, dst)| {
        let mut cand: Vec<(f32, usize)> = data[i * n..(i + 1) * n]
            .iter()
            .copied()
            .enumerate()
            .map(|(j, v)| (v, j))
            .collect();
        if k < n {
            cand.select_nth_unstable_by(k - 1, rank_order);
        }
        let best = &mut cand[..k];
        best.sort_unstable_by(rank_order);
        for (d, &(_, j)) in dst.iter_mut().zip(best.iter()) {
            *d = j;
        }
    });
    TopKIndex::new(out, k)
}
