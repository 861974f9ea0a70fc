//! Semantic k-NN grouping restricted to other frames.
//!
//! Two backends produce the same [`TopKIndex`]: the dense path
//! ([`pairwise_similarity`] then [`mask_same_frame`] then [`arg_top_k`])
//! and a k-d tree over the feature space ([`knn_tree`]). Both order
//! candidates by descending similarity and break ties by ascending row.

mod brute;
mod tree;

use std::fmt;
use std::str::FromStr;

pub use brute::{arg_top_k, mask_same_frame, pairwise_similarity, SimilarityMatrix};
pub use tree::knn_tree;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stand-in for negative infinity on masked similarity entries.
pub const MASKED: f32 = f32::MIN;

/// Smallest similarity an unmasked pair can take; keeps real entries
/// strictly above [`MASKED`].
pub(crate) const FLOOR: f32 = f32::from_bits(MASKED.to_bits() - 1);

/// Negative squared L2 distance, summed in channel order.
#[inline]
pub(crate) fn similarity(a: &[f32], b: &[f32]) -> f32 {
    let mut d = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        d += t * t;
    }
    (-d).max(FLOOR)
}

/// Video geometry `(T, H, W)` of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Dims { t, h, w }
    }

    pub fn frame_size(&self) -> usize {
        self.h * self.w
    }

    pub fn points(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn frame_of(&self, row: usize) -> usize {
        row / self.frame_size()
    }

    /// `(t, h, w)` grid position of a row.
    pub fn position(&self, row: usize) -> (usize, usize, usize) {
        let hw = self.frame_size();
        (row / hw, (row % hw) / self.w, row % self.w)
    }

    /// Position scaled into `[0, 1)` per axis.
    pub fn normalized(&self, row: usize) -> [f32; 3] {
        let (t, h, w) = self.position(row);
        [
            t as f32 / self.t as f32,
            h as f32 / self.h as f32,
            w as f32 / self.w as f32,
        ]
    }

    /// Number of rows outside any single frame.
    pub fn other_frame_candidates(&self) -> usize {
        self.t.saturating_sub(1) * self.frame_size()
    }

    pub(crate) fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let available = self.other_frame_candidates();
        if k > available {
            return Err(Error::TooFewCandidates {
                k,
                available,
                frames: self.t,
                frame_size: self.frame_size(),
            });
        }
        Ok(())
    }
}

/// A `THW x C` feature matrix with rows ordered by `(t, h, w)`.
#[derive(Clone, Debug)]
pub struct FeaturePointCloud {
    features: Tensor,
    dims: Dims,
}

impl FeaturePointCloud {
    pub fn new(features: Tensor, dims: Dims) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != dims.points() {
            return Err(Error::shape(
                "point cloud",
                format!("features {s:?} do not hold {} points of {dims:?}", dims.points()),
            ));
        }
        if dims.points() < 2 {
            return Err(Error::invalid("a point cloud needs at least two points"));
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud features must be finite"));
        }
        Ok(FeaturePointCloud { features, dims })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.points()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.features.data()[i * c..(i + 1) * c]
    }

    pub fn frame_of(&self, i: usize) -> usize {
        self.dims.frame_of(i)
    }

    pub fn coords(&self, i: usize) -> [f32; 3] {
        self.dims.normalized(i)
    }
}

/// `rows x k` proposed-correspondence rows, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKIndex {
    indices: Vec<usize>,
    k: usize,
}

impl TopKIndex {
    pub fn new(indices: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::shape(
                "top-k index",
                format!("{} entries do not form rows of k = {k}", indices.len()),
            ));
        }
        Ok(TopKIndex { indices, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    /// Checks row count, range and the other-frame invariant against `dims`.
    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.rows() != dims.points() {
            return Err(Error::shape(
                "top-k index",
                format!("{} rows for {} points", self.rows(), dims.points()),
            ));
        }
        for i in 0..self.rows() {
            for &j in self.row(i) {
                if j >= dims.points() {
                    return Err(Error::IndexOutOfRange {
                        op: "top-k index",
                        index: j,
                        len: dims.points(),
                    });
                }
                if dims.frame_of(j) == dims.frame_of(i) {
                    return Err(Error::invalid(format!("row {i} proposes {j} from its own frame")));
                }
            }
        }
        Ok(())
    }

    /// Copy with every index shifted by `offset` (for batched gathers).
    pub fn offset(&self, offset: usize) -> Vec<usize> {
        self.indices.iter().map(|&j| j + offset).collect()
    }
}

/// Which k-NN implementation to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KnnBackend {
    Brute,
    #[default]
    Tree,
}

impl KnnBackend {
    pub fn select(self, cloud: &FeaturePointCloud, k: usize) -> Result<TopKIndex> {
        match self {
            KnnBackend::Brute => knn_brute(cloud, k),
            KnnBackend::Tree => knn_tree(cloud, k),
        }
    }
}

impl FromStr for KnnBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(KnnBackend::Brute),
            "tree" => Ok(KnnBackend::Tree),
            other => Err(Error::invalid(format!(
                "unknown k-NN backend {other:?} (expected brute or tree)"
            ))),
        }
    }
}

impl fmt::Display for KnnBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnnBackend::Brute => "brute",
            KnnBackend::Tree => "tree",
        })
    }
}

/// Dense path: full similarity matrix, same-frame mask, row-wise top-k.
pub fn knn_brute(cloud: &FeaturePointCloud, k: usize) -> Result<TopKIndex> {
    cloud.dims().check_k(k)?;
    let sim = pairwise_similarity(cloud)?;
    let masked = mask_same_frame(sim, cloud.dims())?;
    arg_top_k(&masked, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_ordering_and_coords() {
        let d = Dims::new(2, 3, 4);
        assert_eq!(d.position(0), (0, 0, 0));
        assert_eq!(d.position(13), (1, 0, 1));
        assert_eq!(d.position(23), (1, 2, 3));
        let c = d.normalized(23);
        assert_eq!(c, [0.5, 2.0 / 3.0, 0.75]);
        assert!(c.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn backend_parses() {
        assert_eq!("brute".parse::<KnnBackend>().unwrap(), KnnBackend::Brute);
        assert_eq!("tree".parse::<KnnBackend>().unwrap(), KnnBackend::Tree);
        assert!("ball".parse::<KnnBackend>().is_err());
    }

    #[test]
    fn cloud_rejects_wrong_rows_and_nan() {
        let d = Dims::new(2, 1, 2);
        assert!(FeaturePointCloud::new(Tensor::zeros(&[3, 2]), d).is_err());
        let mut t = Tensor::zeros(&[4, 2]);
        t.data_mut()[3] = f32::NAN;
        assert!(FeaturePointCloud::new(t, d).is_err());
    }

    #[test]
    fn similarity_floor_is_above_mask() {
        assert_eq!(FLOOR.to_bits(), MASKED.to_bits() - 1);
        let big = [3e38f32];
        let neg = [-3e38f32];
        assert_eq!(similarity(&big, &neg), FLOOR);
    }
}
