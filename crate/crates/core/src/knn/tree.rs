//! Exact k-d tree backend.
//!
//! Rows with bit-identical features are collapsed into one tree point that
//! carries its ascending list of rows. Because the answer for a row only
//! depends on its feature vector and its frame, each distinct
//! (point, frame) pair is queried once.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{similarity, Dims, FeaturePointCloud, TopKIndex, FLOOR};
use crate::error::Result;

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f32,
        left: usize,
        right: usize,
    },
}

struct KdTree<'a> {
    cloud: &'a FeaturePointCloud,
    /// One representative row per distinct feature vector.
    reps: Vec<usize>,
    /// Rows sharing each representative's features, ascending.
    buckets: Vec<Vec<usize>>,
    /// Distinct-point ids, permuted so every leaf is a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    fn build(cloud: &'a FeaturePointCloud) -> (Self, Vec<usize>) {
        let mut ids: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut reps = Vec::new();
        let mut buckets: Vec<Vec<usize>> = Vec::new();
        let mut group_of = Vec::with_capacity(cloud.len());
        for i in 0..cloud.len() {
            // +0.0 folds negative zero into positive zero.
            let key: Vec<u32> = cloud.row(i).iter().map(|&v| (v + 0.0).to_bits()).collect();
            let g = *ids.entry(key).or_insert_with(|| {
                reps.push(i);
                buckets.push(Vec::new());
                reps.len() - 1
            });
            buckets[g].push(i);
            group_of.push(g);
        }
        let mut tree = KdTree {
            cloud,
            order: (0..reps.len()).collect(),
            reps,
            buckets,
            nodes: Vec::new(),
        };
        let n = tree.order.len();
        tree.build_node(0, n);
        (tree, group_of)
    }

    fn coord(&self, id: usize, dim: usize) -> f32 {
        self.cloud.row(self.reps[id])[dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return slot;
        }
        let channels = self.cloud.channels();
        let mut best = (0usize, 0.0f32);
        for dim in 0..channels {
            let (lo, hi) = self.order[start..end]
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &id| {
                    let v = self.coord(id, dim);
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > best.1 {
                best = (dim, hi - lo);
            }
        }
        if best.1 <= 0.0 {
            return slot;
        }
        let dim = best.0;
        let mid = start + (end - start) / 2;
        let mut ids = std::mem::take(&mut self.order);
        ids[start..end].select_nth_unstable_by(mid - start, |&a, &b| self.coord(a, dim).total_cmp(&self.coord(b, dim)));
        self.order = ids;
        let value = self.coord(self.order[mid], dim);
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        slot
    }

    fn query(&self, query: &[f32], frame: usize, k: usize) -> Vec<usize> {
        let mut best = Candidates::new(k, self.cloud.dims(), frame);
        self.search(0, query, &mut best);
        best.items.into_iter().map(|(_, i)| i).collect()
    }

    fn search(&self, node: usize, q: &[f32], best: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let sim = similarity(q, self.cloud.row(self.reps[id]));
                    best.offer(sim, &self.buckets[id]);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Upper bound on the similarity of anything across the plane.
                let bound = (-(diff * diff)).max(FLOOR);
                if !best.is_full() || bound >= best.worst() {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Up to `k` (similarity, row) pairs, best first.
struct Candidates {
    items: Vec<(f32, usize)>,
    k: usize,
    dims: Dims,
    frame: usize,
}

impl Candidates {
    fn new(k: usize, dims: Dims, frame: usize) -> Self {
        Candidates {
            items: Vec::with_capacity(k + 1),
            k,
            dims,
            frame,
        }
    }

    fn is_full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f32 {
        self.items.last().map_or(f32::NEG_INFINITY, |c| c.0)
    }

    fn beats(a: (f32, usize), b: (f32, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    /// Offers every other-frame row of one bucket at similarity `sim`.
    fn offer(&mut self, sim: f32, rows: &[usize]) {
        for &row in rows {
            if self.dims.frame_of(row) == self.frame {
                continue;
            }
            let cand = (sim, row);
            if self.is_full() && !Self::beats(cand, *self.items.last().unwrap()) {
                // Remaining rows share `sim` and have larger indices.
                return;
            }
            let pos = self.items.partition_point(|&c| Self::beats(c, cand));
            self.items.insert(pos, cand);
            self.items.truncate(self.k);
        }
    }
}

/// Exact other-frame k-NN through a k-d tree over the feature space.
pub fn knn_tree(cloud: &FeaturePointCloud, k: usize) -> Result<TopKIndex> {
    let dims = cloud.dims();
    dims.check_k(k)?;
    let (tree, group_of) = KdTree::build(cloud);

    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (i, &g) in group_of.iter().enumerate() {
        let key = (g, dims.frame_of(i));
        slot.entry(key).or_insert_with(|| {
            jobs.push(key);
            jobs.len() - 1
        });
    }
    let answers: Vec<Vec<usize>> = jobs
        .par_iter()
        .map(|&(g, frame)| tree.query(cloud.row(tree.reps[g]), frame, k))
        .collect();

    let mut out = Vec::with_capacity(cloud.len() * k);
    for (i, &g) in group_of.iter().enumerate() {
        out.extend_from_slice(&answers[slot[&(g, dims.frame_of(i))]]);
    }
    TopKIndex::new(out, k)
}
