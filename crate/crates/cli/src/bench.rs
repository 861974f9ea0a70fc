//! Wall-clock timing of the two k-NN backends over growing point counts.

use std::io::Write;
use std::time::Instant;

use cpnet_core::knn::{Dims, FeaturePointCloud, KnnBackend, TopKIndex};
use cpnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

/// Frames per benchmark cloud; each size is split into this many frames.
pub const BENCH_FRAMES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub k: usize,
    pub backends: Vec<KnnBackend>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            sizes: vec![512, 1024, 2048],
            channels: 64,
            k: 8,
            backends: vec![KnnBackend::Brute, KnnBackend::Tree],
            repeats: 3,
            seed: 0,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(CliError::invalid("no sizes to benchmark"));
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::invalid("sizes must be strictly ascending"));
        }
        if let Some(&bad) = self.sizes.iter().find(|&&s| s == 0 || s % BENCH_FRAMES != 0) {
            return Err(CliError::invalid(format!(
                "size {bad} is not a positive multiple of {BENCH_FRAMES} frames"
            )));
        }
        if self.backends.is_empty() {
            return Err(CliError::invalid("no backends to benchmark"));
        }
        if self.channels == 0 || self.repeats == 0 {
            return Err(CliError::invalid("channels and repeats must be at least 1"));
        }
        let smallest = dims_for(self.sizes[0]).other_frame_candidates();
        if self.k == 0 || self.k > smallest {
            return Err(CliError::invalid(format!(
                "k = {} must lie in 1..={smallest} for THW = {}",
                self.k, self.sizes[0]
            )));
        }
        Ok(())
    }
}

fn dims_for(size: usize) -> Dims {
    Dims::new(BENCH_FRAMES, 1, size / BENCH_FRAMES)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub backend: KnnBackend,
    pub thw: usize,
    pub c: usize,
    pub k: usize,
    /// Fastest of the repeats.
    pub millis: f64,
}

pub const CSV_HEADER: &str = "backend,thw,c,k,millis";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.backend, self.thw, self.c, self.k, self.millis)
    }
}

/// Ratio of each size's time to the previous size's, per backend.
pub fn growth_ratios(rows: &[BenchRow], backend: KnnBackend) -> Vec<(usize, usize, f64)> {
    let times: Vec<&BenchRow> = rows.iter().filter(|r| r.backend == backend).collect();
    times
        .windows(2)
        .map(|w| (w[0].thw, w[1].thw, w[1].millis / w[0].millis))
        .collect()
}

/// Times every backend on one random cloud per size. CSV rows go to `csv`
/// and growth ratios to `log`. Outputs of all backends must agree.
pub fn bench(settings: &BenchSettings, csv: &mut dyn Write, log: &mut dyn Write) -> Result<Vec<BenchRow>> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut rows = Vec::new();
    let _ = writeln!(csv, "{CSV_HEADER}");
    for &size in &settings.sizes {
        let features = Tensor::from_fn(&[size, settings.channels], |_| rng.random_range(-1.0f32..1.0));
        let cloud = FeaturePointCloud::new(features, dims_for(size))?;
        let mut reference: Option<(KnnBackend, TopKIndex)> = None;
        for &backend in &settings.backends {
            let mut best = f64::INFINITY;
            let mut result = None;
            for _ in 0..settings.repeats {
                let start = Instant::now();
                let idx = backend.select(&cloud, settings.k)?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
                result = Some(idx);
            }
            let result = result.expect("at least one repeat");
            match &reference {
                Some((name, r)) if *r != result => {
                    return Err(CliError::Failed(format!(
                        "{backend} and {name} disagree at THW = {size}"
                    )));
                }
                Some(_) => {}
                None => reference = Some((backend, result)),
            }
            let row = BenchRow {
                backend,
                thw: size,
                c: settings.channels,
                k: settings.k,
                millis: best,
            };
            let _ = writeln!(csv, "{}", row.csv());
            rows.push(row);
        }
    }
    for &backend in &settings.backends {
        for (a, b, ratio) in growth_ratios(&rows, backend) {
            let _ = writeln!(log, "{backend}: THW {a} -> {b} time ratio {ratio:.2}");
        }
    }
    if settings.backends.len() > 1 {
        let _ = writeln!(log, "outputs of all backends agree on every size");
    }
    Ok(rows)
}
