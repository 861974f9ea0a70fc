//! Moving-square videos: a 2x2 white square translating 7-9 px per step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAMES: usize = 4;
pub const SIZE: usize = 32;
pub const SQUARE: usize = 2;
pub const MIN_STEP: usize = 7;
pub const MAX_STEP: usize = 9;
pub const TRAIN_COUNT: usize = 1000;
pub const VAL_COUNT: usize = 200;
pub const FRAME_PIXELS: usize = SIZE * SIZE;
pub const SAMPLE_PIXELS: usize = FRAMES * FRAME_PIXELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("direction code {i} is not in 0..4")))
    }

    /// Unit step `(d_row, d_col)`; up decreases the row.
    pub fn unit(self) -> (isize, isize) {
        match self {
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

/// One video: `FRAMES x SIZE x SIZE` pixels in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySample {
    pub frames: Vec<u8>,
    pub label: Direction,
}

impl ToySample {
    /// Renders a square whose top-left corner is at `corners[t]` in frame `t`.
    pub fn render(corners: [(usize, usize); FRAMES], label: Direction) -> Self {
        let mut frames = vec![0u8; SAMPLE_PIXELS];
        for (t, &(r, c)) in corners.iter().enumerate() {
            for dr in 0..SQUARE {
                for dc in 0..SQUARE {
                    frames[t * FRAME_PIXELS + (r + dr) * SIZE + c + dc] = 1;
                }
            }
        }
        ToySample { frames, label }
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t * FRAME_PIXELS..(t + 1) * FRAME_PIXELS]
    }

    /// Top-left corner of the lit region in frame `t`, if any pixel is lit.
    pub fn corner(&self, t: usize) -> Option<(usize, usize)> {
        let f = self.frame(t);
        let first = f.iter().position(|&p| p != 0)?;
        Some((first / SIZE, first % SIZE))
    }
}

/// Train and validation splits with balanced labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyDataset {
    pub train: Vec<ToySample>,
    pub val: Vec<ToySample>,
    /// Generator seed; unknown for datasets read from disk.
    pub seed: Option<u64>,
}

fn sample_one(rng: &mut ChaCha8Rng, label: Direction) -> ToySample {
    let steps: [usize; FRAMES - 1] = std::array::from_fn(|_| rng.random_range(MIN_STEP..=MAX_STEP));
    let total: usize = steps.iter().sum();
    let last = SIZE - SQUARE;
    // Start along the motion axis so the whole path stays on the canvas.
    let along_start = match label {
        Direction::Right | Direction::Down => rng.random_range(0..=last - total),
        Direction::Left | Direction::Up => rng.random_range(total..=last),
    };
    let across = rng.random_range(0..=last);
    let (dr, dc) = label.unit();
    let mut corners = [(0usize, 0usize); FRAMES];
    let mut along = along_start as isize;
    let sign = dr + dc;
    for t in 0..FRAMES {
        if t > 0 {
            along += sign * steps[t - 1] as isize;
        }
        corners[t] = if dr != 0 {
            (along as usize, across)
        } else {
            (across, along as usize)
        };
    }
    ToySample::render(corners, label)
}

/// `count` samples with exactly `count / 4` per label, in shuffled order.
pub fn generate_split(rng: &mut ChaCha8Rng, count: usize) -> Vec<ToySample> {
    assert!(count.is_multiple_of(4), "split size must be divisible by 4");
    let mut labels: Vec<Direction> = Direction::ALL
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, count / 4))
        .collect();
    labels.shuffle(rng);
    labels.into_iter().map(|l| sample_one(rng, l)).collect()
}

pub fn generate_toy_dataset(seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_split(&mut rng, TRAIN_COUNT);
    let val = generate_split(&mut rng, VAL_COUNT);
    ToyDataset {
        train,
        val,
        seed: Some(seed),
    }
}

/// Stacks samples into a `[N, FRAMES, SIZE, SIZE]` tensor (white = 1.0)
/// and their label codes.
pub fn batch_tensor(samples: &[&ToySample]) -> Result<(Tensor, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let data = samples
        .iter()
        .flat_map(|s| s.frames.iter().map(|&p| p as f32))
        .collect();
    let labels = samples.iter().map(|s| s.label.index()).collect();
    Ok((Tensor::new(vec![samples.len(), FRAMES, SIZE, SIZE], data)?, labels))
}
