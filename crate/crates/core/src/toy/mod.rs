//! Moving-square toy experiment: data, networks and training.

pub mod dataset;
pub mod model;
pub mod train;

pub use dataset::{batch_tensor, generate_toy_dataset, Direction, ToyDataset, ToySample};
pub use model::{build_toy_c2d, build_toy_cpnet, ToyNet};
pub use train::{evaluate, train, train_with, Classifier, EpochRecord, TrainConfig, TrainReport};
