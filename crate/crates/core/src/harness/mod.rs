//! Datasets, run configuration, pretraining, checkpoints and linear probes.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod probe;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DatasetKind, RunConfig};
pub use dataset::{
    load_cifar10_binary, synth_clusters, write_cifar10_binary, Dataset, SynthConfig, SynthData, UnlabeledDataset,
};
pub use probe::{embed_dataset, linear_probe, linear_probe_features, raw_probe, ProbeConfig};
pub use train::{pretrain, train_step, MetricsRow, PretrainOptions, PretrainOutput, METRICS_HEADER};
