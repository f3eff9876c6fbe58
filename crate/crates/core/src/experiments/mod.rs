//! Datasets, training and the weight-difference penalty experiments.

pub mod data;
pub mod figures;
pub mod train;

pub use data::{
    load_mnist, load_mnist_dir, parse_idx_images, parse_idx_labels, synth_dataset, Dataset, Split, SynthSpec,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES,
};
pub use figures::{
    atomic_write, pearson, run_fig1, run_fig2, write_checkpoint, DataSource, ExperimentScale, Fig1Config,
    Fig1Result, Fig1Row, Fig2Config, Fig2Result, Fig2Row, Fig2Summary, OutputOptions, Profile,
};
pub use train::{
    accuracy, batch_gradient, cross_entropy, format_lambda, generalization_gap, mean_loss, parse_lambda,
    penalized_gradient, tie_weights, train, train_observed, Adam, EpochEvent, EpochMetrics, RunRecord,
    TrainConfig,
};
