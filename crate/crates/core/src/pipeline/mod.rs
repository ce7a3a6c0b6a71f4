//! The experiment loop: build a task stream, pretrain a base network, then
//! for each unlabeled task expand novel branches, train them, evaluate and
//! merge them back into a single-branch model.

mod checkpoint;
mod config;
mod data;
mod model;
mod training;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{Architecture, ExperimentConfig, CONFIG_KEYS};
pub use data::{
    make_synthetic_stream, make_view, pack_centers, parse_cifar_records, read_cifar_records, HiddenLabels, LabeledSet,
    NovelTask, StreamSpec, TaskStream, UnlabeledSet, CIFAR_RECORD_BYTES,
};
pub use model::{to_input, BaseNetwork, Layer, Model};
pub use training::{
    evaluate_model, expand_novel_branch, extend_prototypes, initial_network, merge_check, merge_task, pretrain_base,
    run_experiment, run_experiment_on, stage_rng, train_task, ExperimentReport, MergeCheck, PretrainOutcome, Projection,
    TaskRecord, TrainLog,
};
