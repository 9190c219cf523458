//! The federated round loop: client training against broadcast prototypes,
//! local prototype extraction, server aggregation and the per-method server
//! phase, plus the single-global-model and personalization extensions.

mod client;
mod config;
mod prototypes;
mod run;

pub use client::{
    client_local_train, client_loss_and_grads, sample_participants, AlignmentTarget, BatchLoss,
    LocalTrainConfig, LocalTrainReport,
};
pub use config::{ExperimentConfig, HiddenLayout, Method, Mode};
pub use prototypes::{compute_local_prototypes, AggregationWeights, GlobalPrototypes, Uplink, UplinkEntry};
pub use run::{
    build_strategy, build_text_assets, init_models, load_source_dataset, prepare_federation,
    run_experiment, run_pfl_finetune, run_with_strategy, AlignmentKind, Broadcast, FedTsp, Federation,
    PflResult, PrototypeSnapshot, RunOptions, RunResult, ServerOutput, ServerStrategy,
};
