//! Multi-modal federated learning over institutions that hold unequal
//! subsets of data modalities.
//!
//! Encoders are aggregated per modality and classifiers per modality
//! combination. Optional per-group learning-rate scaling (distributed
//! gradient blending) and similarity-based weighting of institutions' losses
//! (proximity-aware client weighting) are driven by the round loop in
//! [`federation`]. [`harness`] evaluates, logs and compares runs, and
//! [`config`] wires everything to a JSON experiment description.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;

pub use config::{run_and_export, run_experiment, run_grid, ExperimentConfig, GridConfig};
pub use data::{
    generate_synthetic, load_csv, partition, sample_minibatch, write_csv, Datapoint, GlobalDataset, Heterogeneity,
    InstitutionDataset, InstitutionSpec, PartitionPlan, SyntheticSpec,
};
pub use error::{Error, ErrorClass, Result};
pub use federation::{
    adjusted_losses, aggregate_classifiers, aggregate_encoders, cumulative_gradient, dogr_coefficients,
    global_trajectory, local_train, normalize_dogr, overfitting_generalization, pcw_weights, run_federation,
    softmax_weights, ClientState, Federation, FederationConfig, LrSchedule, MethodMode, PcwWeights, RoundReport,
    ServerState,
};
pub use harness::{
    best_round, compare_methods, evaluate_global, export_metrics, read_metrics, rho_distribution, EvalResult,
    ModelSnapshot, RoundRecord, RunResult,
};
pub use model::{
    build_network, combo_key, unflatten, ArchRegistry, EncoderSpec, FeatureMap, ModalityCombination, ModalityId,
    MrnaDepth, MultiModalNet,
};
pub use nn::{
    cross_entropy, finite_diff_grad, sgd_step, Activation, DenseLayer, DenseNetwork, GradientVector, GroupId,
    GroupRole, ParamGroup, ParamLayout, ParamVector,
};
