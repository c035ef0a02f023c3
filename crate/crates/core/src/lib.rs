//! Simulation lab for digit classification on analog resistive crossbar
//! arrays: train a small dense network, map its weights onto differential
//! conductance pairs, inject spatially clustered stuck devices, measure the
//! accuracy hit, and train a corrector network on the faulty circuit's
//! output voltages to win the accuracy back.

pub mod corrector;
pub mod crossbar;
pub mod dataset;
pub mod defects;
pub mod device;
pub mod error;
pub mod mlp;
pub mod netlist;
pub mod pipeline;
pub mod report;

pub use corrector::{correct, harvest, CorrectorConfig, CorrectorDataset, CorrectorResult, RateOutcome};
pub use crossbar::{
    array_vmm, batch_inference, circuit_forward, circuit_forward_trace, map_network, output_stage,
    CrossbarArray, CrossbarStack, InferenceReport, InferenceRow,
};
pub use dataset::{split_dataset, Dataset, DigitImage, IMAGE_PIXELS, MAX_GRAY, NUM_CLASSES};
pub use defects::{
    apply_defects, build_mask, pattern_for_target_pairs, sweep_patterns, DefectMask, DefectSpec,
    FaultMode, Pattern, PatternFamily, Side, SweepPoint,
};
pub use device::{
    conductance_from_gap, gap_from_conductance, map_weight, weight_from_pair, DeviceParams,
    PairOrigin, ReramPair, G_OFF, G_ON, GAP_MAX_NM, GAP_MIN_NM,
};
pub use error::{Error, Result};
pub use mlp::{
    dense_topology, evaluate, train, Activation, Evaluation, LayerSpec, MlpModel, Samples,
    TrainConfig, TrainOutcome,
};
pub use netlist::{export_netlist, parse_netlist, verify_netlist, write_netlist, ParsedNetlist};
pub use pipeline::{
    run_experiment, with_worker_pool, ExperimentConfig, MapFormat, MapQuantity, Pipeline,
    RunManifest,
};
pub use report::{bytes_hash, content_hash, derive_seed, fmt_f64};
