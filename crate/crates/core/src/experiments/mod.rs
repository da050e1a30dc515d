//! Experiments that check the mechanism: the induction-head bound bench,
//! long-context recall, ablations, causality and scan throughput.

pub mod induction;
pub mod probes;
pub mod recall;

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::training::TrainError;
use crate::ttt::TttError;

pub use induction::{build_induction_instance, logit_delta, theorem_bench, InductionInstance, InductionSettings, TargetKind, TheoremReport};
pub use probes::{causality_probe, scan_bench, CausalityReport, ScanBenchRow};
pub use recall::{ablation_run, sliding_window_ppl, AblationRow, AblationVariant, PplPoint, RecallDoc, RecallProtocol, RecallSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment settings: {0}")]
    Config(String),
    #[error("constraint cannot be met: {0}")]
    Unattainable(String),
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ttt(#[from] TttError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;
