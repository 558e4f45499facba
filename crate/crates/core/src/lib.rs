//! Ordered-width neural networks and a desk-scale federated training
//! simulator.
//!
//! The engine trains networks whose layers can run at a sampled width
//! fraction `p`, keeping the first `ceil(p * K)` units of each eligible
//! layer. Submodels are nested, so one training run yields a whole family of
//! deployable models. On top of the engine sit self-distillation losses, an
//! in-process federated orchestrator with capability-capped clients and
//! segment-wise aggregation, random-dropout baselines, a cost model and the
//! runnable experiments.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod fed;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod od;
pub mod optim;
pub mod rng;
pub mod submodel;
pub mod svd;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, FeatureShape, LayerKind, LayerSpec};
pub use error::{Error, Result};
pub use model::{BnStats, Gradients, LayerGrads, LayerParams, Mode, Model, Selection, WidthKey};
pub use od::DropoutDistribution;
pub use optim::{sgd_step, LrSchedule, OptimizerState};
pub use rng::{Rng, StreamId};
pub use tensor::{kept_units, Tensor};
