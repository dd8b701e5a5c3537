//! Open-set source attribution in a learned embedding space.
//!
//! Pipeline: pretrain an MLP on a many-class pretext task, drop the
//! classifier head, fine-tune with ProxyNCA++ against per-class proxies,
//! build per-class centroid references with a spread estimate, and attribute
//! new samples by nearest normalized distance with a rejection threshold.

pub mod error;
pub mod eval;
pub mod metric;
pub mod net;
pub mod openset;
pub mod pretrain;
pub mod rng;
pub mod synthdata;
pub mod types;

pub use error::{Error, Result};
pub use net::{Activation, AdamWConfig, Checkpoint, EmbeddingModel, LrSchedule, OptimizerState};
pub use openset::{AttributionDecision, ClassReference, ReferenceSet};
pub use types::{
    ClassId, Embedding, FeatureVector, LabeledDataset, LabeledSample, Split,
};
