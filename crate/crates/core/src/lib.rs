//! Multiple-instance bag classification with prototype-anchored instance
//! disentanglement and low-rank metric subspace clustering.
//!
//! A bag of instance features is projected, clustered into three groups under
//! a learned low-rank Mahalanobis metric, and each group is labelled tumor,
//! non-tumor or background by its characteristic-function distance to a
//! prototype set. The bag representation is the distance-weighted sum of the
//! pooled groups plus the prototype mean.

pub mod cfd;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod lrsc;
pub mod metric;
pub mod model;
pub mod pid;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use metric::MetricMatrix;
pub use model::{ModelParams, TrainConfig, Variant};
pub use pid::{DisentangledBag, PrototypeSet, Semantic};
pub use synth::{Bag, SynthConfig};
