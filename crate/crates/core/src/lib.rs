//! Structure-enhanced temporal point processes.
//!
//! A recurrent temporal point process is fitted by maximum likelihood while a
//! Gromov-Wasserstein term pulls the Gaussian kernel of its sequence embeddings
//! toward a nonparametric kernel computed directly from the event data. The
//! resulting model predicts events and yields embeddings that cluster.
//!
//! The numerical core is generic over the scalar type (see [`Scalar`]); the
//! aliases at the bottom of this file name the `f64` and `f32` instantiations.
//! Event data itself is always stored in `f64` seconds.

pub mod cluster;
pub mod data;
pub mod error;
pub mod gw;
pub mod kernel;
pub mod linalg;
pub mod scalar;
pub mod seqdist;
pub mod simulate;
pub mod tpp;
pub mod train;

pub use cluster::{dis_sc_baseline, nmi, rand_index, spectral_cluster, ClusteringReport};
pub use data::{load_dataset, save_dataset, Dataset, DatasetHeader, Event, EventSequence, EventVector};
pub use error::{Error, Result};
pub use gw::{GwConfig, GwResult, TransportPlan};
pub use kernel::KernelMatrix;
pub use linalg::Mat;
pub use scalar::Scalar;
pub use seqdist::{DistanceMatrix, DistancePower, SubsetMode};
pub use simulate::{GeneratorKind, GeneratorSpec, Link, SyntheticPlan};
pub use tpp::{Backbone, Checkpoint, EncodedSequence, GradientBundle, TppDims, TppParams};
pub use train::{OptimizerKind, TrainConfig, TrainReport};

pub type KernelMatrixF64 = KernelMatrix<f64>;
pub type KernelMatrixF32 = KernelMatrix<f32>;
pub type DistanceMatrixF64 = DistanceMatrix<f64>;
pub type DistanceMatrixF32 = DistanceMatrix<f32>;
pub type TransportPlanF64 = TransportPlan<f64>;
pub type TransportPlanF32 = TransportPlan<f32>;
pub type GwResultF64 = GwResult<f64>;
pub type GwResultF32 = GwResult<f32>;
pub type TppParamsF64 = TppParams<f64>;
pub type TppParamsF32 = TppParams<f32>;
pub type GradientBundleF64 = GradientBundle<f64>;
pub type EncodedSequenceF64 = EncodedSequence<f64>;
pub type MatF64 = Mat<f64>;
pub type MatF32 = Mat<f32>;
