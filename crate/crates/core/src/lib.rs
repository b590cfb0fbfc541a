//! Streaming analytics for anonymized hypersparse network traffic matrices.
//!
//! Packets are grouped into windows of a fixed number of valid packets, each
//! window becomes a sparse source × destination count matrix, and the
//! per-window network quantities feed three empirical traffic laws: window
//! scaling, Zipf–Mandelbrot degree distributions and modified Cauchy revisit
//! decay. Their fitted parameters combine into a source observability score.
//!
//! Numeric fitting code is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

pub mod anonymize;
pub mod generator;
pub mod ingest;
pub mod laws;
pub mod matrix;
pub mod model;
mod num;
pub mod pipeline;
pub mod stats;

pub use num::Real;

pub use anonymize::{anonymize, AnonymizationKey, KeyedPermutation};
pub use generator::{generate_stream, generate_two_observers, SyntheticScenario};
pub use ingest::{Addr, PacketFilter, PacketRecord, Window, WindowSpec};
pub use matrix::{aggregates, build_matrix, degree_vectors, DegreeQuantity, NetworkAggregates, Quantity, TrafficMatrix};

pub type ZipfMandelbrotFit = stats::ZipfMandelbrotFit<f64>;
pub type ScalingFit = stats::ScalingFit<f64>;
pub type CauchyFit = stats::CauchyFit<f64>;
pub type CorrelationCurve = stats::CorrelationCurve<f64>;
pub type SelfCorrelation = stats::SelfCorrelation<f64>;
pub type CrossCorrelation = stats::CrossCorrelation<f64>;
pub type ModelParameters = model::ModelParameters<f64>;
pub type ObservabilityQuery = model::ObservabilityQuery<f64>;
pub type Observability = model::Observability<f64>;
