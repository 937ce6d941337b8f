//! Semantic area matching for two-view feature matching.
//!
//! Segment masks become candidate areas ([`ingest`]), candidate areas become
//! a multi-level area graph ([`graph`]), and areas are matched across views
//! either by graph-cut energy minimization over that graph ([`mesa`]) or by
//! fitting a mixture model to coarse patch matches ([`dmesa`]). Matched area
//! pairs drive point matching inside each pair ([`pipeline`]); [`eval`]
//! scores the results against synthetic ground truth from [`synthetic`].

pub mod cluster;
pub mod config;
pub mod dmesa;
pub mod epipolar;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod image;
pub mod ingest;
pub mod mesa;
pub mod ncc;
pub mod pipeline;
pub mod similarity;
pub mod synthetic;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Dmesa(#[from] dmesa::DmesaError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Mesa(#[from] mesa::MesaError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Similarity(#[from] similarity::SimilarityError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
