//! Two-stage answer ranking for visual dialog.
//!
//! A primary stage fuses question, dialog history and object features with
//! multi-modal factorized bilinear pooling (MFB) and attention, then scores
//! every candidate answer. A synergistic stage re-encodes the top candidates
//! jointly with their question, attends the image once per candidate and
//! re-ranks them. A generative variant scores answers by sequence
//! probability and can produce candidates by beam search.
//!
//! All model math is generic over [`Scalar`] (`f32` or `f64`) and runs on a
//! small reverse-mode differentiation tape ([`graph::Graph`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod generative;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ranking;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64<'p> = graph::Graph<'p, f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;


