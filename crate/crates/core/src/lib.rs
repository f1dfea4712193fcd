//! Neural architecture search with mutation-only Cartesian Genetic
//! Programming.
//!
//! A [`Genome`] is a one-row CGP grid whose function genes pick layers from a
//! [`LayerCatalog`]. Decoding keeps only the nodes reachable from the output
//! gene and appends a fixed Flatten/Dense(10)/Softmax head. Candidates must
//! pass [`shapecheck::compile`] before they are trained; a (1+2) loop keeps
//! an offspring only when it strictly beats its parent.
//!
//! Numerics are generic over [`Scalar`]; training runs in `f32` and the
//! gradient oracles in `f64`.

pub mod catalog;
pub mod data;
pub mod dot;
pub mod evolution;
pub mod experiment;
pub mod genome;
pub mod scalar;
pub mod shapecheck;
pub mod trainer;

pub use catalog::{default_catalog, Activation, LayerCatalog, LayerSpec};
pub use evolution::{budget, BudgetSpec, EvolutionConfig, FitnessRecord};
pub use genome::{active_nodes, decode, random_genome, CgpParams, Genome, NodeGene, Phenotype};
pub use scalar::Scalar;
pub use shapecheck::{compile, ShapeError, ShapeErrorKind, TensorShape};
pub use trainer::{Network, Tensor, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type TrainResult32 = trainer::TrainResult<f32>;
