//! Differentiable core and the angle regressor.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{
    gnn_layer, lstm_cell, spatial_plan, wheel_adjacency, wheel_mixing, AnglePredictor, BicConfig, BicModel,
    Bound, ConvSpec, Forward, Prediction,
};
pub use tape::{leaky_relu, Graph, NodeId, LEAKY_SLOPE};
pub use tensor::Tensor;
