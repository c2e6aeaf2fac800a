//! Combinatorial-shortcut lab for attention-based explanations.

// `!(x > 0)` rejects NaN as well; index loops mirror the probability formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod masking;
pub mod mitigation;
pub mod models;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = autograd::Graph<f64>;
pub type DemoModel = models::DemoAttentionModel<f64>;
pub type DemoModel32 = models::DemoAttentionModel<f32>;
pub type BlackBoxModel = models::BlackBoxClassifier<f64>;
pub type BlackBoxModel32 = models::BlackBoxClassifier<f32>;
pub type ExplainerModel = models::Explainer<f64>;
pub type ApproximatorModel = models::Approximator<f64>;
pub type Estimator = models::MaskLabelEstimator<f64>;
pub type L2x = mitigation::L2xPair<f64>;
pub type RationalJoint = mitigation::oracle::DiscreteJoint<num_rational::BigRational>;
pub type FloatJoint = mitigation::oracle::DiscreteJoint<f64>;
