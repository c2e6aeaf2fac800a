//! Trainable components.

pub mod approximator;
pub mod blackbox;
pub mod checkpoint;
pub mod demo;
pub mod digest;
pub mod estimator;
pub mod explainer;
pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, ParamSet};
use crate::scalar::Scalar;

pub use approximator::{Approximator, ApproximatorArch, Capacity};
pub use blackbox::{BlackBox, BlackBoxArch, BlackBoxClassifier, TrainReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use demo::{demo_forward, DemoArch, DemoAttentionModel, EncoderVariant};
pub use digest::{digest, ParameterDigest};
pub use estimator::{estimator_update, MaskLabelEstimator};
pub use explainer::{Explainer, ExplainerArch};
pub use gradcheck::{gradcheck, GradCheckReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// Stacks per-sample `[2]` logits into a `[batch, 2]` node.
pub fn stack_logits<T: Scalar>(g: &mut Graph<T>, outs: &[Var]) -> Var {
    let flat = g.concat(outs);
    let n = outs.len();
    g.reshape(flat, &[n, 2])
}

/// Reads a scalar loss, failing on NaN or infinity.
pub fn check_loss<T: Scalar>(g: &Graph<T>, loss: Var, step: usize) -> Result<f64> {
    let v = g.value(loss).data[0].as_f64();
    if !v.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("loss became {v}"),
        });
    }
    Ok(v)
}

macro_rules! params_as_mut {
    ($($ty:ident),*) => {$(
        impl<T> AsMut<ParamSet<T>> for $ty<T> {
            fn as_mut(&mut self) -> &mut ParamSet<T> {
                &mut self.params
            }
        }
    )*};
}

params_as_mut!(BlackBoxClassifier, Approximator, Explainer);
