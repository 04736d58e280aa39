//! Dense arrays, reverse-mode differentiation, AdamW and the learning-rate
//! schedule.

mod array;
mod graph;
mod optim;
mod schedule;

pub use array::{layer_norm, matmul, softmax, Array, Scalar};
pub(crate) use array::{dot, gemm_nn, log_sum_exp, row_stats, softmax_in_place, softplus};
pub use graph::{CategoricalTargets, Gradients, Graph, MixtureTargets, Var};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimState};
pub use schedule::{lr_at, Schedule};

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub values: Vec<Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|a| a.cast()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|a| a.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}
