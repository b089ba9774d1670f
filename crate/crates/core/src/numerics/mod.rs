//! Small dense kernels: parameter containers, MLP forward/backward, optimizers.

pub mod mlp;
pub mod optim;
pub mod params;
pub mod rng;

pub use mlp::{
    accumulate_backward, backward, forward, forward_from, hidden_activation, log_softmax, log_sum_exp, softmax,
    Activation, ForwardCache, MlpSpec,
};
pub use optim::{adam_step, sgd_step, AdamState};
pub use params::{Block, ParamVector};
