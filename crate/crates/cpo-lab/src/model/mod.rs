//! The tiny `f64` decoder-only transformer: configuration, flat parameters,
//! forward pass with full trace, exact backward pass, and top-k sampling.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod params;
mod sample;

pub use backward::{loss_backward, LossTerm};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    forward_logits, hidden_states, log_softmax_at, row_lse, sequence_logprob, ForwardTrace,
    LayerTrace, NormTrace,
};
pub use params::{
    init_parameters, perturb_parameters, ParamGroup, ParamKind, ParamLayout, Parameters,
};
pub use sample::sample_topk;

pub(crate) use forward::forward_ids;
