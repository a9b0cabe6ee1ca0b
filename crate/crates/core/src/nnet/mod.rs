//! The conditional noise predictor and its training machinery.

mod adamw;
mod embed;
mod gemm;
mod gradcheck;
mod lr;
mod mlp;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use embed::{time_embed, time_embed_into};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use lr::{lr_at, LrSchedule};
pub use mlp::{mlp_backward, mlp_forward, Activation, Mlp, MlpCache};

pub(crate) use gemm::{gemm, Strides};
