//! Small dense networks with reverse-mode gradients.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod tape;

pub use adam::{clip_grad_norm, Adam};
pub use gradcheck::{max_relative_error, REL_ERR_FLOOR};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT};
pub use mlp::{stack_rows, GaussianPolicy, Mlp, PolicyVars, ValueNet, LOG_STD_MAX, LOG_STD_MIN};
pub use tape::{gaussian_log_prob_rows, half_ln_two_pi, Tape, Var};
