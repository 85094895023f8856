//! The class-generalization prompt network, the frozen text encoder stand-in,
//! classification losses with exact gradients, and the optimizer.

pub mod loss;
pub mod net;
pub mod optim;
pub mod params;
pub mod text;
pub mod train;

pub use loss::{ce_loss, class_scores, softmax_probs};
pub use net::{prompt_net_backward, prompt_net_forward};
pub use optim::{cosine_lr, sgd_step, OptimizerState, SgdTarget};
pub use params::{NetShape, PromptBank, PromptNetParams};
pub use text::{TextEncoderStub, DEFAULT_STUB_SEED};
pub use train::{stage_a_loss, stage_a_loss_and_grad, stage_b_loss, stage_b_loss_and_grad, StageBGrad};
