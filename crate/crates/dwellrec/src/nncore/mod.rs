//! Minimal differentiable numeric substrate.
//!
//! Dense 2-D tensors, a define-by-run reverse-mode tape over the fixed op
//! set the encoders need (linear, tanh, masked softmax, dropout, embedding
//! lookup, concatenation, attention compositions), Adam, a central-difference
//! gradient checker, and a binary checkpoint format. Deliberately not a
//! general autograd: every op's adjoint is written out by hand in
//! [`tape`] and validated by [`gradcheck`].

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{att_pool, linear, multi_head_attention, AttPoolP, LinearP, MhaP};
pub use tape::{NodeId, Param, ParamSet, Tape};
pub use tensor::Tensor;
