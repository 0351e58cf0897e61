//! Identity subspace modeling: implant the identity into a pseudo-token,
//! diversify per-image anchor embeddings, fit a diagonal Gaussian.

pub mod subspace;
pub mod text;
pub mod tuning;

pub use subspace::{
    anchor_objective, core_identity, diversify_contexts, estimate_subspace, learn_identity, sample_condition,
    AnchorSet, DiversifyConfig, IdentitySubspace, SigmaDivisor,
};
pub use text::{PromptTemplate, TextEncoderStub, Vocab, EVAL_PROMPTS, IDENTITY_TOKEN};
pub use tuning::{default_low_rank_slices, fine_tune, AttackMethod, TuneConfig, TuneScope, Tuned};
