//! Stage-1 latent identification: sliding-window variational inference of the
//! hidden context from short observation blocks.

mod block;
mod elbo;
mod nets;

pub use block::{
    extract_blocks, extract_blocks_history_only, BlockWindow, Extraction, FrameLayout, Modality,
    Normalizer,
};
pub use elbo::{elbo_loss, train_stage1, ElboTerms, Stage1Config, Stage1Train};
pub use nets::{
    decode_recon, posterior_infer, posterior_infer_frames, posterior_infer_scaled, prior_predict,
    DecoderNet, LatentBelief,
    PosteriorNet, PriorInput, PriorNet, Stage1Nets,
};
pub(crate) use nets::stage1_from_parts;
