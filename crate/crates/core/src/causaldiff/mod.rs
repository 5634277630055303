//! Stage-2 causal diffusion: noise schedules, the block denoiser, the
//! denoise-and-refine objective, and zigzag sampling / planning.

mod denoiser;
mod idm;
mod rollout;
mod sample;
mod schedule;
mod train;

pub use denoiser::{
    denoise_predict, level_embedding, DenoiserNet, DenoiserVars, GenTarget, NoisyBlock,
    CONDITION_DIM, HISTORY_HIDDEN, LEVEL_EMBED_DIM,
};
pub use idm::{
    idm_samples_plain, idm_samples_posterior, idm_samples_true_context, train_idm, IdmConfig,
    IdmNet, IdmSample,
};
pub use rollout::{plan_and_act, policy_act, RolloutReport};
pub use sample::{
    ar_denoise_block, check_target_compat, zigzag_sample, ObsFrame, SamplerCtx, SamplerOutput,
};
pub use schedule::{
    causal_levels, forward_noise, level_jump, make_schedule, BlockLevels, NoiseSchedule,
};
pub use train::{
    extract_stage2, refine_losses, train_stage2, ConditionKind, LevelSchedule, LossReport,
    PlanMode, RefineCtx, RefineOpts, RefineProbe, Stage2Config, Stage2Model, Stage2Sample,
    Stage2Train,
};
