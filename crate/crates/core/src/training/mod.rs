//! Stage-0 backbone training, joint pre-training, fine-tuning, evaluation
//! and the ablation harness.

mod ablate;
mod config;
mod log;
mod metrics;
mod prepare;
mod stages;

pub use ablate::{ablate, mask_sweep, AblationReport, AblationRow, StageSteps, MASK_SWEEP, VARIANTS};
pub use config::{Stage, TrainConfig};
pub use log::{LogRow, TrainLog, LOG_HEADER};
pub use metrics::{should_stop, Metrics};
pub use prepare::{precompute_features, split_windows, Prepared, Split};
pub use stages::{
    evaluate, evaluate_windows, finetune_run, make_batch, pretrain_objective, pretrain_run, pretrain_step, stage0_train, Batch, LossParts,
    Objective, Stage0Outcome, TrainOutcome,
};

use sha2::{Digest, Sha256};

/// Independent RNG seed for the stream `name` of a run seeded with `seed`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
