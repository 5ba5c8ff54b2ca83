//! The editing model, its loss terms and checkpoint I/O.

mod audit;
mod config;
mod gmm;
mod io;
mod layers;
mod model;
mod objective;

pub use audit::{check_param_gradients, PARAM_STEP};
pub use config::{ModelConfig, Variant};
pub use gmm::{expand_targets, gmm_from_raw, log_likelihood, Decoding, GmmOutput, GmmValues, RHO_MAX};
pub use io::{card_path, ModelMeta, CHECKPOINT_KIND};
pub use model::{
    SketchMod, StrokeMask, ENCODER, GIMG, GSEQ, MIXER, OFFSET, PREDICTOR, REFINER, STAGE1_GROUPS, STAGE2_GROUPS,
};
pub use objective::{
    attribute_loss, batch_mask, mean_sq_distance, raw_with_corrupted_source, sequence_loss, SingleStageOutput,
    Stage1Output, Stage2Output, IMAGE_WEIGHT,
};
