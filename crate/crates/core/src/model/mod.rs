//! Parameter registry, general-interest head, fusion, scoring and the full
//! per-user forward pass with ablation switches.

pub mod config;
pub mod forward;
pub mod params;

pub use config::{Ablation, ModelConfig};
pub use forward::{
    fuse, general_interest, general_interest_cuts, item_logits, prepare_input, score_items, Encoded, GraphOut, Model,
    UserInput,
};
pub use params::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, parameter_count, save_checkpoint, Checkpoint, GeneralParams,
    GeneralVars, ModelParams, ModelVars,
};
