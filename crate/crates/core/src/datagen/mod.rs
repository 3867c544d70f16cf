//! Synthetic NASCAR data and CSV ingestion for external series.

mod csvio;
mod nascar;

pub use csvio::{load_series_csv, read_series_csv, save_series_csv, write_series_csv, CsvSchema, Standardizer};
pub use nascar::{
    generate_nascar, generate_trials, nascar_dynamics, nascar_emission, nascar_params, region_logits, rotation,
    NascarConfig, NascarTrial, NascarVariant, NASCAR_D, NASCAR_K, REGION_BIAS, REGION_WEIGHTS, START, TURN_ANGLE,
    TURN_CENTRES,
};
