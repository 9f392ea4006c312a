//! Forecasting stack: feature construction, baseline and learned models.

pub mod features;
pub mod mlp;
pub mod models;

pub use features::{
    build_design_matrix, Channel, DesignMatrix, DesignOptions, FeatureSpec, PatientTaus,
    WindowKey, CANONICAL_CHANNELS,
};
pub use models::{
    fit, fit_matched_pair, forecast, load_model, save_model, FitOptions, MatchedPair, MlpHyper,
    ModelFamily, TrainedModel,
};
