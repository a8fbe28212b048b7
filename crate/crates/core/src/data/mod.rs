//! Sequences, preprocessing, label masking and the synthetic switching-dynamics
//! generator with its exact filter.

mod mask;
mod preprocess;
mod sequence;
mod synth;

pub use mask::{mask_labels, MaskLevel, MaskMode};
pub use preprocess::{integrate_residuals, preprocess, PreprocessOptions, RootCentering};
pub use sequence::{EntityTrack, Sequence};
pub use synth::{oracle_filter, synth_generate, ModeDynamics, OracleRecord, SynthSpec};
