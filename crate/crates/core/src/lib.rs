//! Dialogue-remix core: STFT framing, mask-based speech/background
//! remixing, the LSTM mask estimator and its trainer, VAD, an NMF baseline,
//! rating statistics and the listening-test domain model.

pub mod audio;
pub mod evalstats;
pub mod live;
pub mod lstm;
pub mod nmf;
pub mod separator;
pub mod session;
pub mod spectral;
pub mod stimulus;
pub mod trainer;
pub mod vad;

pub use audio::{AudioBuffer, AudioError, WavEncoding};
pub use evalstats::{AnalysisMode, Comparison, MedianIqr, RankSumResult, Scale, StatsError};
pub use live::{decode_block, encode_block, LiveRemixer};
pub use lstm::{LstmShape, LstmWeights};
pub use nmf::{NmfConfig, NmfError};
pub use separator::{
    ChannelEnhancer, ConstantMasker, LstmMasker, Mask, MaskEstimator, MaskTarget,
    PrecomputedMasker, RemixParams, SeparatorError,
};
pub use session::{Attribute, RatingSession, SessionError, SessionStore};
pub use spectral::{Spectrogram, StftConfig, StftPlan};
pub use stimulus::{BackgroundClass, Condition, ConditionSpec, StimulusSet};
pub use trainer::{TrainConfig, TrainError, TrainOutcome};
pub use vad::{LstmVad, VadLabels};
