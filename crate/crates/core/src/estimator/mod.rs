//! Voice-to-AM estimator: network, objectives, aggregation and training.

mod aggregate;
mod checkpoint;
mod loss;
mod network;
mod predict;
mod train;

pub use aggregate::{aggregate, AggregatedPrediction};
pub use checkpoint::{Checkpoint, PhonatoryState};
pub use loss::{batch_mean, loss_plain, loss_uncertainty, loss_uncertainty_grad};
pub use network::{
    min_input_frames, EstimatorModel, ForwardCache, Prediction, CODE_DIM, LOG_VAR_CLAMP, N_MELS,
};
pub use predict::{mean_normalized_error, predict_recording, predict_spans, Labeled, VoiceRecording};
pub use train::{train, PhonatoryConfig, TrainConfig, TrainOutcome};
