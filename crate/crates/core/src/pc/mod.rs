//! Pronunciation corrector: an encoder-decoder transformer from accented
//! frames to native unit sequences.

mod decode;
mod model;
mod pretrain;
mod train;

pub use decode::{beam_decode, decode_greedy, rescore, DecodeConfig, Hypothesis, PcScorer, StepScorer};
pub use model::{PcConfig, PcModel, Vocab};
pub use pretrain::{pretrain_decoder_lm, pretrain_encoder_masked};
pub use train::{train, write_log, LogRecord, TrainConfig, TrainOutcome};
