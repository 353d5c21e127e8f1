//! Detector deciding whether an input resembles a request's unlearn split.

pub mod detector;
pub mod encoder;
pub mod losses;
pub mod mixture;
pub mod stats;

pub use detector::{train_detector, DetectorConfig, FeatureDetector, OodModel, ScoreVector};
pub use encoder::{Encoder, EncoderCache, EncoderGrads};
pub use losses::{cel_loss, mlm_loss, ua_loss};
pub use mixture::Mixture;
pub use stats::{cosine, Hypersphere, LayerStats, SphereFit};
