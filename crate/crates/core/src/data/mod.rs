//! Event-sequence data: file format, synthetic generation, protocol splits and batching.

mod batch;
mod protocol;
mod sequence;
mod synthetic;

pub use batch::{batch_iter, ordered_batches, Batch, FeatureScaler};
pub use protocol::{make_protocol_splits, ProtocolSplit, SplitManifest, SplitView, DEFAULT_BUDGETS};
pub use sequence::{load_retweet_format, MarkedSequence, SequencePool};
pub use synthetic::{generate_synthetic, simulate_hawkes, GeneratorConfig};
