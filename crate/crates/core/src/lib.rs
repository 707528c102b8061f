pub mod decode;
pub mod draft;
pub mod error;
pub mod flops;
pub mod harness;
pub mod layers;
pub mod numerics;
pub mod snapshot;
pub mod target;
pub mod training;

pub use error::{Error, Result};

/// Stream ids for [`numerics::SeededRng::with_stream`]. Every random draw in
/// a run comes from one root seed split along these streams.
pub mod streams {
    pub const TARGET_INIT: u64 = 1;
    pub const DRAFT_INIT: u64 = 2;
    pub const TRAIN_PROMPTS: u64 = 3;
    pub const EVAL_PROMPTS: u64 = 4;
    pub const TRACES: u64 = 5;
    pub const TRAINING: u64 = 6;
    pub const DECODE: u64 = 7;
}
