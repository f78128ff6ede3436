//! Code-switching speech recognition from scratch: log filterbank
//! features, unified-character and reduced-phone targets, a CTC BLSTM
//! recognizer and a listen-attend-spell recognizer, with PER/CER scoring.

pub mod attention;
pub mod checkpoint;
pub mod ctc;
pub mod encoder;
pub mod features;
pub mod hypothesis;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod targets;

pub use pipeline::PipelineError as Error;
