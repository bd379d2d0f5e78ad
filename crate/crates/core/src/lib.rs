//! Multi-modal fear-level recognition pipeline.
//!
//! Skeleton keypoints, audio and physiology are aligned onto a video frame
//! clock, reduced to a 61-dimensional per-frame feature vector, labelled by
//! fusing several annotators, and classified in 16-frame windows by a
//! bidirectional LSTM with attention.

pub mod align;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ingest;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod net;
pub mod pipeline;
pub mod skeleton;
pub mod synth;
