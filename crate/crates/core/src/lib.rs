//! Joint span detection and unanswerable-question classification for
//! extractive reading comprehension.

// Span search indexes two distributions by the same position.
#![allow(clippy::needless_range_loop)]

pub mod answer;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fuzzing;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod tensor;
pub mod train;
