pub mod astrm;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod spotting;

pub use error::{Error, Result};
