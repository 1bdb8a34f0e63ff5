pub mod backbone;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod heatmap;
pub mod io;
pub mod normality;
pub mod pipeline;
pub mod regulation;
pub mod rng;
pub mod shape_model;
pub mod synth;

pub use error::{Error, Result};
