pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod network;
pub mod noise_metrics;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
