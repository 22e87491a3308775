pub mod coilmodel;
pub mod coords;
pub mod error;
pub mod hypertune;
pub mod image;
pub mod inference;
pub mod inr_model;
pub mod metrics;
pub mod mrop;
pub mod synthdata;
pub mod tensorgrad;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
pub use image::{ComplexImage, SensitivityMaps};
