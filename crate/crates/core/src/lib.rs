//! Visual localization against a trained radiance field: render intermediate
//! features, match them to a query image, and solve for the camera pose.

pub mod coarse;
pub mod error;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod matcher;
pub mod nn;
pub mod partition;
pub mod pnp;
pub mod renderer;
pub mod selection;
pub mod synthscene;

pub use error::{Error, Result};
