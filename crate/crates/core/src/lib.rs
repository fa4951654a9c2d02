//! Object placement by detecting suitable regions in a scene and associating
//! them with object patches.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod matcher;
pub mod model;
pub mod raster;
pub mod train;
