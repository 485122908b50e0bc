pub mod basis;
pub mod data;
pub mod datamodel;
pub mod error;
pub mod hierarchy;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod params;
pub mod process;
pub mod smoothing;
pub mod spec;

pub use error::{Result, TmmpError};
