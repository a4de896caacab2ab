pub mod authmetrics;
pub mod baseline;
pub mod error;
pub mod iqdata;
pub mod radiosim;
pub mod reveal;

pub use error::{Error, Result};
