pub mod autodiff;
pub mod bounds;
pub mod clustering;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod patchmix;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
