pub mod autograd;
pub mod colorops;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
