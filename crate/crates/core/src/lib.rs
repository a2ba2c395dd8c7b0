pub mod error;
pub mod glle;
pub mod io;
pub mod local_adapt;
pub mod reparam;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
