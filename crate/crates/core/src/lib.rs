pub mod accountant;
pub mod data;
pub mod dpem_mog;
pub mod error;
pub mod experiment;
pub mod fa;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod mechanisms;
pub mod mog;
pub mod noise;
pub mod par;
pub mod sensitivity;

pub use error::{Error, Result};
