pub mod design;
pub mod elbo;
pub mod error;
pub mod identifiability;
pub mod linalg;
pub mod missingness;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod panel;
pub mod pln;
pub mod trend;
pub mod uncertainty;

pub use error::{Error, Result};
