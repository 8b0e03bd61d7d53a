pub mod data;
pub mod error;
pub mod inversion;
pub mod losses;
pub mod model;
pub mod ood;
pub mod optim;
pub mod pca;
pub mod recon;
pub mod run;
pub mod seed;
pub mod ssim;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
