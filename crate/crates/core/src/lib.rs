pub mod error;
pub mod evalcli;
pub mod featinit;
pub mod graphs;
pub mod hyperball;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod qosdata;
pub mod rng;
pub mod sharpnet;
pub mod tape;
pub mod trainloop;

pub use error::{Error, Result};
pub use linalg::{Csr, Mat};
