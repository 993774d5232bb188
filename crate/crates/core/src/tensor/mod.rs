//! Tensors, reverse-mode autodiff, parameters and the SGD optimizer.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod value;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use optim::{Sgd, SgdConfig};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use value::{log_softmax_rows, softmax_rows, Tensor};
