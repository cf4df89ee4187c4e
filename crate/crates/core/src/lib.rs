pub mod checkpoint;
pub mod dataset;
pub mod dct;
pub mod distort;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod inn;
pub mod loss;
pub mod msgcodec;
pub mod optim;
pub mod params;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use inn::{Architecture, CouplingStack, Init};
pub use params::{ParamId, ParamStore};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Real, Tensor};
