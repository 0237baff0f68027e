pub mod attention;
pub mod checks;
pub mod cost;
pub mod error;
pub mod model;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use attention::{AttentionConfig, AttentionMask, Variant};
pub use error::{Error, Result};
pub use model::{BatchInput, EncoderConfig, Head, Labels, Model};
pub use params::ParamStore;
pub use tensor::{Tape, Tensor, Var};
