//! Frequency-guided injection network for synthetic-image detection.

pub mod backbone;
pub mod bmfe;
pub mod data;
pub mod head;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use model::{FgiNet, ModelConfig, Variant};
pub use rng::{Purpose, Rng};
pub use tensor::{Precision, Tape, Tensor, TensorError, Var};
