pub mod mask;
pub mod cli;
pub mod data;
pub mod eval;
pub mod imprint;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use mask::Mask;
pub use tensor::Tensor;
