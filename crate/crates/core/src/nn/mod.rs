pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod stack;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layer::{backward, forward, softmax, ForwardCache, LayerGrads, LayerParams, LayerSpec};
pub use loss::{cross_entropy, CrossEntropy};
