mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

pub use activation::Relu;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use pool::{GlobalAvgPool, MaxPool2d};
