//! Multitask detection, segmentation and bottom-up pose estimation on a
//! shared convolutional backbone, with a small CPU autodiff engine,
//! post-processing, losses, synthetic data, training and evaluation.

pub mod backbone;
pub mod bench;
pub mod detect;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pose;
pub mod postprocess;
pub mod seg;
pub mod spec;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{MdspError, Result};
pub use model::{param_count, Mdsp, NetworkOutput};
pub use spec::{NetworkSpec, Task, TaskSet};
pub use tensor::{Element, Tensor};
