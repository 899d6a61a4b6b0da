//! Loss, optimizer, schedule, metrics and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use loss::cross_entropy_loss;
pub use metrics::{mean_iou, pixel_accuracy, IouCounts};
pub use optim::{poly_lr, sgd_step, SgdConfig};
pub use trainer::*;
