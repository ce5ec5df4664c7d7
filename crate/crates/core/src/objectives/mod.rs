//! Occupancy losses, evaluation metrics and the optimizer.

mod losses;
mod metrics;
mod optim;

pub use losses::{
    cross_entropy, cross_entropy_var, lovasz_grad, lovasz_softmax, lovasz_softmax_var, occupancy_loss,
};
pub use metrics::{iou, miou, MetricsReport, MiouMode};
pub use optim::{lr_at, AdamW, OptimConfig};
