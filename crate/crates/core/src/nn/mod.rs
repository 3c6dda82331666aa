//! Dense-tensor network core: layers, models, momentum SGD and schedules.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use layers::{NormKind, RunningStats};
pub use model::{ActivationCache, Arch, Model, ModelSpec, Mode};
pub use optim::{LrSchedule, OptState};
pub use params::{ParamLayout, ParamVector, Segment};
pub use tensor::Tensor;
