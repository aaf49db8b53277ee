pub mod checkpoint;
pub mod data;
pub mod error;
pub mod framed;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod resample;
pub mod scoring;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use metrics::EvalReport;
pub use model::DinomalyModel;
pub use tensor::{GridShape, Module, Real, TokenGrid};
pub use trainer::TrainConfig;
