pub mod autodiff;
pub mod backbone;
pub mod client;
pub mod error;
pub mod metrics;
pub mod peft;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod video;
