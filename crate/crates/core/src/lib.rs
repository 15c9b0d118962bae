pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod seeds;
pub mod spt;
pub mod textproc;
pub mod training;

pub use error::{Result, SteerError};

/// `"parallel"` or `"sequential"`, depending on the build.
pub fn parallel_mode() -> &'static str {
    steer_nn::par::mode()
}
