pub mod cohort;
pub mod deformation;
pub mod error;
pub mod estimation;
pub mod io;
pub mod kernel;
pub mod mesh;
pub mod pipeline;
pub(crate) mod serde_vec3;
pub mod timewarp;
pub mod transport;

pub use error::{Error, Result};
pub use kernel::{KernelConfig, Vec3};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/kernels.md")]
    struct Kernels;
    #[doc = include_str!("../../../book/src/shapes.md")]
    struct Shapes;
    #[doc = include_str!("../../../book/src/shooting.md")]
    struct Shooting;
    #[doc = include_str!("../../../book/src/estimation.md")]
    struct Estimation;
    #[doc = include_str!("../../../book/src/transport.md")]
    struct Transport;
    #[doc = include_str!("../../../book/src/timewarps.md")]
    struct Timewarps;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
}
