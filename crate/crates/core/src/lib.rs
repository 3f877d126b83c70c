pub mod error;
pub mod context_stream;
pub mod decoder;
pub mod encoder;
pub mod enhancer;
pub mod evalkit;
pub mod numerics;
pub mod pipeline;
pub mod scenario;

pub use error::{Error, Result};

/// Book chapters compiled as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    pub mod scenarios {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/streams.md")]
    pub mod streams {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
