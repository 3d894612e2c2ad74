//! Joint activity, delay and channel estimation for asynchronous grant-free
//! access with approximate message passing and its learned (unfolded)
//! variants.

pub mod amp;
pub mod detect;
pub mod experiment;
pub mod error;
pub mod grad;
pub mod network;
pub mod omp;
pub mod persist;
pub mod rng;
pub mod shrinkage;
pub mod signal_model;
pub mod train;
pub mod unfold;

pub use error::{Error, ErrorCategory, Result};
pub use signal_model::{Field, SystemConfig};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signal-model.md")]
    mod signal_model {}
    #[doc = include_str!("../../../book/src/denoisers.md")]
    mod denoisers {}
    #[doc = include_str!("../../../book/src/amp.md")]
    mod amp {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
