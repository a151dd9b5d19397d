pub mod config;
pub mod ddpg;
pub mod error;
pub mod es;
pub mod experiments;
pub mod hybrid;
pub mod kv;
pub mod nnet;
pub mod reward;
pub mod runlog;
pub mod runner;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/envelope.md")]
    mod envelope {}
    #[doc = include_str!("../../../book/src/extremum-seeking.md")]
    mod extremum_seeking {}
    #[doc = include_str!("../../../book/src/ddpg.md")]
    mod ddpg {}
    #[doc = include_str!("../../../book/src/hybrid.md")]
    mod hybrid {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
