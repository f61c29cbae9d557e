//! Doctest harness for the guide in `book/src`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/kernel.md")]
pub mod kernel {}
#[doc = include_str!("../../../book/src/sampler.md")]
pub mod sampler {}
#[doc = include_str!("../../../book/src/estimator.md")]
pub mod estimator {}
#[doc = include_str!("../../../book/src/spike.md")]
pub mod spike {}
#[doc = include_str!("../../../book/src/dimred.md")]
pub mod dimred {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
