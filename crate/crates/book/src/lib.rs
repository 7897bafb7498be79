//! Every chapter of the guide in `book/src` becomes a module here so that
//! `cargo test` runs its code listings as doc-tests. The crate has no API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/projector.md")]
pub mod projector {}
#[doc = include_str!("../../../book/src/penalties.md")]
pub mod penalties {}
#[doc = include_str!("../../../book/src/fppg.md")]
pub mod fppg {}
#[doc = include_str!("../../../book/src/osem.md")]
pub mod osem {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/kinetics.md")]
pub mod kinetics {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
