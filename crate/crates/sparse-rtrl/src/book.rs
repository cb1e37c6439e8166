//! The guide's chapters, attached as doc comments so that every code block
//! in the book compiles and runs under `cargo test --doc`. mdBook renders
//! the same files from `book/`; this module is what keeps the two from
//! drifting apart. One module per chapter, so a failing snippet names the
//! chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/influence-recursion.md")]
pub mod influence_recursion {}

#[doc = include_str!("../../../book/src/event-sparsity.md")]
pub mod event_sparsity {}

#[doc = include_str!("../../../book/src/parameter-sparsity.md")]
pub mod parameter_sparsity {}

#[doc = include_str!("../../../book/src/counting-the-work.md")]
pub mod counting_the_work {}

#[doc = include_str!("../../../book/src/spiral-benchmark.md")]
pub mod spiral_benchmark {}
