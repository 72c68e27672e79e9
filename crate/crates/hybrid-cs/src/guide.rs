//! The narrative guide, compiled as doc-tests.
//!
//! Each chapter of `book/` is included here as module documentation, so
//! every fenced Rust listing in the book runs under `cargo test --doc` and
//! cannot drift from the library.

#[doc = include_str!("../../../book/src/smooth-steering.md")]
pub mod smooth_steering {}

#[doc = include_str!("../../../book/src/hybrid-events.md")]
pub mod hybrid_events {}

#[doc = include_str!("../../../book/src/analytic-route.md")]
pub mod analytic_route {}

#[doc = include_str!("../../../book/src/convex-route.md")]
pub mod convex_route {}

#[doc = include_str!("../../../book/src/monte-carlo.md")]
pub mod monte_carlo {}
