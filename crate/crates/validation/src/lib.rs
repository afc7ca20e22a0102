//! Holds the acceptance suite in `tests/acceptance.rs`; no library code.
//!
//! Run it with `cargo test -p indirect-moments-validation --test acceptance`.
