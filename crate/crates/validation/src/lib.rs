//! Acceptance suite for the rationale harness. The checks live in
//! `tests/acceptance.rs`; this crate has no library code.
