//! Helpers shared by several integration test targets.

pub mod fd;
