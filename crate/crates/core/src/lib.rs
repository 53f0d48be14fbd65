//! Intra-process memory domains with per-function least privilege.

pub mod bench;
pub mod domain;
pub mod minios;
pub mod monitor;
pub mod policy;
