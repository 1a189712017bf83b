//! Oracle checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod federation;
pub mod gradients;
pub mod kappa;
pub mod svd;
