//! Constrained Bayesian optimization with knowledge transfer between
//! related problems.
//!
//! The pieces, bottom-up: exact GP regression ([`gp`]) over an ARD or a
//! learned neural kernel ([`kernel`], [`neuk`]); closed-form acquisitions
//! scaled by feasibility ([`acquisition`]); a multi-objective evolutionary
//! search over the acquisition triple ([`nsga2`]); an encoder/decoder model
//! that reuses a GP trained on another problem ([`transfer`]); and the loop
//! that splits each batch between the transfer and the target-only model by
//! counted improvements ([`engine`]).

pub mod acquisition;
pub mod benchmarks;
pub mod engine;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod neuk;
pub mod nsga2;
pub mod optim;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
