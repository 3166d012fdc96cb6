//! Online multi-class selection with group-fairness guarantees.
//!
//! Policies for allocating `B` identical units to a stream of agents, each
//! carrying a valuation and a set of class labels: deterministic and
//! randomized set-aside policies under per-class quotas, a proportional
//! fairness policy, lossless online rounding, and advice-mixing wrappers.

pub mod error;
pub mod frac_gfq;
pub mod dgfq;
pub mod instances;
pub mod io;
pub mod lambert;
pub mod lila;
pub mod model;
pub mod oracles;
pub mod pf;
pub mod policy;
pub mod rng;
pub mod rounding;
pub mod stats;

pub use error::{OmcsError, Result};
pub use model::{Agent, Allocation, GfqSpec, Instance, LabelSet, ProblemParams};
pub use policy::{Policy, RunOutput};
