use crate::error::Result;
use crate::model::Instance;
use crate::rng::StreamRng;

/// Decisions produced by one run of a policy over an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Final (integral or fractional) decision per agent.
    pub decisions: Vec<f64>,
    /// Acceptances suppressed to keep the run within budget.
    pub truncations: usize,
}

impl RunOutput {
    pub fn new(decisions: Vec<f64>) -> Self {
        RunOutput {
            decisions,
            truncations: 0,
        }
    }
}

/// An online allocation policy. A policy is configured for fixed problem
/// parameters and processes arrivals strictly in order; each run owns its
/// state and random stream.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    fn run(&self, instance: &Instance, rng: &mut StreamRng) -> Result<RunOutput>;

    /// True when `run` never consumes randomness.
    fn is_deterministic(&self) -> bool {
        false
    }
}
