//! Problem domain types and the efficiency/fairness metrics shared by every
//! policy.
//!
//! Classes are indexed from 0 internally. Everything that crosses a file or
//! CLI boundary uses 1-based class indices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};

/// Absolute tolerance used for real-valued comparisons.
pub const TOL: f64 = 1e-9;

/// Maximum number of classes supported by [`LabelSet`].
pub const MAX_CLASSES: usize = 64;

/// Set of class indices an agent belongs to, stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LabelSet(u64);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn single(class: usize) -> Self {
        assert!(class < MAX_CLASSES);
        LabelSet(1 << class)
    }

    /// Builds a set from 0-based class indices.
    pub fn from_classes<I: IntoIterator<Item = usize>>(classes: I) -> Self {
        let mut bits = 0u64;
        for c in classes {
            assert!(c < MAX_CLASSES, "class index {c} out of range");
            bits |= 1 << c;
        }
        LabelSet(bits)
    }

    /// All classes `0..k`.
    pub fn all(k: usize) -> Self {
        Self::from_classes(0..k)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn from_bits(bits: u64) -> Self {
        LabelSet(bits)
    }

    pub fn contains(self, class: usize) -> bool {
        class < MAX_CLASSES && self.0 & (1 << class) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Smallest class index in the set.
    pub fn min_class(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    /// Largest class index in the set.
    pub fn max_class(self) -> Option<usize> {
        (self.0 != 0).then(|| 63 - self.0.leading_zeros() as usize)
    }

    /// Iterates the classes in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let c = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(c)
        })
    }

    pub fn intersects(self, other: LabelSet) -> bool {
        self.0 & other.0 != 0
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based, matching the external representation.
        f.debug_set().entries(self.iter().map(|c| c + 1)).finish()
    }
}

/// Known-in-advance problem parameters: budget, class count and fluctuation
/// ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub budget: usize,
    pub num_classes: usize,
    pub theta: Vec<f64>,
}

impl ProblemParams {
    pub fn new(budget: usize, theta: Vec<f64>) -> Result<Self> {
        let params = ProblemParams {
            budget,
            num_classes: theta.len(),
            theta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(OmcsError::InvalidParams("budget must be at least 1".into()));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(OmcsError::InvalidParams(format!(
                "number of classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.theta.len() != self.num_classes {
            return Err(OmcsError::InvalidParams(format!(
                "expected {} fluctuation ratios, got {}",
                self.num_classes,
                self.theta.len()
            )));
        }
        for (j, &t) in self.theta.iter().enumerate() {
            if !t.is_finite() || t < 1.0 {
                return Err(OmcsError::InvalidParams(format!(
                    "theta[{}] = {t} must be a finite real >= 1",
                    j + 1
                )));
            }
        }
        if self.theta.windows(2).any(|w| w[1] < w[0]) {
            return Err(OmcsError::InvalidParams(
                "theta must be nondecreasing in the class index".into(),
            ));
        }
        Ok(())
    }

    pub fn theta_max(&self) -> f64 {
        self.theta[self.num_classes - 1]
    }

    /// Upper bound on the valuation of an agent with the given labels.
    pub fn value_cap(&self, labels: LabelSet) -> f64 {
        labels
            .min_class()
            .map(|c| self.theta[c])
            .unwrap_or(f64::NAN)
    }
}

/// Group-fairness-by-quantity requirement: class `j` must receive at least
/// `quotas[j]` units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GfqSpec {
    pub quotas: Vec<usize>,
}

impl GfqSpec {
    pub fn new(quotas: Vec<usize>) -> Self {
        GfqSpec { quotas }
    }

    pub fn zeros(k: usize) -> Self {
        GfqSpec { quotas: vec![0; k] }
    }

    /// Total reserved quantity `M`.
    pub fn total(&self) -> usize {
        self.quotas.iter().sum()
    }

    pub fn validate(&self, params: &ProblemParams) -> Result<()> {
        if self.quotas.len() != params.num_classes {
            return Err(OmcsError::InvalidParams(format!(
                "expected {} quotas, got {}",
                params.num_classes,
                self.quotas.len()
            )));
        }
        if self.total() > params.budget {
            return Err(OmcsError::QuotaExceedsBudget {
                total: self.total() as u64,
                budget: params.budget as u64,
            });
        }
        Ok(())
    }
}

/// One arrival: a valuation and the classes the agent belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agent {
    pub value: f64,
    pub labels: LabelSet,
}

impl Agent {
    pub fn new(value: f64, labels: LabelSet) -> Self {
        Agent { value, labels }
    }

    pub fn validate(&self, params: &ProblemParams) -> std::result::Result<(), String> {
        if self.labels.is_empty() {
            return Err("label set is empty".into());
        }
        if let Some(max) = self.labels.max_class() {
            if max >= params.num_classes {
                return Err(format!(
                    "unknown class index {} (K = {})",
                    max + 1,
                    params.num_classes
                ));
            }
        }
        let cap = params.value_cap(self.labels);
        if !self.value.is_finite() || self.value < 1.0 - TOL || self.value > cap + TOL {
            return Err(format!(
                "value {} outside [1, {cap}] for labels {:?}",
                self.value, self.labels
            ));
        }
        Ok(())
    }
}

/// An ordered arrival sequence together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub params: ProblemParams,
    pub agents: Vec<Agent>,
}

impl Instance {
    /// Validates every agent against `params`.
    pub fn new(params: ProblemParams, agents: Vec<Agent>) -> Result<Self> {
        params.validate()?;
        for (index, a) in agents.iter().enumerate() {
            a.validate(&params)
                .map_err(|reason| OmcsError::InvalidAgent { index, reason })?;
        }
        Ok(Instance { params, agents })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.params.budget
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    /// The first `len` arrivals as a standalone instance.
    pub fn prefix(&self, len: usize) -> Instance {
        Instance {
            params: self.params.clone(),
            agents: self.agents[..len.min(self.agents.len())].to_vec(),
        }
    }
}

/// Per-agent decisions aligned with an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub decisions: Vec<f64>,
    pub integral: bool,
}

impl Allocation {
    pub fn fractional(decisions: Vec<f64>) -> Self {
        Allocation {
            decisions,
            integral: false,
        }
    }

    pub fn integral<I: IntoIterator<Item = bool>>(accepts: I) -> Self {
        Allocation {
            decisions: accepts
                .into_iter()
                .map(|a| if a { 1.0 } else { 0.0 })
                .collect(),
            integral: true,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Allocation {
            decisions: vec![0.0; len],
            integral: true,
        }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.decisions.iter().sum()
    }

    /// Checks the box, integrality and budget constraints.
    pub fn validate(&self, budget: usize) -> Result<()> {
        for (t, &x) in self.decisions.iter().enumerate() {
            if !(-TOL..=1.0 + TOL).contains(&x) {
                return Err(OmcsError::InfeasibleAllocation(format!(
                    "decision {t} = {x} outside [0, 1]"
                )));
            }
            if self.integral && x != 0.0 && x != 1.0 {
                return Err(OmcsError::InfeasibleAllocation(format!(
                    "decision {t} = {x} is not integral"
                )));
            }
        }
        let total = self.total();
        let slack = if self.integral { 0.0 } else { TOL };
        if total > budget as f64 + slack {
            return Err(OmcsError::InfeasibleAllocation(format!(
                "total allocation {total} exceeds budget {budget}"
            )));
        }
        Ok(())
    }

    fn check_aligned(&self, instance: &Instance) -> Result<()> {
        if self.decisions.len() != instance.agents.len() {
            return Err(OmcsError::Alignment {
                expected: instance.agents.len(),
                got: self.decisions.len(),
            });
        }
        Ok(())
    }
}

/// Total utility `Σ v_t x_t`.
pub fn total_value(instance: &Instance, alloc: &Allocation) -> Result<f64> {
    alloc.check_aligned(instance)?;
    Ok(instance
        .agents
        .iter()
        .zip(&alloc.decisions)
        .map(|(a, &x)| a.value * x)
        .sum())
}

/// Per-class utility `U_j = Σ_t v_t x_t 1{j ∈ labels_t}`.
pub fn class_utilities(instance: &Instance, alloc: &Allocation) -> Result<Vec<f64>> {
    alloc.check_aligned(instance)?;
    let mut u = vec![0.0; instance.num_classes()];
    for (a, &x) in instance.agents.iter().zip(&alloc.decisions) {
        if x == 0.0 {
            continue;
        }
        for j in a.labels.iter() {
            u[j] += a.value * x;
        }
    }
    Ok(u)
}

/// Per-class allocated quantity `Σ_t x_t 1{j ∈ labels_t}`.
pub fn class_counts(instance: &Instance, alloc: &Allocation) -> Result<Vec<f64>> {
    alloc.check_aligned(instance)?;
    let mut n = vec![0.0; instance.num_classes()];
    for (a, &x) in instance.agents.iter().zip(&alloc.decisions) {
        for j in a.labels.iter() {
            n[j] += x;
        }
    }
    Ok(n)
}

/// Whether every class receives at least its quota.
pub fn gfq_satisfied(instance: &Instance, alloc: &Allocation, spec: &GfqSpec) -> Result<bool> {
    let counts = class_counts(instance, alloc)?;
    Ok(counts
        .iter()
        .zip(&spec.quotas)
        .all(|(&n, &m)| n + TOL >= m as f64))
}

/// Empirical proportional-fairness ratio of `alloc`: the largest value of
/// `(1/K) Σ_j U_j(w) / U_j(alloc)` over fractional allocations `w` within
/// the budget. Returns `+∞` when some class with eligible agents receives
/// nothing.
pub fn empirical_pf(instance: &Instance, alloc: &Allocation) -> Result<f64> {
    let u = class_utilities(instance, alloc)?;
    Ok(empirical_pf_from_utilities(instance, &u))
}

/// [`empirical_pf`] evaluated against given per-class utilities, e.g. Monte
/// Carlo means of a randomized policy.
pub fn empirical_pf_from_utilities(instance: &Instance, utilities: &[f64]) -> f64 {
    let k = instance.num_classes() as f64;
    let mut coeffs: Vec<f64> = instance
        .agents
        .iter()
        .map(|a| {
            a.labels
                .iter()
                .map(|j| {
                    if utilities[j] > 0.0 {
                        a.value / utilities[j]
                    } else {
                        f64::INFINITY
                    }
                })
                .sum()
        })
        .collect();
    coeffs.sort_by(|a, b| b.total_cmp(a));
    let best: f64 = coeffs.iter().take(instance.budget()).sum();
    best / k
}
