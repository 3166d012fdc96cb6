//! Optimal deterministic thresholds under quotas, and the deterministic
//! set-aside policy that uses them.
//!
//! With `C_j = B − max_{i<j} m_i` and `D_j = Σ_{i<j} [m_i − max_{l<i} m_l]^+ θ_i`,
//! the potential `Δ(λ) = C_j λ + D_j` (for `λ ∈ [θ_{j−1}, θ_j]`, `θ_0 = 1`)
//! is continuous and strictly increasing. The thresholds solve
//!
//! ```text
//! Δ^{s} = α (M + s),   s = τ+1 (or s = 0 when B/α < M)
//! Δ^{i+1} = Δ^i + α λ_i,   λ_i = Δ^{-1}(Δ^i),   λ_{B−M} = θ_K
//! ```
//!
//! where `τ` is the smallest integer with `τ + 1 ≥ B/α − M` and
//! `λ_0 = … = λ_τ = 1`. The terminal threshold increases with `α`, so `α`
//! is found by bisection.

use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};
use crate::model::{Allocation, GfqSpec, Instance, ProblemParams};
use crate::policy::{Policy, RunOutput};
use crate::rng::StreamRng;

const RESIDUAL_TOL: f64 = 1e-10;
const MAX_BISECTIONS: usize = 200;
/// Tolerance on the solved equation system.
pub const SYSTEM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GfqConstants {
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub theta: Vec<f64>,
}

impl GfqConstants {
    pub fn new(params: &ProblemParams, spec: &GfqSpec) -> Result<Self> {
        params.validate()?;
        spec.validate(params)?;
        let k = params.num_classes;
        let b = params.budget as f64;
        let mut c = Vec::with_capacity(k);
        let mut d = Vec::with_capacity(k);
        let mut run_max = 0usize;
        let mut acc = 0.0;
        for j in 0..k {
            c.push(b - run_max as f64);
            d.push(acc);
            let m = spec.quotas[j];
            if m > run_max {
                acc += (m - run_max) as f64 * params.theta[j];
                run_max = m;
            }
        }
        Ok(GfqConstants {
            c,
            d,
            theta: params.theta.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.c.len()
    }

    pub fn theta_max(&self) -> f64 {
        *self.theta.last().expect("K >= 1")
    }

    /// `C_K θ_K + D_K`: the potential at the top of the value range.
    pub fn top(&self) -> f64 {
        let k = self.num_classes() - 1;
        self.c[k] * self.theta[k] + self.d[k]
    }

    /// Bracket index `j` (0-based) with `λ ∈ [θ_{j−1}, θ_j]`, clamped to the
    /// outermost pieces outside `[1, θ_K]`.
    fn bracket(&self, lambda: f64) -> usize {
        self.theta
            .partition_point(|&t| t < lambda)
            .min(self.num_classes() - 1)
    }

    /// `Δ(λ)` for `λ ∈ [1, θ_K]`.
    pub fn delta(&self, lambda: f64) -> Result<f64> {
        if !(1.0 - 1e-12..=self.theta_max() + 1e-12).contains(&lambda) {
            return Err(OmcsError::Domain(format!(
                "delta: lambda {lambda} outside [1, {}]",
                self.theta_max()
            )));
        }
        let j = self.bracket(lambda);
        let v = self.c[j] * lambda + self.d[j];
        // Both adjacent pieces agree at a breakpoint.
        if j > 0 && (lambda - self.theta[j - 1]).abs() <= 1e-12 {
            let w = self.c[j - 1] * lambda + self.d[j - 1];
            debug_assert!((v - w).abs() <= 1e-9 * v.abs().max(1.0), "{v} vs {w}");
        }
        Ok(v)
    }

    /// `Δ` extended linearly beyond `[1, θ_K]`.
    fn delta_ext(&self, lambda: f64) -> f64 {
        let j = self.bracket(lambda);
        self.c[j] * lambda + self.d[j]
    }

    /// Inverse of the (extended) potential.
    pub fn delta_inv(&self, delta: f64) -> f64 {
        // Breakpoint potentials Δ(θ_j) are increasing in j.
        let k = self.num_classes();
        let mut j = 0;
        while j + 1 < k && delta > self.c[j] * self.theta[j] + self.d[j] {
            j += 1;
        }
        (delta - self.d[j]) / self.c[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdCase {
    /// `B/α ≥ M`: `τ + 1` thresholds pinned at 1.
    FlatStart,
    /// `B/α < M`: quotas alone guarantee the ratio at value 1.
    QuotaStart,
    /// `M = B`: every unit is reserved.
    AllReserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub alpha: f64,
    pub tau: Option<usize>,
    pub lambdas: Vec<f64>,
    pub case: ThresholdCase,
}

impl ThresholdTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("threshold table serializes")
    }

    /// Largest absolute error over the equation system.
    pub fn system_residual(&self, k: &GfqConstants, quota_total: usize) -> f64 {
        let m = quota_total as f64;
        let n = self.lambdas.len();
        if n == 0 {
            return 0.0;
        }
        let (start, seed) = match (self.case, self.tau) {
            (ThresholdCase::FlatStart, Some(tau)) => (tau + 1, m + (tau + 1) as f64),
            _ => (0, m),
        };
        let mut worst = 0.0f64;
        for &l in &self.lambdas[..start.min(n)] {
            worst = worst.max((l - 1.0).abs());
        }
        if start < n {
            let d = k.delta_ext(self.lambdas[start]);
            worst = worst.max((d - self.alpha * seed).abs());
            for i in start..n - 1 {
                let lhs = k.delta_ext(self.lambdas[i + 1]) - k.delta_ext(self.lambdas[i]);
                worst = worst.max((lhs - self.alpha * self.lambdas[i]).abs());
            }
        }
        worst.max((self.lambdas[n - 1] - k.theta_max()).abs())
    }
}

/// Terminal threshold `λ_{B−M}(α)`, plus `τ` and the full sequence.
fn forward(k: &GfqConstants, budget: usize, quota_total: usize, alpha: f64) -> (Option<usize>, Vec<f64>) {
    let b = budget as f64;
    let m = quota_total as f64;
    let free = budget - quota_total;
    let mut lambdas = Vec::with_capacity(free + 1);
    let (tau, mut delta) = if b / alpha >= m {
        let need = b / alpha - m;
        let tau = (0..free)
            .find(|&t| (t + 1) as f64 >= need - 1e-12)
            .unwrap_or(free - 1);
        lambdas.extend(std::iter::repeat_n(1.0, tau + 1));
        (Some(tau), alpha * (m + (tau + 1) as f64))
    } else {
        (None, alpha * m)
    };
    while lambdas.len() <= free {
        let l = k.delta_inv(delta);
        lambdas.push(l);
        delta += alpha * l;
    }
    (tau, lambdas)
}

/// Solves for the optimal deterministic thresholds and ratio.
pub fn solve_thresholds(params: &ProblemParams, spec: &GfqSpec) -> Result<ThresholdTable> {
    let k = GfqConstants::new(params, spec)?;
    let budget = params.budget;
    let quota_total = spec.total();
    if quota_total == budget {
        return Ok(ThresholdTable {
            alpha: k.top() / quota_total as f64,
            tau: None,
            lambdas: Vec::new(),
            case: ThresholdCase::AllReserved,
        });
    }
    let theta_k = k.theta_max();
    let residual = |a: f64| {
        let (_, l) = forward(&k, budget, quota_total, a);
        l[l.len() - 1] - theta_k
    };
    let (mut lo, mut hi) = (1.0, k.top().max(1.0));
    let (mut r_lo, r_hi) = (residual(lo), residual(hi));
    if r_lo > RESIDUAL_TOL || r_hi < -RESIDUAL_TOL {
        return Err(OmcsError::Solver(format!(
            "threshold residual does not change sign on [{lo}, {hi}]: {r_lo}, {r_hi}"
        )));
    }
    let mut r_hi = r_hi;
    let mut alpha = if r_lo.abs() <= RESIDUAL_TOL { lo } else { hi };
    let mut last = if r_lo.abs() <= RESIDUAL_TOL { r_lo } else { r_hi };
    let mut steps = 0;
    while last.abs() > RESIDUAL_TOL && steps < MAX_BISECTIONS {
        steps += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval exhausted at machine precision.
            break;
        }
        let r = residual(mid);
        if r < r_lo - 1e-9 || r > r_hi + 1e-9 {
            return Err(OmcsError::Solver(format!(
                "threshold residual not monotone near alpha = {mid}: {r_lo} / {r} / {r_hi}"
            )));
        }
        alpha = mid;
        last = r;
        if r < 0.0 {
            lo = mid;
            r_lo = r;
        } else {
            hi = mid;
            r_hi = r;
        }
    }
    if last.abs() > RESIDUAL_TOL {
        return Err(OmcsError::Solver(format!(
            "bisection did not converge after {steps} steps: alpha in [{lo}, {hi}], residual {last}"
        )));
    }
    let (mut tau, mut lambdas) = forward(&k, budget, quota_total, alpha);
    // Bisection may land just below the α at which τ drops by one; report
    // the smallest τ consistent with α to within rounding.
    if let Some(t) = tau.as_mut() {
        let need = budget as f64 / alpha - quota_total as f64;
        while *t > 0 && *t as f64 >= need - 1e-9 {
            *t -= 1;
        }
    }
    let last = lambdas.len() - 1;
    lambdas[last] = theta_k;
    let table = ThresholdTable {
        alpha,
        tau,
        case: if tau.is_some() {
            ThresholdCase::FlatStart
        } else {
            ThresholdCase::QuotaStart
        },
        lambdas,
    };
    let err = table.system_residual(&k, quota_total);
    if err > SYSTEM_TOL {
        return Err(OmcsError::Solver(format!(
            "solved thresholds violate the system by {err}"
        )));
    }
    Ok(table)
}

/// Deterministic set-aside policy: fill quotas unconditionally, then accept
/// against the solved thresholds.
#[derive(Debug, Clone)]
pub struct DSetAside {
    pub params: ProblemParams,
    pub spec: GfqSpec,
    pub table: ThresholdTable,
}

impl DSetAside {
    pub fn new(params: ProblemParams, spec: GfqSpec) -> Result<Self> {
        let table = solve_thresholds(&params, &spec)?;
        Ok(DSetAside {
            params,
            spec,
            table,
        })
    }

    pub fn decide(&self, instance: &Instance) -> Allocation {
        run_d_setaside(&self.params, &self.spec, &self.table, instance)
    }
}

/// Runs the deterministic set-aside policy over an instance.
pub fn run_d_setaside(
    params: &ProblemParams,
    spec: &GfqSpec,
    table: &ThresholdTable,
    instance: &Instance,
) -> Allocation {
    let free = params.budget - spec.total();
    let mut served = vec![0usize; params.num_classes];
    let mut kappa = 1usize;
    let decisions = instance.agents.iter().map(|a| {
        if a.labels.iter().any(|j| served[j] < spec.quotas[j]) {
            for j in a.labels.iter() {
                served[j] += 1;
            }
            true
        } else if kappa <= free && a.value >= table.lambdas[kappa - 1] {
            kappa += 1;
            for j in a.labels.iter() {
                served[j] += 1;
            }
            true
        } else {
            false
        }
    });
    Allocation::integral(decisions.collect::<Vec<_>>())
}

impl Policy for DSetAside {
    fn name(&self) -> String {
        "d-gfq".into()
    }

    fn run(&self, instance: &Instance, _rng: &mut StreamRng) -> Result<RunOutput> {
        Ok(RunOutput::new(self.decide(instance).decisions))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
