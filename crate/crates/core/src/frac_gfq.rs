//! Fractional quota-constrained selection with a single piecewise
//! exponential threshold, and its randomized integral counterpart.
//!
//! `M` units are set aside for the quotas; the other `B − M` are priced by
//! `φ(u)`, where `u` is the fractional utilization of the unreserved part.
//! When `M ≤ B/α₀` (with `α₀ = 1 + ln θ_K − Σ_{j<K} (C_j − C_{j+1})/B · ln(θ_K/θ_j)`)
//! the threshold starts with a flat piece at 1; otherwise it starts at a
//! value `v* > 1` and the ratio comes from a Lambert-W closed form. Each
//! piece satisfies `ln φ(u) = a + b u`.

use serde::{Deserialize, Serialize};

use crate::dgfq::GfqConstants;
use crate::error::{OmcsError, Result};
use crate::lambert::lambert_w;
use crate::model::{Agent, GfqSpec, Instance, ProblemParams};
use crate::policy::{Policy, RunOutput};
use crate::rng::StreamRng;
use crate::rounding::RounderState;

const CONTINUITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FracRegime {
    /// `M ≤ B/α₀`: flat start at 1.
    LowQuota,
    /// `M > B/α₀`: the threshold starts at `v*` inside class bracket `j*`
    /// (1-based in serialized form).
    HighQuota { j_star: usize },
    /// `M = B`: nothing left to price.
    AllReserved,
}

/// One piece of the threshold: `φ(u) = exp(a + b u)` on `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub a: f64,
    pub b: f64,
}

impl Piece {
    fn eval(&self, u: f64) -> f64 {
        (self.a + self.b * u).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FracThreshold {
    pub regime: FracRegime,
    pub alpha: f64,
    /// Piece boundaries, starting at 0 and ending at `B − M`.
    pub breakpoints: Vec<f64>,
    pub v_star: Option<f64>,
    pub pieces: Vec<Piece>,
    pub capacity: f64,
    pub theta_max: f64,
}

/// `α₀` for the flat-start regime.
pub fn alpha_low(k: &GfqConstants, budget: usize) -> f64 {
    let b = budget as f64;
    let kk = k.num_classes();
    let tk = k.theta_max();
    let mut alpha = 1.0 + tk.ln();
    for j in 0..kk - 1 {
        alpha -= (k.c[j] - k.c[j + 1]) / b * (tk / k.theta[j]).ln();
    }
    alpha
}

/// `(α_{j}, v*)` for bracket `j` (0-based) in the high-quota regime.
pub fn alpha_high(k: &GfqConstants, budget: usize, quota_total: usize, j: usize) -> Result<(f64, f64)> {
    let b = budget as f64;
    let m = quota_total as f64;
    let kk = k.num_classes();
    let tk = k.theta_max();
    let (c, d) = (k.c[j], k.d[j]);
    let x: f64 = (j..kk - 1)
        .map(|i| (k.c[i] - k.c[i + 1]) * (tk / k.theta[i]).ln())
        .sum();
    let arg = tk * (b - m) / m * (-x / c - d * (b - m) / (c * m)).exp();
    let alpha = d / m + c / (b - m) * lambert_w(arg)?;
    Ok((alpha, (alpha * m - d) / c))
}

impl FracThreshold {
    pub fn build(params: &ProblemParams, spec: &GfqSpec) -> Result<Self> {
        let k = GfqConstants::new(params, spec)?;
        let budget = params.budget;
        let quota_total = spec.total();
        let b = budget as f64;
        let m = quota_total as f64;
        let kk = k.num_classes();
        let tk = k.theta_max();
        if quota_total == budget {
            return Ok(FracThreshold {
                regime: FracRegime::AllReserved,
                alpha: k.top() / m,
                breakpoints: vec![0.0],
                v_star: None,
                pieces: Vec::new(),
                capacity: 0.0,
                theta_max: tk,
            });
        }
        let cap = b - m;
        let alpha0 = alpha_low(&k, budget);
        let high = Self::find_j_star(&k, budget, quota_total)?;
        let low = m <= b / alpha0;
        if low && high.is_some() {
            return Err(OmcsError::Invariant(format!(
                "both threshold regimes apply (M = {m}, B/alpha0 = {})",
                b / alpha0
            )));
        }
        let mut pieces = Vec::with_capacity(kk + 1);
        let (regime, alpha, v_star) = if low {
            let g0 = b / alpha0 - m;
            pieces.push(Piece {
                start: 0.0,
                end: g0,
                a: 0.0,
                b: 0.0,
            });
            let mut s = 0.0;
            let mut start = g0;
            for j in 0..kk {
                let end = g0 + (k.c[j] * k.theta[j].ln() + s) / alpha0;
                pieces.push(Piece {
                    start,
                    end,
                    a: (alpha0 * m - b - s) / k.c[j],
                    b: alpha0 / k.c[j],
                });
                s += if j + 1 < kk {
                    (k.c[j] - k.c[j + 1]) * k.theta[j].ln()
                } else {
                    0.0
                };
                start = end;
            }
            (FracRegime::LowQuota, alpha0, None)
        } else {
            let (j_star, alpha, v) = high.ok_or_else(|| {
                OmcsError::Solver(format!(
                    "no class bracket contains v* for M = {m} (B/alpha0 = {})",
                    b / alpha0
                ))
            })?;
            let mut s = 0.0;
            let mut start = 0.0;
            for j in j_star..kk {
                let end = (k.c[j] * (k.theta[j] / v).ln() + s) / alpha;
                pieces.push(Piece {
                    start,
                    end,
                    a: v.ln() - s / k.c[j],
                    b: alpha / k.c[j],
                });
                if j + 1 < kk {
                    s += (k.c[j] - k.c[j + 1]) * (k.theta[j] / v).ln();
                }
                start = end;
            }
            (FracRegime::HighQuota { j_star: j_star + 1 }, alpha, Some(v))
        };

        // The last piece must end at B − M with value θ_K.
        let last = pieces.last_mut().expect("at least one piece");
        if (last.end - cap).abs() > CONTINUITY_TOL * cap.max(1.0) {
            return Err(OmcsError::Invariant(format!(
                "threshold domain ends at {} instead of {cap}",
                last.end
            )));
        }
        last.end = cap;
        for w in pieces.windows(2) {
            let (l, r) = (w[0].eval(w[0].end), w[1].eval(w[1].start));
            if (l - r).abs() > CONTINUITY_TOL * tk.max(1.0) {
                return Err(OmcsError::Invariant(format!(
                    "threshold discontinuous at u = {}: {l} vs {r}",
                    w[0].end
                )));
            }
        }
        let end_value = pieces.last().unwrap().eval(cap);
        if (end_value - tk).abs() > CONTINUITY_TOL * tk {
            return Err(OmcsError::Invariant(format!(
                "threshold reaches {end_value} instead of theta_K = {tk}"
            )));
        }
        let mut breakpoints = vec![0.0];
        breakpoints.extend(pieces.iter().map(|p| p.end));
        Ok(FracThreshold {
            regime,
            alpha,
            breakpoints,
            v_star,
            pieces,
            capacity: cap,
            theta_max: tk,
        })
    }

    fn find_j_star(k: &GfqConstants, budget: usize, quota_total: usize) -> Result<Option<(usize, f64, f64)>> {
        if quota_total == 0 {
            return Ok(None);
        }
        for widen in [0.0, 1e-9] {
            for j in 0..k.num_classes() {
                let (alpha, v) = alpha_high(k, budget, quota_total, j)?;
                let lo = if j == 0 { 1.0 } else { k.theta[j - 1] };
                let hi = k.theta[j];
                if v > lo * (1.0 - widen) && v <= hi * (1.0 + widen) {
                    return Ok(Some((j, alpha, v.min(hi))));
                }
            }
        }
        Ok(None)
    }

    /// `φ(u)` for `u ∈ [0, B − M]` (clamped outside).
    pub fn eval(&self, u: f64) -> f64 {
        if self.pieces.is_empty() {
            return self.theta_max;
        }
        let u = u.clamp(0.0, self.capacity);
        let i = self
            .pieces
            .iter()
            .position(|p| u <= p.end)
            .unwrap_or(self.pieces.len() - 1);
        self.pieces[i].eval(u)
    }

    /// `sup { u ∈ [0, B − M] : φ(u) ≤ v }`, or 0 when `v < φ(0)`.
    pub fn inverse(&self, v: f64) -> f64 {
        for p in self.pieces.iter().rev() {
            if p.eval(p.start) <= v * (1.0 + 1e-12) {
                if p.b == 0.0 {
                    return p.end;
                }
                return ((v.ln() - p.a) / p.b).clamp(p.start, p.end);
            }
        }
        0.0
    }

    /// `∫_{u0}^{u1} φ(η) dη`.
    pub fn integral(&self, u0: f64, u1: f64) -> f64 {
        let mut total = 0.0;
        for p in &self.pieces {
            let lo = u0.max(p.start);
            let hi = u1.min(p.end);
            if hi <= lo {
                continue;
            }
            total += if p.b == 0.0 {
                p.a.exp() * (hi - lo)
            } else {
                (p.eval(hi) - p.eval(lo)) / p.b
            };
        }
        total
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("threshold serializes")
    }
}

/// Quota part and priced part of one fractional decision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FracStep {
    pub quota: f64,
    pub priced: f64,
}

impl FracStep {
    pub fn total(&self) -> f64 {
        self.quota + self.priced
    }
}

/// Streaming state of the fractional policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FracGfqState {
    progress: Vec<f64>,
    utilization: f64,
}

impl FracGfqState {
    pub fn new(num_classes: usize) -> Self {
        FracGfqState {
            progress: vec![0.0; num_classes],
            utilization: 0.0,
        }
    }

    pub fn utilization(&self) -> f64 {
        self.utilization
    }

    /// Processes one arrival. The quota part serves the largest outstanding
    /// deficit among the agent's classes (capped at one unit) and advances
    /// every labelled class; the priced part maximizes `a v − ∫ φ` over the
    /// remaining per-agent capacity.
    pub fn step(&mut self, thr: &FracThreshold, spec: &GfqSpec, agent: &Agent) -> FracStep {
        let deficit = agent
            .labels
            .iter()
            .map(|j| spec.quotas[j] as f64 - self.progress[j])
            .fold(0.0, f64::max);
        let quota = deficit.min(1.0);
        if quota > 0.0 {
            for j in agent.labels.iter() {
                self.progress[j] += quota;
            }
        }
        let u = self.utilization;
        let mut priced = 0.0;
        if u < thr.capacity && agent.value >= thr.eval(u) * (1.0 - 1e-12) {
            priced = (thr.inverse(agent.value) - u)
                .min(1.0 - quota)
                .min(thr.capacity - u)
                .max(0.0);
        }
        self.utilization += priced;
        FracStep { quota, priced }
    }
}

/// The fractional policy.
#[derive(Debug, Clone)]
pub struct FracGfq {
    pub params: ProblemParams,
    pub spec: GfqSpec,
    pub threshold: FracThreshold,
}

impl FracGfq {
    pub fn new(params: ProblemParams, spec: GfqSpec) -> Result<Self> {
        let threshold = FracThreshold::build(&params, &spec)?;
        Ok(FracGfq {
            params,
            spec,
            threshold,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.threshold.alpha
    }

    pub fn steps(&self, instance: &Instance) -> Vec<FracStep> {
        let mut st = FracGfqState::new(self.params.num_classes);
        instance
            .agents
            .iter()
            .map(|a| st.step(&self.threshold, &self.spec, a))
            .collect()
    }

    pub fn fractional(&self, instance: &Instance) -> Vec<f64> {
        self.steps(instance).iter().map(FracStep::total).collect()
    }
}

impl Policy for FracGfq {
    fn name(&self) -> String {
        "frac-gfq".into()
    }

    fn run(&self, instance: &Instance, _rng: &mut StreamRng) -> Result<RunOutput> {
        Ok(RunOutput::new(self.fractional(instance)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Randomized set-aside: quota agents are accepted outright, the priced
/// part of the fractional decision is rounded losslessly.
#[derive(Debug, Clone)]
pub struct RSetAsideGfq {
    pub frac: FracGfq,
}

impl RSetAsideGfq {
    pub fn new(params: ProblemParams, spec: GfqSpec) -> Result<Self> {
        Ok(RSetAsideGfq {
            frac: FracGfq::new(params, spec)?,
        })
    }

    /// Streaming form: returns a stepper that can be driven agent by agent.
    pub fn stepper(&self) -> RGfqStepper<'_> {
        RGfqStepper {
            policy: self,
            state: FracGfqState::new(self.frac.params.num_classes),
            rounder: RounderState::new(self.frac.params.budget - self.frac.spec.total()),
        }
    }
}

/// Per-run state of [`RSetAsideGfq`].
#[derive(Debug, Clone)]
pub struct RGfqStepper<'a> {
    policy: &'a RSetAsideGfq,
    state: FracGfqState,
    rounder: RounderState,
}

impl RGfqStepper<'_> {
    /// Integral decision and the fractional step it was rounded from.
    pub fn step(&mut self, agent: &Agent, rng: &mut StreamRng) -> Result<(bool, FracStep)> {
        let f = &self.policy.frac;
        let s = self.state.step(&f.threshold, &f.spec, agent);
        if s.quota > 0.0 {
            // Integral quotas make every quota step a whole unit.
            return Ok((true, s));
        }
        Ok((self.rounder.step(s.priced, rng)?, s))
    }
}

impl Policy for RSetAsideGfq {
    fn name(&self) -> String {
        "r-gfq".into()
    }

    fn run(&self, instance: &Instance, rng: &mut StreamRng) -> Result<RunOutput> {
        let mut st = self.stepper();
        let decisions = instance
            .agents
            .iter()
            .map(|a| st.step(a, rng).map(|(x, _)| if x { 1.0 } else { 0.0 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunOutput::new(decisions))
    }
}
