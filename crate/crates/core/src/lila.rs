//! Learning-augmented wrappers: per-step Bernoulli mixing of a robust policy
//! with untrusted advice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};
use crate::frac_gfq::RSetAsideGfq;
use crate::model::{Allocation, GfqSpec, Instance, ProblemParams, TOL};
use crate::oracles::{offline_nsw_opt, offline_opt_gfq, worst_allocation, worst_feasible_gfq};
use crate::pf::RSetAsidePf;
use crate::policy::{Policy, RunOutput};
use crate::rng::{stream, StreamRng};

/// `ρ = (bound/(1+ε) − 1)/(bound − 1)` for `ε ∈ [0, bound − 1]`.
pub fn compute_rho(epsilon: f64, bound: f64) -> Result<f64> {
    if !(bound > 1.0) || !bound.is_finite() {
        return Err(OmcsError::Domain(format!("mixing needs a finite bound > 1, got {bound}")));
    }
    if !(0.0..=bound - 1.0 + TOL).contains(&epsilon) {
        return Err(OmcsError::Domain(format!(
            "epsilon {epsilon} outside [0, {}]",
            bound - 1.0
        )));
    }
    if epsilon == 0.0 {
        return Ok(1.0);
    }
    Ok(((bound / (1.0 + epsilon) - 1.0) / (bound - 1.0)).clamp(0.0, 1.0))
}

/// One mixed decision: advice with probability `ρ`, robust otherwise.
/// Always consumes exactly one uniform draw.
pub fn lila_step<R: Rng + ?Sized>(robust: bool, advice: bool, rho: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    if u < rho {
        advice
    } else {
        robust
    }
}

/// Robustness bound of the GFQ variant:
/// `(1+ε)(α−1) / (ε + (α−1−ε)·M/top)` with `top = C_K θ_K + D_K`.
pub fn gfq_robustness_bound(alpha: f64, epsilon: f64, quota_total: usize, top: f64) -> f64 {
    let denom = epsilon + (alpha - 1.0 - epsilon) * quota_total as f64 / top;
    if denom <= 0.0 {
        f64::INFINITY
    } else {
        (1.0 + epsilon) * (alpha - 1.0) / denom
    }
}

/// Robust fairness bound of the PF variant: `(1+ε)(β−1)/ε`.
pub fn pf_robustness_bound(beta: f64, epsilon: f64) -> f64 {
    if epsilon == 0.0 {
        f64::INFINITY
    } else {
        (1.0 + epsilon) * (beta - 1.0) / epsilon
    }
}

/// How the advice/robust choice is randomized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// One coin per run: the whole run follows the advice or the robust
    /// policy. Same expectation as per-step mixing and never leaves the
    /// feasible region, so no acceptance is ever truncated.
    #[default]
    PerRun,
    /// One coin per arrival, with a budget guard (and, for GFQ, a quota
    /// override) that repairs infeasible sample paths.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdviceKind {
    Perfect,
    Mixture { xi: f64 },
    External,
}

/// Which objective the advice optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum AdviceTarget {
    /// Nash-welfare optimum versus the empty allocation.
    Pf,
    /// Best versus worst GFQ-feasible allocation.
    Gfq(GfqSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdviceStream {
    pub decisions: Vec<bool>,
    pub kind: AdviceKind,
}

impl AdviceStream {
    pub fn external(decisions: Vec<bool>) -> Self {
        AdviceStream {
            decisions,
            kind: AdviceKind::External,
        }
    }

    pub fn allocation(&self) -> Allocation {
        Allocation::integral(self.decisions.iter().copied())
    }

    fn check_len(&self, instance: &Instance) -> Result<()> {
        if self.decisions.len() != instance.len() {
            return Err(OmcsError::Alignment {
                expected: instance.len(),
                got: self.decisions.len(),
            });
        }
        Ok(())
    }
}

/// Advice that follows the good allocation for each agent, except with
/// probability `ξ` where it follows the bad one. GFQ advice is repaired to
/// be feasible and within budget.
pub fn make_advice(
    instance: &Instance,
    target: &AdviceTarget,
    xi: f64,
    seed: u64,
) -> Result<AdviceStream> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(OmcsError::Domain(format!("xi {xi} outside [0, 1]")));
    }
    let (good, bad) = match target {
        AdviceTarget::Pf => (offline_nsw_opt(instance), worst_allocation(instance)),
        AdviceTarget::Gfq(spec) => (
            offline_opt_gfq(instance, spec)?.1,
            worst_feasible_gfq(instance, spec)?,
        ),
    };
    let mut rng = stream(seed);
    let mut decisions: Vec<bool> = good
        .decisions
        .iter()
        .zip(&bad.decisions)
        .map(|(&g, &b)| {
            let pick_bad = xi > 0.0 && rng.random::<f64>() < xi;
            (if pick_bad { b } else { g }) > 0.5
        })
        .collect();
    if let AdviceTarget::Gfq(spec) = target {
        repair_gfq(instance, spec, &mut decisions);
    }
    let kind = if xi == 0.0 {
        AdviceKind::Perfect
    } else {
        AdviceKind::Mixture { xi }
    };
    Ok(AdviceStream { decisions, kind })
}

/// Force-accepts the earliest agents of classes below quota, then drops the
/// latest accepts that no quota depends on until the budget holds. A feasible
/// spec guarantees both loops succeed: a set with no removable element has at
/// most `M ≤ B` members.
fn repair_gfq(instance: &Instance, spec: &GfqSpec, x: &mut [bool]) {
    let k = instance.num_classes();
    let mut count = vec![0usize; k];
    for (a, _) in instance.agents.iter().zip(x.iter()).filter(|p| *p.1) {
        a.labels.iter().for_each(|j| count[j] += 1);
    }
    for (t, a) in instance.agents.iter().enumerate() {
        if !x[t] && a.labels.iter().any(|j| count[j] < spec.quotas[j]) {
            x[t] = true;
            a.labels.iter().for_each(|j| count[j] += 1);
        }
    }
    let mut total = x.iter().filter(|&&b| b).count();
    for t in (0..x.len()).rev() {
        if total <= instance.budget() {
            break;
        }
        let a = &instance.agents[t];
        if x[t] && a.labels.iter().all(|j| count[j] > spec.quotas[j]) {
            x[t] = false;
            a.labels.iter().for_each(|j| count[j] -= 1);
            total -= 1;
        }
    }
}

fn run_per_run(
    robust: &dyn Policy,
    advice: &AdviceStream,
    rho: f64,
    instance: &Instance,
    rng: &mut StreamRng,
) -> Result<RunOutput> {
    if rng.random::<f64>() < rho {
        Ok(RunOutput::new(
            advice.decisions.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
        ))
    } else {
        robust.run(instance, rng)
    }
}

/// LiLA over the proportionally fair set-aside policy (`𝔟 = 0`).
#[derive(Debug, Clone)]
pub struct LilaPf {
    pub robust: RSetAsidePf,
    pub epsilon: f64,
    pub rho: f64,
    pub advice: AdviceStream,
    pub mode: MixMode,
}

impl LilaPf {
    pub fn new(params: ProblemParams, epsilon: f64, advice: AdviceStream) -> Result<Self> {
        let robust = RSetAsidePf::new(params, 0.0)?;
        let (_, beta) = robust.config.alpha_beta();
        let rho = compute_rho(epsilon, beta)?;
        Ok(LilaPf {
            robust,
            epsilon,
            rho,
            advice,
            mode: MixMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: MixMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn beta(&self) -> f64 {
        self.robust.config.alpha_beta().1
    }
}

impl Policy for LilaPf {
    fn name(&self) -> String {
        format!("lila-pf(eps={})", self.epsilon)
    }

    fn run(&self, instance: &Instance, rng: &mut StreamRng) -> Result<RunOutput> {
        self.advice.check_len(instance)?;
        if self.mode == MixMode::PerRun {
            return run_per_run(&self.robust, &self.advice, self.rho, instance, rng);
        }
        let budget = instance.budget();
        let mut st = self.robust.stepper();
        let mut sold = 0usize;
        let mut truncations = 0usize;
        let mut decisions = Vec::with_capacity(instance.len());
        for (a, &adv) in instance.agents.iter().zip(&self.advice.decisions) {
            // The robust track advances on its own hypothetical decision.
            let (rob, _) = st.step(a, rng)?;
            let mut x = lila_step(rob, adv, self.rho, rng);
            if x && sold >= budget {
                x = false;
                truncations += 1;
            }
            sold += x as usize;
            decisions.push(if x { 1.0 } else { 0.0 });
        }
        Ok(RunOutput {
            decisions,
            truncations,
        })
    }
}

/// LiLA over the randomized set-aside GFQ policy. In per-step mode, unless
/// the advice is followed blindly (`ρ = 1`), an agent labelled by a class
/// that is below quota in the mixed output is accepted, and other
/// acceptances are capped at `B − M`; together these keep every sample path
/// feasible.
#[derive(Debug, Clone)]
pub struct LilaGfq {
    pub robust: RSetAsideGfq,
    pub epsilon: f64,
    pub rho: f64,
    pub advice: AdviceStream,
    pub mode: MixMode,
}

impl LilaGfq {
    pub fn new(
        params: ProblemParams,
        spec: GfqSpec,
        epsilon: f64,
        advice: AdviceStream,
    ) -> Result<Self> {
        let robust = RSetAsideGfq::new(params, spec)?;
        let rho = compute_rho(epsilon, robust.frac.alpha())?;
        Ok(LilaGfq {
            robust,
            epsilon,
            rho,
            advice,
            mode: MixMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: MixMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.robust.frac.alpha()
    }

    pub fn robustness_bound(&self) -> f64 {
        let f = &self.robust.frac;
        let k = crate::dgfq::GfqConstants::new(&f.params, &f.spec).expect("validated");
        gfq_robustness_bound(self.alpha(), self.epsilon, f.spec.total(), k.top())
    }
}

impl Policy for LilaGfq {
    fn name(&self) -> String {
        format!("lila-gfq(eps={})", self.epsilon)
    }

    fn run(&self, instance: &Instance, rng: &mut StreamRng) -> Result<RunOutput> {
        self.advice.check_len(instance)?;
        if self.mode == MixMode::PerRun {
            return run_per_run(&self.robust, &self.advice, self.rho, instance, rng);
        }
        let spec = &self.robust.frac.spec;
        let free = instance.budget() - spec.total();
        let blind = self.rho >= 1.0;
        let mut count = vec![0usize; instance.num_classes()];
        let mut priced = 0usize;
        let mut truncations = 0usize;
        let mut st = self.robust.stepper();
        let mut decisions = Vec::with_capacity(instance.len());
        for (a, &adv) in instance.agents.iter().zip(&self.advice.decisions) {
            let (rob, _) = st.step(a, rng)?;
            let mixed = lila_step(rob, adv, self.rho, rng);
            let x = if blind {
                mixed
            } else if a.labels.iter().any(|j| count[j] < spec.quotas[j]) {
                true
            } else if mixed && priced >= free {
                truncations += 1;
                false
            } else {
                priced += mixed as usize;
                mixed
            };
            if x {
                a.labels.iter().for_each(|j| count[j] += 1);
            }
            decisions.push(if x { 1.0 } else { 0.0 });
        }
        Ok(RunOutput {
            decisions,
            truncations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gfq_satisfied, total_value, Agent, LabelSet};
    use crate::oracles::{mc_expectation, offline_opt_gfq};
    use crate::rng::sub_stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_instance(seed: u64, t: usize, k: usize, b: usize) -> Instance {
        let mut rng = stream(seed);
        let theta: Vec<f64> = (1..=k).map(|j| 1.0 + 2.0 * j as f64).collect();
        let p = ProblemParams::new(b, theta).unwrap();
        let agents = (0..t)
            .map(|_| {
                let labels = LabelSet::from_bits(rng.random_range(1..(1u64 << k)));
                let cap = p.value_cap(labels);
                Agent::new(rng.random_range(1.0..=cap), labels)
            })
            .collect();
        Instance::new(p, agents).unwrap()
    }

    #[test]
    fn rho_examples() {
        assert!((compute_rho(1.0, 3.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(compute_rho(0.0, 3.0).unwrap(), 1.0);
        assert_eq!(compute_rho(2.0, 3.0).unwrap(), 0.0);
        assert!(compute_rho(2.5, 3.0).is_err());
        assert!(compute_rho(0.5, 1.0).is_err());
    }

    #[test]
    fn step_extremes() {
        let mut rng = stream(1);
        for _ in 0..100 {
            assert!(lila_step(false, true, 1.0, &mut rng));
            assert!(!lila_step(false, true, 0.0, &mut rng));
            assert!(lila_step(true, true, 0.3, &mut rng));
        }
    }

    #[test]
    fn robustness_bound_degenerates_without_quotas() {
        let b = gfq_robustness_bound(2.0, 0.5, 0, 10.0);
        assert!((b - 1.5 / 0.5).abs() < 1e-15);
        assert!((pf_robustness_bound(3.0, 1.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn advice_endpoints() {
        let inst = random_instance(3, 10, 2, 3);
        let spec = GfqSpec::new(vec![1, 1]);
        let pf0 = make_advice(&inst, &AdviceTarget::Pf, 0.0, 9).unwrap();
        assert_eq!(pf0.allocation(), offline_nsw_opt(&inst));
        assert_eq!(pf0.kind, AdviceKind::Perfect);
        let pf1 = make_advice(&inst, &AdviceTarget::Pf, 1.0, 9).unwrap();
        assert!(pf1.decisions.iter().all(|&b| !b));
        let g0 = make_advice(&inst, &AdviceTarget::Gfq(spec.clone()), 0.0, 9).unwrap();
        assert_eq!(g0.allocation(), offline_opt_gfq(&inst, &spec).unwrap().1);
        let g1 = make_advice(&inst, &AdviceTarget::Gfq(spec.clone()), 1.0, 9).unwrap();
        assert_eq!(g1.allocation(), worst_feasible_gfq(&inst, &spec).unwrap());
    }

    proptest! {
        #[test]
        fn gfq_advice_is_feasible(seed in any::<u64>(), xi in 0.0f64..=1.0) {
            let inst = random_instance(seed, 12, 3, 4);
            let spec = GfqSpec::new(vec![1, 1, 1]);
            prop_assume!(crate::oracles::check_gfq_feasible(&inst, &spec).is_ok());
            let adv = make_advice(&inst, &AdviceTarget::Gfq(spec.clone()), xi, seed).unwrap();
            let alloc = adv.allocation();
            prop_assert!(alloc.validate(4).is_ok());
            prop_assert!(gfq_satisfied(&inst, &alloc, &spec).unwrap());
        }

        #[test]
        fn lila_gfq_paths_feasible(seed in any::<u64>(), eps in 0.0f64..0.5, xi in 0.0f64..=1.0) {
            let inst = random_instance(seed, 14, 2, 4);
            let spec = GfqSpec::new(vec![1, 1]);
            prop_assume!(crate::oracles::check_gfq_feasible(&inst, &spec).is_ok());
            let adv = make_advice(&inst, &AdviceTarget::Gfq(spec.clone()), xi, seed).unwrap();
            for mode in [MixMode::PerRun, MixMode::PerStep] {
            let pol = LilaGfq::new(inst.params.clone(), spec.clone(), eps, adv.clone())
                .unwrap()
                .with_mode(mode);
            for i in 0..20 {
                let out = pol.run(&inst, &mut sub_stream(seed, i)).unwrap();
                let alloc = Allocation::fractional(out.decisions);
                prop_assert!(alloc.validate(4).is_ok());
                prop_assert!(gfq_satisfied(&inst, &alloc, &spec).unwrap());
                prop_assert_eq!(out.truncations == 0 || mode == MixMode::PerStep, true);
            }
            }
        }
    }

    #[test]
    fn zero_epsilon_follows_advice() {
        let inst = random_instance(5, 15, 2, 4);
        let spec = GfqSpec::new(vec![1, 1]);
        let adv = make_advice(&inst, &AdviceTarget::Gfq(spec.clone()), 0.0, 1).unwrap();
        let want = total_value(&inst, &adv.allocation()).unwrap();
        let pol = LilaGfq::new(inst.params.clone(), spec, 0.0, adv.clone()).unwrap();
        let est = mc_expectation(&pol, &inst, 200, 4).unwrap();
        assert!((est.mean_value - want).abs() < 1e-9);
        let pol = LilaPf::new(inst.params.clone(), 0.0, adv).unwrap();
        let est = mc_expectation(&pol, &inst, 200, 4).unwrap();
        assert!((est.mean_value - want).abs() < 1e-9);
    }

    #[test]
    fn mixture_identity() {
        // Per-step mixing is exact only when the budget guard cannot fire
        // (T ≤ B); per-run mixing is exact everywhere.
        for (t, b, mode) in [(8, 8, MixMode::PerStep), (30, 5, MixMode::PerRun)] {
            let inst = random_instance(11, t, 2, b);
            let adv = make_advice(&inst, &AdviceTarget::Pf, 0.3, 2).unwrap();
            let pol = LilaPf::new(inst.params.clone(), 0.5, adv.clone())
                .unwrap()
                .with_mode(mode);
            let lila = mc_expectation(&pol, &inst, 20_000, 7).unwrap();
            assert_eq!(lila.truncation_rate, 0.0);
            let robust = mc_expectation(&pol.robust, &inst, 20_000, 8).unwrap();
            let adv_value = total_value(&inst, &adv.allocation()).unwrap();
            let want = pol.rho * adv_value + (1.0 - pol.rho) * robust.mean_value;
            let sigma = lila.stderr_value.hypot((1.0 - pol.rho) * robust.stderr_value);
            assert!((lila.mean_value - want).abs() <= 4.0 * sigma, "{} vs {want}", lila.mean_value);
        }
    }

    #[test]
    fn over_budget_mixtures_are_truncated() {
        let inst = random_instance(11, 30, 2, 5);
        let adv = make_advice(&inst, &AdviceTarget::Pf, 0.0, 2).unwrap();
        let pol = LilaPf::new(inst.params.clone(), 0.5, adv)
            .unwrap()
            .with_mode(MixMode::PerStep);
        for i in 0..200 {
            let out = pol.run(&inst, &mut sub_stream(3, i)).unwrap();
            let sold: f64 = out.decisions.iter().sum();
            assert!(sold <= 5.0);
            if out.truncations > 0 {
                assert_eq!(sold, 5.0);
            }
        }
    }

    #[test]
    fn alignment_checked() {
        let inst = random_instance(1, 5, 1, 2);
        let pol = LilaPf::new(inst.params.clone(), 0.5, AdviceStream::external(vec![true])).unwrap();
        assert!(pol.run(&inst, &mut stream(0)).is_err());
    }
}
