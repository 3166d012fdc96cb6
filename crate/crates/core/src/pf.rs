//! Proportionally fair set-aside policy.
//!
//! Every unordered class pair `j ≤ i` owns a budget `b_j` (the pair `(j, j)`
//! is class `j`'s own track) and a threshold that is flat at 1 on
//! `[0, b_j/α_j]` and `exp(α_j u / b_j − 1)` above, reaching `θ_j` at `b_j`.
//! A global track of size `B𝔟` prices efficiency. An agent's fractional
//! decision is the water-filled sum of its pair tracks plus the global track
//! on the residual, rounded losslessly.

use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};
use crate::model::{Agent, Instance, ProblemParams};
use crate::policy::{Policy, RunOutput};
use crate::rng::StreamRng;
use crate::rounding::RounderState;

const IDENTITY_TOL: f64 = 1e-9;
const WATERFILL_TOL: f64 = 1e-12;

/// `α(𝔟)` and `β(𝔟)`. `β(1)` is infinite.
pub fn alpha_beta(b_frac: f64, params: &ProblemParams) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&b_frac) {
        return Err(OmcsError::InvalidParams(format!(
            "efficiency weight {b_frac} outside [0, 1]"
        )));
    }
    let alphas = class_alphas(params);
    let s = weighted_sum(&alphas);
    let k = params.num_classes as f64;
    let alpha_k = *alphas.last().expect("K >= 1");
    let alpha = 1.0 / ((1.0 - b_frac) / s + b_frac / alpha_k);
    let beta = if b_frac == 1.0 {
        f64::INFINITY
    } else {
        s / (k * (1.0 - b_frac))
    };
    Ok((alpha, beta))
}

fn class_alphas(params: &ProblemParams) -> Vec<f64> {
    params.theta.iter().map(|t| 1.0 + t.ln()).collect()
}

/// `Σ_j (K − j + 1) α_j` with 1-based `j`.
fn weighted_sum(alphas: &[f64]) -> f64 {
    let k = alphas.len();
    alphas
        .iter()
        .enumerate()
        .map(|(j, a)| (k - j) as f64 * a)
        .sum()
}

/// A threshold that is 1 on `[0, size/α]` and `exp(α u/size − 1)` up to
/// `size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub size: f64,
    pub alpha: f64,
}

impl Track {
    pub fn eval(&self, u: f64) -> f64 {
        if self.size <= 0.0 {
            return f64::INFINITY;
        }
        (self.alpha * u / self.size - 1.0).exp().max(1.0)
    }

    /// `sup { u ∈ [0, size] : φ(u) ≤ v }` for `v ≥ 1`.
    pub fn inverse(&self, v: f64) -> f64 {
        if self.size <= 0.0 {
            return 0.0;
        }
        (self.size * (1.0 + v.max(1.0).ln()) / self.alpha).min(self.size)
    }

    /// Pseudo-revenue maximizer `clip(φ⁻¹(v) − z, 0, cap)`.
    fn grant(&self, z: f64, v: f64, cap: f64) -> f64 {
        if self.size <= 0.0 || v < self.eval(z) * (1.0 - 1e-12) {
            return 0.0;
        }
        (self.inverse(v) - z).clamp(0.0, cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub params: ProblemParams,
    pub b_frac: f64,
    pub alphas: Vec<f64>,
    /// `b_j`, shared by every pair whose smaller class is `j`.
    pub pair_budgets: Vec<f64>,
    pub global_budget: f64,
    /// Exponent constant of the pair thresholds, equal to `β(𝔟)`.
    pub beta_bar: f64,
}

impl PfConfig {
    pub fn new(params: ProblemParams, b_frac: f64) -> Result<Self> {
        params.validate()?;
        let (_, beta) = alpha_beta(b_frac, &params)?;
        let alphas = class_alphas(&params);
        let s = weighted_sum(&alphas);
        let b = params.budget as f64;
        let pair_budgets: Vec<f64> = alphas.iter().map(|a| b * a * (1.0 - b_frac) / s).collect();
        let cfg = PfConfig {
            global_budget: b * b_frac,
            beta_bar: beta,
            alphas,
            pair_budgets,
            params,
            b_frac,
        };
        let err = cfg.budget_identity_error().max(cfg.closure_error());
        if err > IDENTITY_TOL {
            return Err(OmcsError::Invariant(format!(
                "threshold family violates its identities by {err}"
            )));
        }
        Ok(cfg)
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    /// `|Σ_{j≤i} b_j + B𝔟 − B|`.
    pub fn budget_identity_error(&self) -> f64 {
        let k = self.num_classes();
        let pairs: f64 = self
            .pair_budgets
            .iter()
            .enumerate()
            .map(|(j, b)| (k - j) as f64 * b)
            .sum();
        (pairs + self.global_budget - self.params.budget as f64).abs()
    }

    /// Largest violation of `φ_{j,i}(b_j) = θ_j`, of the flat/exponential
    /// junction `K β̄ b_j /(B α_j) = 1`, and of `φ^G(B𝔟) = θ_K`.
    pub fn closure_error(&self) -> f64 {
        let k = self.num_classes() as f64;
        let b = self.params.budget as f64;
        let mut err = 0.0f64;
        if self.b_frac < 1.0 {
            for j in 0..self.num_classes() {
                let bj = self.pair_budgets[j];
                let end = (k * self.beta_bar * bj / b - 1.0).exp();
                err = err.max((end - self.params.theta[j]).abs());
                let junction = k * self.beta_bar * (bj / self.alphas[j]) / b;
                err = err.max((junction - 1.0).abs());
                err = err.max((self.pair_track(j).eval(bj) - self.params.theta[j]).abs());
            }
        }
        if self.b_frac > 0.0 {
            let g = self.global_track();
            err = err.max((g.eval(self.global_budget) - self.params.theta_max()).abs());
        }
        err
    }

    pub fn pair_track(&self, j: usize) -> Track {
        Track {
            size: self.pair_budgets[j],
            alpha: self.alphas[j],
        }
    }

    pub fn global_track(&self) -> Track {
        Track {
            size: self.global_budget,
            alpha: *self.alphas.last().expect("K >= 1"),
        }
    }

    pub fn alpha_beta(&self) -> (f64, f64) {
        alpha_beta(self.b_frac, &self.params).expect("validated")
    }
}

/// Fractional utilization of every track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfTracks {
    k: usize,
    /// Row-major `K × K`; only `j ≤ i` entries are used.
    pub pair: Vec<f64>,
    pub global: f64,
}

impl PfTracks {
    pub fn new(k: usize) -> Self {
        PfTracks {
            k,
            pair: vec![0.0; k * k],
            global: 0.0,
        }
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        let (lo, hi) = if j <= i { (j, i) } else { (i, j) };
        self.pair[lo * self.k + hi]
    }

    fn add(&mut self, j: usize, i: usize, x: f64) {
        self.pair[j * self.k + i] += x;
    }

    pub fn total(&self) -> f64 {
        self.pair.iter().sum::<f64>() + self.global
    }
}

/// Track-level breakdown of one fractional decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep {
    /// `((j, i), x̃^{j,i})` for every pair track the agent touches.
    pub pairs: Vec<((usize, usize), f64)>,
    pub global: f64,
}

impl PfStep {
    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.1).sum::<f64>() + self.global
    }
}

/// Largest `h` with `Σ min{[h − z]^+, cap} ≤ 1`, applied to the caps.
pub fn waterfill(z: &[f64], caps: &[f64]) -> Vec<f64> {
    let fill = |h: f64| -> f64 {
        z.iter()
            .zip(caps)
            .map(|(&z, &c)| (h - z).max(0.0).min(c))
            .sum()
    };
    if caps.iter().sum::<f64>() <= 1.0 {
        return caps.to_vec();
    }
    let mut lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = z
        .iter()
        .zip(caps)
        .map(|(z, c)| z + c)
        .fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > WATERFILL_TOL * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if fill(mid) <= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    z.iter()
        .zip(caps)
        .map(|(&z, &c)| (lo - z).max(0.0).min(c))
        .collect()
}

/// Streaming state of the relaxation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    pub tracks: PfTracks,
}

impl PfState {
    pub fn new(k: usize) -> Self {
        PfState {
            tracks: PfTracks::new(k),
        }
    }

    /// Fractional decision for one agent; updates track utilizations.
    pub fn step(&mut self, cfg: &PfConfig, agent: &Agent) -> PfStep {
        let v = agent.value;
        let labels: Vec<usize> = agent.labels.iter().collect();
        let mut keys = Vec::new();
        let mut z = Vec::new();
        let mut caps = Vec::new();
        if cfg.b_frac < 1.0 {
            for (a, &j) in labels.iter().enumerate() {
                for &i in &labels[a..] {
                    let zj = self.tracks.get(j, i);
                    keys.push((j, i));
                    z.push(zj);
                    caps.push(cfg.pair_track(j).grant(zj, v, 1.0));
                }
            }
        }
        let granted = waterfill(&z, &caps);
        let used: f64 = granted.iter().sum();
        for (&(j, i), &x) in keys.iter().zip(&granted) {
            self.tracks.add(j, i, x);
        }
        let global = if cfg.b_frac > 0.0 {
            let room = (1.0 - used).max(0.0);
            cfg.global_track().grant(self.tracks.global, v, room)
        } else {
            0.0
        };
        self.tracks.global += global;
        PfStep {
            pairs: keys.into_iter().zip(granted).collect(),
            global,
        }
    }
}

/// Fractional decisions and per-track breakdown of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct PfTrace {
    pub steps: Vec<PfStep>,
    pub fractional: Vec<f64>,
    pub tracks: PfTracks,
}

/// Randomized set-aside policy for proportional fairness.
#[derive(Debug, Clone)]
pub struct RSetAsidePf {
    pub config: PfConfig,
}

impl RSetAsidePf {
    pub fn new(params: ProblemParams, b_frac: f64) -> Result<Self> {
        Ok(RSetAsidePf {
            config: PfConfig::new(params, b_frac)?,
        })
    }

    pub fn trace(&self, instance: &Instance) -> PfTrace {
        let mut st = PfState::new(self.config.num_classes());
        let steps: Vec<PfStep> = instance
            .agents
            .iter()
            .map(|a| st.step(&self.config, a))
            .collect();
        let fractional = steps.iter().map(|s| s.total().min(1.0)).collect();
        PfTrace {
            steps,
            fractional,
            tracks: st.tracks,
        }
    }

    pub fn fractional(&self, instance: &Instance) -> Vec<f64> {
        self.trace(instance).fractional
    }

    pub fn stepper(&self) -> PfStepper<'_> {
        PfStepper {
            config: &self.config,
            state: PfState::new(self.config.num_classes()),
            rounder: RounderState::new(self.config.params.budget),
        }
    }
}

/// Per-run state: relaxation plus rounding.
#[derive(Debug, Clone)]
pub struct PfStepper<'a> {
    config: &'a PfConfig,
    state: PfState,
    rounder: RounderState,
}

impl PfStepper<'_> {
    pub fn step(&mut self, agent: &Agent, rng: &mut StreamRng) -> Result<(bool, f64)> {
        let x = self.state.step(self.config, agent).total().min(1.0);
        Ok((self.rounder.step(x, rng)?, x))
    }

    pub fn tracks(&self) -> &PfTracks {
        &self.state.tracks
    }
}

impl Policy for RSetAsidePf {
    fn name(&self) -> String {
        "r-pf".into()
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

/// The relaxation phase alone, as a deterministic fractional policy.
#[derive(Debug, Clone)]
pub struct FracPf(pub RSetAsidePf);

impl Policy for FracPf {
    fn name(&self) -> String {
        "frac-pf".into()
    }

    fn run(&self, instance: &Instance, _rng: &mut StreamRng) -> Result<RunOutput> {
        Ok(RunOutput::new(self.0.fractional(instance)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelSet;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn params(b: usize, theta: &[f64]) -> ProblemParams {
        ProblemParams::new(b, theta.to_vec()).unwrap()
    }

    #[test]
    fn alpha_beta_examples() {
        let (a, b) = alpha_beta(0.0, &params(6, &[E, E])).unwrap();
        assert!((a - 6.0).abs() < 1e-12);
        assert!((b - 3.0).abs() < 1e-12);
        let (a, b) = alpha_beta(1.0, &params(6, &[2.0, 7.0])).unwrap();
        assert!((a - (1.0 + 7f64.ln())).abs() < 1e-12);
        assert!(b.is_infinite());
        let (a, b) = alpha_beta(0.0, &params(3, &[5.0])).unwrap();
        assert!((a - (1.0 + 5f64.ln())).abs() < 1e-12);
        assert!((b - a).abs() < 1e-12);
        assert!(alpha_beta(1.5, &params(3, &[5.0])).is_err());
    }

    #[test]
    fn threshold_family_example() {
        let cfg = PfConfig::new(params(6, &[E, E]), 0.0).unwrap();
        assert!((cfg.pair_budgets[0] - 2.0).abs() < 1e-12);
        assert!((cfg.pair_budgets[1] - 2.0).abs() < 1e-12);
        assert!((cfg.beta_bar - 3.0).abs() < 1e-12);
        let t = cfg.pair_track(0);
        assert_eq!(t.eval(0.5), 1.0);
        assert!((t.eval(1.5) - 0.5f64.exp()).abs() < 1e-12);
        assert!((t.eval(2.0) - E).abs() < 1e-12);
    }

    #[test]
    fn global_track_example() {
        let cfg = PfConfig::new(params(2, &[E]), 0.5).unwrap();
        let g = cfg.global_track();
        assert_eq!(g.eval(0.4), 1.0);
        assert!((g.eval(0.75) - 0.5f64.exp()).abs() < 1e-12);
        assert!((g.eval(1.0) - E).abs() < 1e-12);
        let p = cfg.pair_track(0);
        assert!((p.size - 1.0).abs() < 1e-12);
        assert!((p.eval(1.0) - E).abs() < 1e-12);
        assert!((p.inverse(1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reservation_identity() {
        // b_j = B/(Kβ) + B ln θ_j/(Kβ) at 𝔟 = 0.
        let p = params(9, &[2.0, 3.5, 6.0]);
        let cfg = PfConfig::new(p.clone(), 0.0).unwrap();
        let (_, beta) = cfg.alpha_beta();
        for j in 0..3 {
            let want = 9.0 / (3.0 * beta) + 9.0 * p.theta[j].ln() / (3.0 * beta);
            assert!((cfg.pair_budgets[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_waterfill() {
        let cfg = PfConfig::new(params(6, &[E, E]), 0.0).unwrap();
        let mut st = PfState::new(2);
        let s = st.step(&cfg, &Agent::new(1.0, LabelSet::from_classes([0, 1])));
        assert_eq!(s.pairs.len(), 3);
        for (_, x) in &s.pairs {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!((s.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn below_every_threshold() {
        let cfg = PfConfig::new(params(6, &[E, E]), 0.5).unwrap();
        let mut st = PfState::new(2);
        st.tracks.pair = vec![1.5, 1.5, 0.0, 1.5];
        st.tracks.global = 2.0;
        let s = st.step(&cfg, &Agent::new(1.0, LabelSet::from_classes([0, 1])));
        assert_eq!(s.total(), 0.0);
    }

    #[test]
    fn single_track_fills_budget_on_ascending_stream() {
        let p = params(3, &[4.0]);
        let pol = RSetAsidePf::new(p.clone(), 0.0).unwrap();
        let mut agents = Vec::new();
        let mut v: f64 = 1.0;
        while v <= 4.0 + 1e-12 {
            for _ in 0..3 {
                agents.push(Agent::new(v.min(4.0), LabelSet::single(0)));
            }
            v += 0.01;
        }
        agents.push(Agent::new(4.0, LabelSet::single(0)));
        let tr = pol.trace(&Instance::new(p, agents).unwrap());
        assert!((tr.tracks.get(0, 0) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_weights() {
        let p = params(4, &[2.0, 3.0]);
        let a = Agent::new(1.5, LabelSet::from_classes([0, 1]));
        let cfg = PfConfig::new(p.clone(), 1.0).unwrap();
        let s = PfState::new(2).step(&cfg, &a);
        assert!(s.pairs.is_empty());
        assert!(s.global > 0.0);
        let cfg = PfConfig::new(p, 0.0).unwrap();
        let s = PfState::new(2).step(&cfg, &a);
        assert_eq!(s.global, 0.0);
        assert_eq!(s.pairs.len(), 3);
    }

    proptest! {
        #[test]
        fn identities_hold(
            b in 1usize..50,
            raw in prop::collection::vec(1.0f64..30.0, 1..5),
            frac in 0.0f64..1.0,
        ) {
            let mut th = raw.clone();
            th.sort_by(f64::total_cmp);
            let cfg = PfConfig::new(params(b, &th), frac).unwrap();
            prop_assert!(cfg.budget_identity_error() <= 1e-9);
            prop_assert!(cfg.closure_error() <= 1e-9);
        }

        #[test]
        fn tracks_stay_within_budget(seed in any::<u64>(), frac in 0.0f64..=1.0) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed);
            let p = params(5, &[2.0, 4.0, 6.0]);
            let cfg = PfConfig::new(p.clone(), frac).unwrap();
            let mut st = PfState::new(3);
            let mut total = 0.0;
            for _ in 0..200 {
                let labels = LabelSet::from_bits(rng.random_range(1..8));
                let cap = p.value_cap(labels);
                let s = st.step(&cfg, &Agent::new(rng.random_range(1.0..=cap), labels));
                prop_assert!(s.total() <= 1.0 + 1e-9);
                prop_assert!(s.pairs.iter().all(|p| p.1 >= 0.0));
                total += s.total();
            }
            for j in 0..3 {
                for i in j..3 {
                    prop_assert!(st.tracks.get(j, i) <= cfg.pair_budgets[j] + 1e-9);
                }
            }
            prop_assert!(st.tracks.global <= cfg.global_budget + 1e-9);
            prop_assert!(total <= 5.0 + 1e-9);
        }

        #[test]
        fn waterfill_caps_at_one(
            z in prop::collection::vec(0.0f64..3.0, 1..6),
            caps in prop::collection::vec(0.0f64..1.0, 6),
        ) {
            let caps = &caps[..z.len()];
            let x = waterfill(&z, caps);
            let s: f64 = x.iter().sum();
            prop_assert!(s <= 1.0 + 1e-12);
            prop_assert!(s >= caps.iter().sum::<f64>().min(1.0) - 1e-9);
            for (xi, ci) in x.iter().zip(caps) {
                prop_assert!(*xi >= 0.0 && *xi <= ci + 1e-15);
            }
        }
    }
}
