//! Lossless online rounding of a fractional decision stream.
//!
//! The rounder tracks the cumulative fractional utilization `z` and the index
//! `κ` of the next unit to sell. Unit `⌈z⌉` is still unsold with probability
//! exactly `⌈z⌉ − z`; the acceptance probabilities below keep that invariant
//! and make every step's expected integral decision equal its fractional one.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{OmcsError, Result};
use crate::model::Instance;
use crate::rng::{mix_seed, sub_stream, uniform};
use crate::stats::{standardized, Moments};

/// Utilizations within this distance of an integer are treated as integral.
pub const SNAP: f64 = 1e-9;
const CLAMP: f64 = 1e-12;

fn snap(z: f64) -> f64 {
    let r = z.round();
    if (z - r).abs() <= SNAP {
        r
    } else {
        z
    }
}

/// `⌈z⌉` after snapping near-integers.
pub fn ceil_unit(z: f64) -> usize {
    snap(z).ceil().max(0.0) as usize
}

/// Probability of accepting a step of size `x` from utilization `z_p` when
/// the next unsold unit is `kappa`.
pub fn accept_probability(kappa: usize, z_p: f64, x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    let zp = snap(z_p);
    let zn = snap(z_p + x);
    // Use the snapped step so a step landing on an integer sells for sure.
    let x = zn - zp;
    let cp = zp.ceil();
    let cn = zn.ceil();
    let k = kappa as f64;
    let p = if cn == cp {
        if k == cp {
            x / (cp - zp)
        } else {
            0.0
        }
    } else if k == cp {
        1.0
    } else if k == cn {
        (zn - cp) / ((1.0 - cp + zp) * (cn - cp))
    } else {
        0.0
    };
    if !p.is_finite() || !(-CLAMP..=1.0 + CLAMP).contains(&p) {
        return Err(OmcsError::Invariant(format!(
            "acceptance probability {p} for kappa = {kappa}, z = {z_p}, x = {x}"
        )));
    }
    Ok(p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RounderState {
    kappa: usize,
    z: f64,
    budget: usize,
}

impl RounderState {
    pub fn new(budget: usize) -> Self {
        RounderState {
            kappa: 1,
            z: 0.0,
            budget,
        }
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Units sold so far.
    pub fn sold(&self) -> usize {
        self.kappa - 1
    }

    /// Whether unit `⌈z⌉` is still unsold.
    pub fn tracked_unit_available(&self) -> bool {
        let c = ceil_unit(self.z);
        c >= 1 && self.kappa == c
    }

    /// Rounds one fractional decision. A zero step consumes no randomness;
    /// any other step consumes exactly one uniform draw.
    pub fn step<R: Rng + ?Sized>(&mut self, x: f64, rng: &mut R) -> Result<bool> {
        let x = self.check(x)?;
        if x == 0.0 {
            return Ok(false);
        }
        let u = uniform(rng);
        self.apply(x, u)
    }

    /// Like [`step`](Self::step) with an explicit uniform draw `u ∈ [0, 1)`.
    pub fn step_with_draw(&mut self, x: f64, u: f64) -> Result<bool> {
        let x = self.check(x)?;
        if x == 0.0 {
            return Ok(false);
        }
        self.apply(x, u)
    }

    fn check(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || !(-CLAMP..=1.0 + SNAP).contains(&x) {
            return Err(OmcsError::Domain(format!(
                "fractional decision {x} outside [0, 1]"
            )));
        }
        let x = x.clamp(0.0, 1.0);
        if self.z + x > self.budget as f64 + SNAP {
            return Err(OmcsError::InfeasibleAllocation(format!(
                "fractional utilization {} exceeds budget {}",
                self.z + x,
                self.budget
            )));
        }
        Ok(x)
    }

    fn apply(&mut self, x: f64, u: f64) -> Result<bool> {
        let p = accept_probability(self.kappa, self.z, x)?;
        let accept = u < p;
        if accept {
            self.kappa += 1;
        }
        self.z = snap(self.z + x);
        let c = ceil_unit(self.z);
        let ok = if self.z == self.z.round() {
            self.kappa == c + 1
        } else {
            self.kappa == c || self.kappa == c + 1
        };
        if !ok {
            return Err(OmcsError::Invariant(format!(
                "rounder state kappa = {} inconsistent with z = {}",
                self.kappa, self.z
            )));
        }
        Ok(accept)
    }
}

/// Exact expected integral decision per step (and the probability that unit
/// `⌈z_t⌉` is unsold after step `t`), by propagating the distribution of `κ`.
pub fn exact_marginals(xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    // κ takes at most two values: ⌈z⌉ and ⌈z⌉ + 1.
    let mut dist: Vec<(usize, f64)> = vec![(1, 1.0)];
    let mut z = 0.0;
    let mut marg = Vec::with_capacity(xs.len());
    let mut avail = Vec::with_capacity(xs.len());
    for &x in xs {
        let x = x.clamp(0.0, 1.0);
        let mut next: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut m = 0.0;
        for &(k, p) in &dist {
            let a = accept_probability(k, z, x)?;
            m += p * a;
            for (kk, pp) in [(k + 1, p * a), (k, p * (1.0 - a))] {
                if pp == 0.0 {
                    continue;
                }
                match next.iter_mut().find(|e| e.0 == kk) {
                    Some(e) => e.1 += pp,
                    None => next.push((kk, pp)),
                }
            }
        }
        z = snap(z + x);
        dist = next;
        let c = ceil_unit(z);
        avail.push(dist.iter().filter(|e| c >= 1 && e.0 == c).map(|e| e.1).sum());
        marg.push(m);
    }
    Ok((marg, avail))
}

/// Rounds a whole fractional stream.
pub fn round_stream<R: Rng + ?Sized>(xs: &[f64], budget: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut state = RounderState::new(budget);
    xs.iter()
        .map(|&x| state.step(x, rng).map(|a| if a { 1.0 } else { 0.0 }))
        .collect()
}

/// Per-step acceptance probabilities for the two reachable values of `κ`.
/// Equivalent to driving a [`RounderState`], but cheap to replay.
#[derive(Debug, Clone)]
struct Plan {
    x: Vec<f64>,
    z_after: Vec<f64>,
    base: Vec<usize>,
    p_base: Vec<f64>,
    p_next: Vec<f64>,
}

impl Plan {
    fn new(xs: &[f64], budget: usize) -> Result<Self> {
        let mut z = 0.0;
        let mut plan = Plan {
            x: Vec::with_capacity(xs.len()),
            z_after: Vec::with_capacity(xs.len()),
            base: Vec::with_capacity(xs.len()),
            p_base: Vec::with_capacity(xs.len()),
            p_next: Vec::with_capacity(xs.len()),
        };
        let probe = RounderState::new(budget);
        for &x in xs {
            let x = RounderState { z, ..probe.clone() }.check(x)?;
            let c = ceil_unit(z);
            plan.x.push(x);
            plan.base.push(c);
            plan.p_base.push(accept_probability(c, z, x)?);
            plan.p_next.push(accept_probability(c + 1, z, x)?);
            z = snap(z + x);
            plan.z_after.push(z);
        }
        Ok(plan)
    }
}

/// A fractional stream together with the instance it was computed on.
#[derive(Debug, Clone)]
pub struct FracStream {
    pub instance: Instance,
    pub fractional: Vec<f64>,
}

/// Statistical comparison of rounded and fractional outcomes for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCheck {
    /// Largest standardized deviation of the cumulative value over prefixes.
    pub max_prefix_z: f64,
    /// Standardized deviation of the total value.
    pub final_z: f64,
    /// Largest standardized deviation of a per-class utility at a checkpoint.
    pub max_class_z: f64,
    /// Largest standardized deviation of the availability frequency of unit
    /// `⌈z⌉` from `⌈z⌉ − z` at a checkpoint.
    pub max_avail_z: f64,
    /// Largest gap between exact expected decisions and fractional ones.
    pub exact_err: f64,
    /// Sample paths selling more than `⌈Σ x̃⌉` units.
    pub budget_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosslessReport {
    pub trials: usize,
    pub checkpoints: usize,
    pub streams: Vec<StreamCheck>,
    pub max_prefix_z: f64,
    pub max_final_z: f64,
    pub max_class_z: f64,
    pub max_avail_z: f64,
    pub max_exact_err: f64,
    pub pass: bool,
}

/// Pass threshold on standardized deviations.
pub const SIGMA_LIMIT: f64 = 4.0;
/// Pass threshold on exact expected-decision errors.
pub const EXACT_LIMIT: f64 = 1e-9;

const CHUNK: usize = 512;

fn checkpoint_indices(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (1..=count).map(|i| (i * len).div_ceil(count) - 1).collect();
    idx.dedup();
    idx
}

struct StreamAcc {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    class_sum: Vec<f64>,
    class_sumsq: Vec<f64>,
    avail: Vec<f64>,
    violations: usize,
    n: f64,
}

impl StreamAcc {
    fn new(t: usize, checkpoints: usize, k: usize) -> Self {
        StreamAcc {
            sum: vec![0.0; t],
            sumsq: vec![0.0; t],
            class_sum: vec![0.0; checkpoints * k],
            class_sumsq: vec![0.0; checkpoints * k],
            avail: vec![0.0; checkpoints],
            violations: 0,
            n: 0.0,
        }
    }
}

/// Monte Carlo check that rounding preserves expected cumulative value (and
/// per-class utility at checkpoints), that unit `⌈z⌉` is available with
/// probability `⌈z⌉ − z`, plus an exact check of the expected decisions.
pub fn validate_lossless(
    streams: &[FracStream],
    trials: usize,
    seed: u64,
    checkpoints: usize,
) -> Result<LosslessReport> {
    if trials == 0 {
        return Err(OmcsError::Domain("trials must be at least 1".into()));
    }
    let mut checks = Vec::with_capacity(streams.len());
    for (s, stream) in streams.iter().enumerate() {
        checks.push(check_stream(stream, trials, mix_seed(seed, s as u64), checkpoints)?);
    }
    let fold = |f: fn(&StreamCheck) -> f64| checks.iter().map(f).fold(0.0, f64::max);
    let max_prefix_z = fold(|c| c.max_prefix_z);
    let max_final_z = fold(|c| c.final_z);
    let max_class_z = fold(|c| c.max_class_z);
    let max_avail_z = fold(|c| c.max_avail_z);
    let max_exact_err = fold(|c| c.exact_err);
    let pass = max_prefix_z <= SIGMA_LIMIT
        && max_class_z <= SIGMA_LIMIT
        && max_avail_z <= SIGMA_LIMIT
        && max_exact_err <= EXACT_LIMIT
        && checks.iter().all(|c| c.budget_violations == 0);
    Ok(LosslessReport {
        trials,
        checkpoints,
        streams: checks,
        max_prefix_z,
        max_final_z,
        max_class_z,
        max_avail_z,
        max_exact_err,
        pass,
    })
}

fn check_stream(stream: &FracStream, trials: usize, seed: u64, checkpoints: usize) -> Result<StreamCheck> {
    let inst = &stream.instance;
    let xs = &stream.fractional;
    if xs.len() != inst.len() {
        return Err(OmcsError::Alignment {
            expected: inst.len(),
            got: xs.len(),
        });
    }
    let t_len = xs.len();
    let k = inst.num_classes();
    let plan = Plan::new(xs, inst.budget())?;
    let cps = checkpoint_indices(t_len, checkpoints);
    let cap = ceil_unit(xs.iter().sum::<f64>().min(inst.budget() as f64 + SNAP));
    let values: Vec<f64> = inst.agents.iter().map(|a| a.value).collect();

    let n_chunks = trials.div_ceil(CHUNK);
    let partials: Vec<StreamAcc> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = StreamAcc::new(t_len, cps.len(), k);
            let mut class_u = vec![0.0; k];
            for i in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut rng = sub_stream(seed, i as u64);
                let mut kappa = 1usize;
                let mut cum = 0.0;
                let mut next_cp = 0;
                class_u.iter_mut().for_each(|u| *u = 0.0);
                for t in 0..t_len {
                    if plan.x[t] > 0.0 {
                        let u = uniform(&mut rng);
                        let p = if kappa == plan.base[t] {
                            plan.p_base[t]
                        } else if kappa == plan.base[t] + 1 {
                            plan.p_next[t]
                        } else {
                            0.0
                        };
                        if u < p {
                            kappa += 1;
                            cum += values[t];
                            for j in inst.agents[t].labels.iter() {
                                class_u[j] += values[t];
                            }
                        }
                    }
                    acc.sum[t] += cum;
                    acc.sumsq[t] += cum * cum;
                    if next_cp < cps.len() && cps[next_cp] == t {
                        let base = next_cp * k;
                        for (j, &u) in class_u.iter().enumerate() {
                            acc.class_sum[base + j] += u;
                            acc.class_sumsq[base + j] += u * u;
                        }
                        let zc = ceil_unit(plan.z_after[t]);
                        if zc >= 1 && kappa == zc {
                            acc.avail[next_cp] += 1.0;
                        }
                        next_cp += 1;
                    }
                }
                if kappa - 1 > cap {
                    acc.violations += 1;
                }
                acc.n += 1.0;
            }
            acc
        })
        .collect();

    // Fixed-order merge of per-chunk moments.
    let mut prefix = vec![Moments::default(); t_len];
    let mut class = vec![Moments::default(); cps.len() * k];
    let mut avail = vec![0.0; cps.len()];
    let mut violations = 0;
    for p in &partials {
        for t in 0..t_len {
            prefix[t].merge(&Moments::from_sums(p.n, p.sum[t], p.sumsq[t]));
        }
        for (m, (s, ss)) in class.iter_mut().zip(p.class_sum.iter().zip(&p.class_sumsq)) {
            m.merge(&Moments::from_sums(p.n, *s, *ss));
        }
        for (a, b) in avail.iter_mut().zip(&p.avail) {
            *a += b;
        }
        violations += p.violations;
    }

    let mut frac_cum = Vec::with_capacity(t_len);
    let mut acc = 0.0;
    for (x, v) in xs.iter().zip(&values) {
        acc += x * v;
        frac_cum.push(acc);
    }
    let mut max_prefix_z = 0.0f64;
    for t in 0..t_len {
        max_prefix_z = max_prefix_z.max(standardized(prefix[t].mean, frac_cum[t], prefix[t].stderr()));
    }
    let final_z = if t_len == 0 {
        0.0
    } else {
        standardized(prefix[t_len - 1].mean, frac_cum[t_len - 1], prefix[t_len - 1].stderr())
    };

    let mut max_class_z = 0.0f64;
    let mut max_avail_z = 0.0f64;
    let n = trials as f64;
    for (ci, &t) in cps.iter().enumerate() {
        let mut frac_class = vec![0.0; k];
        for s in 0..=t {
            for j in inst.agents[s].labels.iter() {
                frac_class[j] += xs[s] * values[s];
            }
        }
        for j in 0..k {
            let m = &class[ci * k + j];
            max_class_z = max_class_z.max(standardized(m.mean, frac_class[j], m.stderr()));
        }
        let z = plan.z_after[t];
        let c = ceil_unit(z);
        let p = if c >= 1 { c as f64 - snap(z) } else { 0.0 };
        let sigma = (p * (1.0 - p) / n).sqrt();
        max_avail_z = max_avail_z.max(standardized(avail[ci] / n, p, sigma));
    }

    let (marg, _) = exact_marginals(xs)?;
    let exact_err = marg
        .iter()
        .zip(&plan.x)
        .map(|(m, x)| (m - x).abs())
        .fold(0.0, f64::max);

    Ok(StreamCheck {
        max_prefix_z,
        final_z,
        max_class_z,
        max_avail_z,
        exact_err,
        budget_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Agent, LabelSet, ProblemParams};
    use crate::rng::stream;
    use proptest::prelude::*;

    /// Brute force over all accept/reject paths, branching with the
    /// rounder's own probabilities.
    fn enumerate_paths(xs: &[f64], budget: usize) -> Vec<f64> {
        fn rec(xs: &[f64], t: usize, st: RounderState, p: f64, acc: &mut [f64]) {
            if t == xs.len() || p == 0.0 {
                return;
            }
            let x = xs[t];
            let a = if x > 0.0 {
                accept_probability(st.kappa, st.z, x).unwrap()
            } else {
                0.0
            };
            acc[t] += p * a;
            let mut yes = st.clone();
            yes.step_with_draw(x, 0.0).ok();
            let mut no = st.clone();
            no.step_with_draw(x, 1.0 - f64::EPSILON).ok();
            if x > 0.0 && a > 0.0 {
                rec(xs, t + 1, yes, p * a, acc);
            }
            rec(xs, t + 1, no, p * (1.0 - a), acc);
        }
        let mut acc = vec![0.0; xs.len()];
        rec(xs, 0, RounderState::new(budget), 1.0, &mut acc);
        acc
    }

    #[test]
    fn branch_examples() {
        assert_eq!(accept_probability(1, 0.0, 1.0).unwrap(), 1.0);
        assert!((accept_probability(1, 0.3, 0.2).unwrap() - 0.2 / 0.7).abs() < 1e-15);
        assert_eq!(accept_probability(1, 0.8, 0.5).unwrap(), 1.0);
        let p = accept_probability(2, 0.8, 0.5).unwrap();
        assert!((p - 0.375).abs() < 1e-15);
        assert!((0.2 * 1.0 + 0.8 * p - 0.5).abs() < 1e-15);
        assert_eq!(accept_probability(3, 0.8, 0.5).unwrap(), 0.0);
        assert_eq!(accept_probability(1, 0.3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn half_steps_have_unit_expectation() {
        let (m, _) = exact_marginals(&[0.5, 0.5]).unwrap();
        assert!((m[0] + m[1] - 1.0).abs() < 1e-15);
        let paths = enumerate_paths(&[0.5, 0.5], 1);
        assert!((paths[0] + paths[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_steps_are_deterministic() {
        let mut rng = stream(1);
        let out = round_stream(&[1.0; 5], 5, &mut rng).unwrap();
        assert_eq!(out, vec![1.0; 5]);
    }

    #[test]
    fn zero_steps_consume_no_randomness() {
        let mut a = stream(4);
        let mut b = stream(4);
        let xs = [0.3, 0.0, 0.0, 0.4, 0.0, 0.9];
        let nz: Vec<f64> = xs.iter().copied().filter(|&x| x > 0.0).collect();
        let ra = round_stream(&xs, 3, &mut a).unwrap();
        let rb = round_stream(&nz, 3, &mut b).unwrap();
        let ra_nz: Vec<f64> = ra.iter().zip(&xs).filter(|(_, &x)| x > 0.0).map(|(r, _)| *r).collect();
        assert_eq!(ra_nz, rb);
        use rand::RngCore;
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn budget_precondition() {
        let mut st = RounderState::new(1);
        st.step_with_draw(0.8, 0.5).unwrap();
        assert!(st.step_with_draw(0.5, 0.5).is_err());
        assert!(st.step_with_draw(1.5, 0.5).is_err());
    }

    #[test]
    fn constant_stream_has_zero_deviation() {
        let params = ProblemParams::new(4, vec![3.0]).unwrap();
        let agents = vec![Agent::new(2.0, LabelSet::single(0)); 4];
        let s = FracStream {
            instance: Instance::new(params, agents).unwrap(),
            fractional: vec![1.0; 4],
        };
        let r = validate_lossless(&[s], 1000, 3, 20).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_prefix_z, 0.0);
    }

    #[test]
    fn random_streams_pass() {
        use rand::Rng;
        let mut rng = stream(9);
        let params = ProblemParams::new(3, vec![4.0, 4.0]).unwrap();
        let streams: Vec<FracStream> = (0..3)
            .map(|_| {
                let agents: Vec<Agent> = (0..30)
                    .map(|_| {
                        Agent::new(
                            rng.random_range(1.0..4.0),
                            LabelSet::from_bits(rng.random_range(1..4)),
                        )
                    })
                    .collect();
                let fractional = (0..30).map(|_| rng.random_range(0.0..0.2)).collect();
                FracStream {
                    instance: Instance::new(params.clone(), agents).unwrap(),
                    fractional,
                }
            })
            .collect();
        let r = validate_lossless(&streams, 20_000, 5, 20).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn plan_replay_matches_state_machine() {
        use rand::Rng;
        let mut g = stream(12);
        let xs: Vec<f64> = (0..200).map(|_| g.random_range(0.0..0.1)).collect();
        let plan = Plan::new(&xs, 10).unwrap();
        for trial in 0..200 {
            let mut a = stream(trial);
            let mut b = stream(trial);
            let direct = round_stream(&xs, 10, &mut a).unwrap();
            let mut kappa = 1;
            for t in 0..xs.len() {
                let mut acc = 0.0;
                if plan.x[t] > 0.0 {
                    let u = uniform(&mut b);
                    let p = if kappa == plan.base[t] {
                        plan.p_base[t]
                    } else if kappa == plan.base[t] + 1 {
                        plan.p_next[t]
                    } else {
                        0.0
                    };
                    if u < p {
                        kappa += 1;
                        acc = 1.0;
                    }
                }
                assert_eq!(acc, direct[t]);
            }
        }
    }

    proptest! {
        #[test]
        fn exact_marginals_match_path_enumeration(
            xs in prop::collection::vec(0.0f64..=1.0, 0..=8),
        ) {
            let budget = 8;
            let (m, avail) = exact_marginals(&xs).unwrap();
            let paths = enumerate_paths(&xs, budget);
            let mut z = 0.0;
            for t in 0..xs.len() {
                prop_assert!((m[t] - xs[t]).abs() <= 1e-12);
                prop_assert!((paths[t] - xs[t]).abs() <= 1e-12);
                z = snap(z + xs[t]);
                let c = ceil_unit(z);
                let want = if c >= 1 { c as f64 - z } else { 0.0 };
                prop_assert!((avail[t] - want).abs() <= 1e-12);
            }
        }

        #[test]
        fn probabilities_in_range(z in 0.0f64..10.0, x in 0.0f64..=1.0, dk in 0usize..3) {
            let c = ceil_unit(z);
            let kappa = (c + dk).max(1);
            let p = accept_probability(kappa, z, x).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn sample_paths_respect_budget(seed in any::<u64>(), xs in prop::collection::vec(0.0f64..=1.0, 0..40)) {
            let total: f64 = xs.iter().sum();
            let budget = total.ceil() as usize + 1;
            let mut rng = stream(seed);
            let out = round_stream(&xs, budget, &mut rng).unwrap();
            let sold: f64 = out.iter().sum();
            prop_assert!(sold <= ceil_unit(total) as f64);
            let mut again = stream(seed);
            prop_assert_eq!(out, round_stream(&xs, budget, &mut again).unwrap());
        }
    }
}
