//! Offline optima, worst-case allocations and Monte Carlo estimation.
//!
//! The GFQ-constrained oracles have two exact routes. For short streams they
//! enumerate subsets directly. For longer streams they use the fact that
//! agents sharing a label set are interchangeable apart from their values:
//! an optimal allocation takes the top `c_L` agents of each label group `L`
//! to meet the quotas and then fills the remaining budget greedily. Only
//! minimal covering vectors `c` need to be considered, and every minimal
//! cover uses at most `M` units.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;

use crate::error::{OmcsError, Result};
use crate::model::{Agent, Allocation, GfqSpec, Instance, LabelSet, TOL};
use crate::policy::Policy;
use crate::rng::sub_stream;
use crate::stats::Moments;

/// Streams up to this length are solved by exhaustive enumeration.
pub const EXHAUSTIVE_CUTOFF: usize = 20;

/// Above this many compositions the Nash-welfare oracle switches to local
/// search.
const NSW_ENUMERATION_LIMIT: u128 = 2_000_000;

/// Agents sharing one label set, sorted by decreasing value (earliest first
/// among ties).
#[derive(Debug, Clone)]
pub struct LabelGroup {
    pub labels: LabelSet,
    pub desc: Vec<(f64, usize)>,
}

pub fn group_by_labels(agents: &[Agent]) -> Vec<LabelGroup> {
    let mut map: BTreeMap<LabelSet, Vec<(f64, usize)>> = BTreeMap::new();
    for (t, a) in agents.iter().enumerate() {
        map.entry(a.labels).or_default().push((a.value, t));
    }
    map.into_iter()
        .map(|(labels, mut desc)| {
            desc.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            LabelGroup { labels, desc }
        })
        .collect()
}

fn allocation_from_indices(len: usize, chosen: impl IntoIterator<Item = usize>) -> Allocation {
    let mut x = vec![false; len];
    for t in chosen {
        x[t] = true;
    }
    Allocation::integral(x)
}

/// Unconstrained offline optimum: the `B` most valuable agents.
pub fn offline_opt(instance: &Instance) -> (f64, Allocation) {
    let mut order: Vec<usize> = (0..instance.len()).collect();
    order.sort_by(|&a, &b| {
        instance.agents[b]
            .value
            .total_cmp(&instance.agents[a].value)
            .then(a.cmp(&b))
    });
    order.truncate(instance.budget());
    let value = order.iter().map(|&t| instance.agents[t].value).sum();
    (value, allocation_from_indices(instance.len(), order))
}

/// Fails with the first class whose quota cannot be met.
pub fn check_gfq_feasible(instance: &Instance, spec: &GfqSpec) -> Result<()> {
    spec.validate(&instance.params)?;
    let mut avail = vec![0usize; instance.num_classes()];
    for a in &instance.agents {
        for j in a.labels.iter() {
            avail[j] += 1;
        }
    }
    for (j, (&n, &m)) in avail.iter().zip(&spec.quotas).enumerate() {
        if n < m {
            return Err(OmcsError::InfeasibleQuota {
                class: j + 1,
                reason: format!("quota {m} but only {n} eligible agents arrive"),
            });
        }
    }
    Ok(())
}

/// Offline optimum under the budget and the GFQ quotas.
pub fn offline_opt_gfq(instance: &Instance, spec: &GfqSpec) -> Result<(f64, Allocation)> {
    check_gfq_feasible(instance, spec)?;
    if instance.len() <= EXHAUSTIVE_CUTOFF {
        offline_opt_gfq_exhaustive(instance, spec)
    } else {
        offline_opt_gfq_grouped(instance, spec)
    }
}

/// GFQ-feasible integral allocation of minimum total value (no padding).
pub fn worst_feasible_gfq(instance: &Instance, spec: &GfqSpec) -> Result<Allocation> {
    check_gfq_feasible(instance, spec)?;
    if instance.len() <= EXHAUSTIVE_CUTOFF {
        worst_feasible_gfq_exhaustive(instance, spec)
    } else {
        worst_feasible_gfq_grouped(instance, spec)
    }
}

/// Worst allocation for the unconstrained advice model: accept nobody.
pub fn worst_allocation(instance: &Instance) -> Allocation {
    Allocation::zeros(instance.len())
}

struct SubsetSearch<'a> {
    agents: &'a [Agent],
    quotas: &'a [usize],
    budget: usize,
    maximize: bool,
    /// suffix[t][j]: agents at positions >= t labelled with class j.
    suffix: Vec<Vec<usize>>,
    counts: Vec<usize>,
    current: Vec<bool>,
    best: Option<(f64, Vec<bool>)>,
}

impl SubsetSearch<'_> {
    fn dfs(&mut self, t: usize, taken: usize, value: f64) {
        for (j, &m) in self.quotas.iter().enumerate() {
            if self.counts[j] + self.suffix[t][j] < m {
                return;
            }
        }
        if t == self.agents.len() {
            let better = match &self.best {
                None => true,
                Some((b, _)) if self.maximize => value > *b,
                Some((b, _)) => value < *b,
            };
            if better {
                self.best = Some((value, self.current.clone()));
            }
            return;
        }
        let a = self.agents[t];
        let include_first = self.maximize;
        for include in [include_first, !include_first] {
            if include {
                if taken >= self.budget {
                    continue;
                }
                self.current[t] = true;
                for j in a.labels.iter() {
                    self.counts[j] += 1;
                }
                self.dfs(t + 1, taken + 1, value + a.value);
                for j in a.labels.iter() {
                    self.counts[j] -= 1;
                }
                self.current[t] = false;
            } else {
                self.dfs(t + 1, taken, value);
            }
        }
    }
}

fn subset_search(instance: &Instance, spec: &GfqSpec, maximize: bool) -> Result<(f64, Allocation)> {
    let k = instance.num_classes();
    let n = instance.len();
    let mut suffix = vec![vec![0usize; k]; n + 1];
    for t in (0..n).rev() {
        suffix[t] = suffix[t + 1].clone();
        for j in instance.agents[t].labels.iter() {
            suffix[t][j] += 1;
        }
    }
    let mut search = SubsetSearch {
        agents: &instance.agents,
        quotas: &spec.quotas,
        budget: instance.budget(),
        maximize,
        suffix,
        counts: vec![0; k],
        current: vec![false; n],
        best: None,
    };
    search.dfs(0, 0, 0.0);
    match search.best {
        Some((v, x)) => Ok((v, Allocation::integral(x))),
        None => Err(OmcsError::InfeasibleQuota {
            class: 0,
            reason: "no allocation within the budget meets every quota".into(),
        }),
    }
}

/// Exhaustive maximization over all subsets within the budget.
pub fn offline_opt_gfq_exhaustive(instance: &Instance, spec: &GfqSpec) -> Result<(f64, Allocation)> {
    check_gfq_feasible(instance, spec)?;
    subset_search(instance, spec, true)
}

/// Exhaustive minimization over all GFQ-feasible subsets.
pub fn worst_feasible_gfq_exhaustive(instance: &Instance, spec: &GfqSpec) -> Result<Allocation> {
    check_gfq_feasible(instance, spec)?;
    subset_search(instance, spec, false).map(|(_, x)| x)
}

/// Calls `visit` with every minimal covering count vector over `groups`.
fn for_each_minimal_cover<F: FnMut(&[usize])>(
    groups: &[LabelGroup],
    quotas: &[usize],
    mut visit: F,
) {
    let k = quotas.len();
    let caps: Vec<usize> = groups
        .iter()
        .map(|g| {
            let need = g.labels.iter().map(|j| quotas[j]).max().unwrap_or(0);
            need.min(g.desc.len())
        })
        .collect();
    let mut suffix = vec![vec![0usize; k]; groups.len() + 1];
    for g in (0..groups.len()).rev() {
        suffix[g] = suffix[g + 1].clone();
        for j in groups[g].labels.iter() {
            suffix[g][j] += caps[g];
        }
    }

    struct Ctx<'a, F> {
        groups: &'a [LabelGroup],
        quotas: &'a [usize],
        caps: Vec<usize>,
        suffix: Vec<Vec<usize>>,
        counts: Vec<usize>,
        c: Vec<usize>,
        visit: F,
    }

    fn rec<F: FnMut(&[usize])>(ctx: &mut Ctx<'_, F>, g: usize) {
        for (j, &m) in ctx.quotas.iter().enumerate() {
            if ctx.counts[j] + ctx.suffix[g][j] < m {
                return;
            }
        }
        if g == ctx.groups.len() {
            // Minimal: every used group covers some class sitting exactly at
            // its quota.
            let minimal = ctx.c.iter().enumerate().all(|(h, &n)| {
                n == 0
                    || ctx.groups[h]
                        .labels
                        .iter()
                        .any(|j| ctx.quotas[j] > 0 && ctx.counts[j] <= ctx.quotas[j])
            });
            if minimal {
                (ctx.visit)(&ctx.c);
            }
            return;
        }
        let labels = ctx.groups[g].labels;
        for n in 0..=ctx.caps[g] {
            ctx.c[g] = n;
            for j in labels.iter() {
                ctx.counts[j] += n;
            }
            rec(ctx, g + 1);
            for j in labels.iter() {
                ctx.counts[j] -= n;
            }
        }
        ctx.c[g] = 0;
    }

    let mut ctx = Ctx {
        groups,
        quotas,
        caps,
        suffix,
        counts: vec![0; k],
        c: vec![0; groups.len()],
        visit: &mut visit,
    };
    rec(&mut ctx, 0);
}

/// Value of covering with `c` and filling the rest of the budget greedily.
fn cover_fill_value(groups: &[LabelGroup], c: &[usize], budget: usize) -> f64 {
    let mut value: f64 = groups
        .iter()
        .zip(c)
        .map(|(g, &n)| g.desc[..n].iter().map(|p| p.0).sum::<f64>())
        .sum();
    let used: usize = c.iter().sum();
    let mut heads: Vec<usize> = c.to_vec();
    for _ in used..budget {
        let mut best: Option<(f64, usize, usize)> = None;
        for (g, group) in groups.iter().enumerate() {
            if let Some(&(v, t)) = group.desc.get(heads[g]) {
                if best.is_none_or(|(bv, bt, _)| v > bv || (v == bv && t < bt)) {
                    best = Some((v, t, g));
                }
            }
        }
        match best {
            Some((v, _, g)) => {
                value += v;
                heads[g] += 1;
            }
            None => break,
        }
    }
    value
}

fn cover_fill_indices(groups: &[LabelGroup], c: &[usize], budget: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = groups
        .iter()
        .zip(c)
        .flat_map(|(g, &n)| g.desc[..n].iter().map(|p| p.1))
        .collect();
    let mut rest: Vec<(f64, usize)> = groups
        .iter()
        .zip(c)
        .flat_map(|(g, &n)| g.desc[n..].iter().copied())
        .collect();
    rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let room = budget.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(room).map(|p| p.1));
    chosen
}

/// Exact GFQ optimum via minimal covers over label groups.
pub fn offline_opt_gfq_grouped(instance: &Instance, spec: &GfqSpec) -> Result<(f64, Allocation)> {
    check_gfq_feasible(instance, spec)?;
    let groups = group_by_labels(&instance.agents);
    let budget = instance.budget();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_minimal_cover(&groups, &spec.quotas, |c| {
        let v = cover_fill_value(&groups, c, budget);
        if best.as_ref().is_none_or(|(b, _)| v > *b + TOL) {
            best = Some((v, c.to_vec()));
        }
    });
    let (_, c) = best.ok_or_else(|| OmcsError::Invariant("no cover found".into()))?;
    let chosen = cover_fill_indices(&groups, &c, budget);
    let alloc = allocation_from_indices(instance.len(), chosen);
    let value = crate::model::total_value(instance, &alloc)?;
    Ok((value, alloc))
}

fn bottom(g: &LabelGroup, n: usize) -> impl Iterator<Item = (f64, usize)> + '_ {
    g.desc[g.desc.len() - n..].iter().copied()
}

/// Exact minimum-value GFQ-feasible allocation via minimal covers.
pub fn worst_feasible_gfq_grouped(instance: &Instance, spec: &GfqSpec) -> Result<Allocation> {
    check_gfq_feasible(instance, spec)?;
    let groups = group_by_labels(&instance.agents);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_minimal_cover(&groups, &spec.quotas, |c| {
        let v: f64 = groups
            .iter()
            .zip(c)
            .map(|(g, &n)| bottom(g, n).map(|p| p.0).sum::<f64>())
            .sum();
        if best.as_ref().is_none_or(|(b, _)| v < *b - TOL) {
            best = Some((v, c.to_vec()));
        }
    });
    let (_, c) = best.ok_or_else(|| OmcsError::Invariant("no cover found".into()))?;
    let chosen = groups
        .iter()
        .zip(&c)
        .flat_map(|(g, &n)| bottom(g, n).map(|p| p.1));
    Ok(allocation_from_indices(instance.len(), chosen))
}

/// Lexicographic Nash-welfare score: classes served, log-utility sum, total
/// value. Classes without any eligible agent are ignored.
fn nsw_score(utilities: &[f64], present: &[bool], total: f64) -> (usize, f64, f64) {
    let mut served = 0;
    let mut logs = 0.0;
    for (u, &p) in utilities.iter().zip(present) {
        if p && *u > 0.0 {
            served += 1;
            logs += u.ln();
        }
    }
    (served, logs, total)
}

fn score_cmp(a: &(usize, f64, f64), b: &(usize, f64, f64)) -> Ordering {
    a.0.cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
}

/// Integral allocation maximizing Nash social welfare `Σ_j ln U_j` within
/// the budget (ties broken by total value). This is the proportionally fair
/// target used as perfect advice.
pub fn offline_nsw_opt(instance: &Instance) -> Allocation {
    let k = instance.num_classes();
    let groups = group_by_labels(&instance.agents);
    let mut present = vec![false; k];
    for a in &instance.agents {
        for j in a.labels.iter() {
            present[j] = true;
        }
    }
    let total_units = instance.budget().min(instance.len());
    if total_units == 0 {
        return Allocation::zeros(instance.len());
    }
    let prefix: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut acc = vec![0.0];
            for &(v, _) in &g.desc {
                acc.push(acc.last().unwrap() + v);
            }
            acc
        })
        .collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.desc.len()).collect();
    let evaluate = |counts: &[usize]| {
        let mut u = vec![0.0; k];
        let mut total = 0.0;
        for (g, &n) in counts.iter().enumerate() {
            let s = prefix[g][n];
            total += s;
            for j in groups[g].labels.iter() {
                u[j] += s;
            }
        }
        nsw_score(&u, &present, total)
    };

    let counts = if count_compositions(&sizes, total_units) <= NSW_ENUMERATION_LIMIT {
        let mut best: Option<((usize, f64, f64), Vec<usize>)> = None;
        let mut current = vec![0usize; sizes.len()];
        enumerate_compositions(&sizes, total_units, 0, &mut current, &mut |c| {
            let s = evaluate(c);
            if best
                .as_ref()
                .is_none_or(|(b, _)| score_cmp(&s, b) == Ordering::Greater)
            {
                best = Some((s, c.to_vec()));
            }
        });
        best.map(|b| b.1).unwrap_or_else(|| vec![0; sizes.len()])
    } else {
        nsw_local_search(&sizes, total_units, &evaluate)
    };
    let chosen = groups
        .iter()
        .zip(&counts)
        .flat_map(|(g, &n)| g.desc[..n].iter().map(|p| p.1));
    allocation_from_indices(instance.len(), chosen)
}

fn count_compositions(sizes: &[usize], total: usize) -> u128 {
    // ways[s] = number of ways to pick counts summing to s.
    let mut ways = vec![0u128; total + 1];
    ways[0] = 1;
    for &cap in sizes {
        let mut next = vec![0u128; total + 1];
        for (s, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for n in 0..=cap.min(total - s) {
                next[s + n] = next[s + n].saturating_add(w);
            }
        }
        ways = next;
    }
    ways[total]
}

fn enumerate_compositions<F: FnMut(&[usize])>(
    sizes: &[usize],
    remaining: usize,
    g: usize,
    current: &mut Vec<usize>,
    visit: &mut F,
) {
    if g == sizes.len() {
        if remaining == 0 {
            visit(current);
        }
        return;
    }
    let rest_cap: usize = sizes[g + 1..].iter().sum();
    let lo = remaining.saturating_sub(rest_cap);
    for n in lo..=sizes[g].min(remaining) {
        current[g] = n;
        enumerate_compositions(sizes, remaining - n, g + 1, current, visit);
    }
    current[g] = 0;
}

fn nsw_local_search<E>(sizes: &[usize], total: usize, evaluate: &E) -> Vec<usize>
where
    E: Fn(&[usize]) -> (usize, f64, f64),
{
    // Greedy marginal gains, then unit exchanges until no move improves.
    let mut counts = vec![0usize; sizes.len()];
    for _ in 0..total {
        let mut best: Option<((usize, f64, f64), usize)> = None;
        for g in 0..sizes.len() {
            if counts[g] < sizes[g] {
                counts[g] += 1;
                let s = evaluate(&counts);
                counts[g] -= 1;
                if best
                    .as_ref()
                    .is_none_or(|(b, _)| score_cmp(&s, b) == Ordering::Greater)
                {
                    best = Some((s, g));
                }
            }
        }
        match best {
            Some((_, g)) => counts[g] += 1,
            None => break,
        }
    }
    let mut current = evaluate(&counts);
    loop {
        let mut improved = false;
        for from in 0..sizes.len() {
            for to in 0..sizes.len() {
                if from == to || counts[from] == 0 || counts[to] >= sizes[to] {
                    continue;
                }
                counts[from] -= 1;
                counts[to] += 1;
                let s = evaluate(&counts);
                if score_cmp(&s, &current) == Ordering::Greater
                    && (s.1 - current.1 > 1e-12 || s.0 > current.0 || s.2 - current.2 > 1e-12)
                {
                    current = s;
                    improved = true;
                } else {
                    counts[from] += 1;
                    counts[to] -= 1;
                }
            }
        }
        if !improved {
            return counts;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MinF(f64);

impl Eq for MinF {}

impl PartialOrd for MinF {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MinF {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Incremental unconstrained optimum over a growing prefix.
#[derive(Debug, Clone)]
pub struct PrefixOpt {
    budget: usize,
    heap: BinaryHeap<Reverse<MinF>>,
    sum: f64,
}

impl PrefixOpt {
    pub fn new(budget: usize) -> Self {
        PrefixOpt {
            budget,
            heap: BinaryHeap::new(),
            sum: 0.0,
        }
    }

    pub fn push(&mut self, value: f64) {
        if self.heap.len() < self.budget {
            self.heap.push(Reverse(MinF(value)));
            self.sum += value;
        } else if let Some(Reverse(MinF(min))) = self.heap.peek().copied() {
            if value > min {
                self.heap.pop();
                self.heap.push(Reverse(MinF(value)));
                self.sum += value - min;
            }
        }
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Incremental GFQ-constrained optimum over a growing prefix. Prefixes on
/// which the quotas cannot yet be met have no value.
#[derive(Debug, Clone)]
pub struct PrefixOptGfq {
    budget: usize,
    quotas: Vec<usize>,
    available: Vec<usize>,
    groups: Vec<LabelGroup>,
    seen: usize,
}

impl PrefixOptGfq {
    pub fn new(budget: usize, spec: &GfqSpec) -> Self {
        PrefixOptGfq {
            budget,
            quotas: spec.quotas.clone(),
            available: vec![0; spec.quotas.len()],
            groups: Vec::new(),
            seen: 0,
        }
    }

    pub fn push(&mut self, agent: &Agent) {
        for j in agent.labels.iter() {
            self.available[j] += 1;
        }
        let t = self.seen;
        self.seen += 1;
        let pos = match self.groups.binary_search_by(|g| g.labels.cmp(&agent.labels)) {
            Ok(p) => p,
            Err(p) => {
                self.groups.insert(
                    p,
                    LabelGroup {
                        labels: agent.labels,
                        desc: Vec::new(),
                    },
                );
                p
            }
        };
        // Only the top `budget` agents of a group can ever be selected.
        let desc = &mut self.groups[pos].desc;
        let at = desc.partition_point(|&(v, _)| v >= agent.value);
        if at < self.budget {
            desc.insert(at, (agent.value, t));
            desc.truncate(self.budget);
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.available
            .iter()
            .zip(&self.quotas)
            .all(|(&n, &m)| n >= m)
    }

    pub fn value(&self) -> Option<f64> {
        if !self.is_feasible() {
            return None;
        }
        let mut best = f64::NEG_INFINITY;
        for_each_minimal_cover(&self.groups, &self.quotas, |c| {
            best = best.max(cover_fill_value(&self.groups, c, self.budget));
        });
        best.is_finite().then_some(best)
    }
}

/// Monte Carlo estimate of a policy's expected value and class utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub trials: usize,
    pub mean_value: f64,
    pub stderr_value: f64,
    pub mean_utilities: Vec<f64>,
    pub stderr_utilities: Vec<f64>,
    /// Mean expected decision per agent.
    pub mean_decisions: Vec<f64>,
    /// Fraction of runs in which at least one acceptance was truncated.
    pub truncation_rate: f64,
}

const CHUNK: usize = 256;

#[derive(Clone)]
struct Acc {
    value: Moments,
    utilities: Vec<Moments>,
    decisions: Vec<f64>,
    truncated: usize,
}

impl Acc {
    fn new(k: usize, t: usize) -> Self {
        Acc {
            value: Moments::default(),
            utilities: vec![Moments::default(); k],
            decisions: vec![0.0; t],
            truncated: 0,
        }
    }

    fn merge(&mut self, other: &Acc) {
        self.value.merge(&other.value);
        for (a, b) in self.utilities.iter_mut().zip(&other.utilities) {
            a.merge(b);
        }
        for (a, b) in self.decisions.iter_mut().zip(&other.decisions) {
            *a += b;
        }
        self.truncated += other.truncated;
    }
}

/// Runs `policy` for `trials` independent trials. Trial `i` uses the
/// sub-stream `mix_seed(seed, i)`; chunks of trials run in parallel and are
/// merged in a fixed order, so results are identical across thread counts.
pub fn mc_expectation(
    policy: &dyn Policy,
    instance: &Instance,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    if trials == 0 {
        return Err(OmcsError::Domain("trials must be at least 1".into()));
    }
    let k = instance.num_classes();
    let t_len = instance.len();
    let effective = if policy.is_deterministic() { 1 } else { trials };
    let n_chunks = effective.div_ceil(CHUNK);
    let partials: Vec<Result<Acc>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc::new(k, t_len);
            for i in c * CHUNK..((c + 1) * CHUNK).min(effective) {
                let mut rng = sub_stream(seed, i as u64);
                let out = policy.run(instance, &mut rng)?;
                let mut value = 0.0;
                let mut u = vec![0.0; k];
                for ((a, &x), d) in instance
                    .agents
                    .iter()
                    .zip(&out.decisions)
                    .zip(acc.decisions.iter_mut())
                {
                    *d += x;
                    if x != 0.0 {
                        value += a.value * x;
                        for j in a.labels.iter() {
                            u[j] += a.value * x;
                        }
                    }
                }
                acc.value.push(value);
                for (m, x) in acc.utilities.iter_mut().zip(u) {
                    m.push(x);
                }
                if out.truncations > 0 {
                    acc.truncated += 1;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = Acc::new(k, t_len);
    for p in partials {
        total.merge(&p?);
    }
    let n = effective as f64;
    Ok(McEstimate {
        trials: effective,
        mean_value: total.value.mean,
        stderr_value: total.value.stderr(),
        mean_utilities: total.utilities.iter().map(|m| m.mean).collect(),
        stderr_utilities: total.utilities.iter().map(|m| m.stderr()).collect(),
        mean_decisions: total.decisions.iter().map(|d| d / n).collect(),
        truncation_rate: total.truncated as f64 / n,
    })
}

/// Mean and standard error of the cumulative value after each prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrefix {
    pub trials: usize,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
}

/// Like [`mc_expectation`] but tracks the cumulative value at every prefix
/// length `1..=T` (index `t` holds the value after agent `t`).
pub fn mc_prefix_values(
    policy: &dyn Policy,
    instance: &Instance,
    trials: usize,
    seed: u64,
) -> Result<McPrefix> {
    if trials == 0 {
        return Err(OmcsError::Domain("trials must be at least 1".into()));
    }
    let t_len = instance.len();
    let effective = if policy.is_deterministic() { 1 } else { trials };
    let n_chunks = effective.div_ceil(CHUNK);
    let partials: Vec<Result<Vec<Moments>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Moments::default(); t_len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(effective) {
                let mut rng = sub_stream(seed, i as u64);
                let out = policy.run(instance, &mut rng)?;
                let mut cum = 0.0;
                for ((a, &x), m) in instance.agents.iter().zip(&out.decisions).zip(acc.iter_mut()) {
                    cum += a.value * x;
                    m.push(cum);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Moments::default(); t_len];
    for p in partials {
        for (a, b) in total.iter_mut().zip(&p?) {
            a.merge(b);
        }
    }
    Ok(McPrefix {
        trials: effective,
        means: total.iter().map(|m| m.mean).collect(),
        stderrs: total.iter().map(|m| m.stderr()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{class_counts, gfq_satisfied, total_value, ProblemParams};
    use crate::policy::RunOutput;
    use crate::rng::{stream, StreamRng};
    use rand::Rng;

    fn inst(b: usize, theta: &[f64], agents: &[(f64, &[usize])]) -> Instance {
        Instance::new(
            ProblemParams::new(b, theta.to_vec()).unwrap(),
            agents
                .iter()
                .map(|(v, l)| Agent::new(*v, LabelSet::from_classes(l.iter().map(|c| c - 1))))
                .collect(),
        )
        .unwrap()
    }

    fn random_instance(rng: &mut StreamRng, max_t: usize, max_b: usize, k: usize) -> Instance {
        let t = rng.random_range(0..=max_t);
        let b = rng.random_range(1..=max_b);
        let theta: Vec<f64> = {
            let mut th: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..6.0)).collect();
            th.sort_by(f64::total_cmp);
            th
        };
        let params = ProblemParams::new(b, theta.clone()).unwrap();
        let agents = (0..t)
            .map(|_| {
                let mut bits = 0u64;
                while bits == 0 {
                    bits = rng.random_range(0..(1u64 << k));
                }
                let labels = LabelSet::from_bits(bits);
                let cap = params.value_cap(labels);
                // Repeated values exercise tie-breaking.
                let v = if rng.random_bool(0.3) {
                    1.0
                } else {
                    rng.random_range(1.0..=cap)
                };
                Agent::new(v, labels)
            })
            .collect();
        Instance::new(params, agents).unwrap()
    }

    #[test]
    fn offline_opt_examples() {
        let i = inst(2, &[5.0], &[(3.0, &[1]), (1.0, &[1]), (2.0, &[1])]);
        let (v, x) = offline_opt(&i);
        assert_eq!(v, 5.0);
        assert_eq!(x.decisions, vec![1.0, 0.0, 1.0]);

        let i = inst(5, &[5.0], &[(1.0, &[1]), (1.0, &[1]), (1.0, &[1])]);
        let (v, x) = offline_opt(&i);
        assert_eq!(v, 3.0);
        assert_eq!(x.decisions, vec![1.0; 3]);

        let i = inst(2, &[5.0], &[(2.0, &[1]), (2.0, &[1]), (2.0, &[1])]);
        let (v, x) = offline_opt(&i);
        assert_eq!(v, 4.0);
        assert_eq!(x.decisions, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn offline_opt_gfq_examples() {
        let i = inst(1, &[5.0, 5.0], &[(1.0, &[1]), (5.0, &[2])]);
        let (v, x) = offline_opt_gfq(&i, &GfqSpec::new(vec![1, 0])).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(x.decisions, vec![1.0, 0.0]);

        let i = inst(2, &[5.0, 5.0], &[(1.0, &[1, 2]), (5.0, &[2])]);
        let (v, x) = offline_opt_gfq(&i, &GfqSpec::new(vec![1, 1])).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(x.decisions, vec![1.0, 1.0]);

        let i = inst(2, &[5.0, 5.0], &[(1.0, &[2]), (5.0, &[2])]);
        match offline_opt_gfq(&i, &GfqSpec::new(vec![1, 0])) {
            Err(OmcsError::InfeasibleQuota { class, .. }) => assert_eq!(class, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn worst_feasible_examples() {
        let i = inst(2, &[5.0, 5.0], &[(1.0, &[1]), (3.0, &[2])]);
        let x = worst_feasible_gfq(&i, &GfqSpec::zeros(2)).unwrap();
        assert_eq!(x.decisions, vec![0.0, 0.0]);

        let i = inst(2, &[5.0], &[(1.0, &[1]), (3.0, &[1])]);
        let x = worst_feasible_gfq(&i, &GfqSpec::new(vec![1])).unwrap();
        assert_eq!(x.decisions, vec![1.0, 0.0]);

        // Brute force over the 8 subsets: {multi} and {single, single} both cost 2.
        let i = inst(3, &[5.0, 5.0], &[(2.0, &[1, 2]), (1.0, &[1]), (1.0, &[2])]);
        let spec = GfqSpec::new(vec![1, 1]);
        let x = worst_feasible_gfq(&i, &spec).unwrap();
        assert_eq!(total_value(&i, &x).unwrap(), 2.0);
        let g = worst_feasible_gfq_grouped(&i, &spec).unwrap();
        assert_eq!(total_value(&i, &g).unwrap(), 2.0);
    }

    #[test]
    fn worst_allocation_is_empty() {
        let i = inst(1, &[5.0], &[(5.0, &[1])]);
        assert_eq!(worst_allocation(&i).decisions, vec![0.0]);
        assert!(worst_allocation(&i.prefix(0)).is_empty());
    }

    #[test]
    fn grouped_oracles_match_exhaustive() {
        let mut rng = stream(11);
        for _ in 0..300 {
            let k = rng.random_range(1..=3);
            let i = random_instance(&mut rng, 12, 4, k);
            let quotas: Vec<usize> = (0..k).map(|_| rng.random_range(0..=2)).collect();
            let spec = GfqSpec::new(quotas);
            let feasible = check_gfq_feasible(&i, &spec).is_ok();
            let exh = offline_opt_gfq_exhaustive(&i, &spec);
            let grp = offline_opt_gfq_grouped(&i, &spec);
            assert_eq!(exh.is_ok(), feasible);
            assert_eq!(grp.is_ok(), feasible);
            if !feasible {
                continue;
            }
            let (ve, xe) = exh.unwrap();
            let (vg, xg) = grp.unwrap();
            assert!((ve - vg).abs() < 1e-9, "{ve} vs {vg}");
            assert!(gfq_satisfied(&i, &xg, &spec).unwrap());
            assert!(gfq_satisfied(&i, &xe, &spec).unwrap());
            xg.validate(i.budget()).unwrap();

            let we = worst_feasible_gfq_exhaustive(&i, &spec).unwrap();
            let wg = worst_feasible_gfq_grouped(&i, &spec).unwrap();
            let (a, b) = (total_value(&i, &we).unwrap(), total_value(&i, &wg).unwrap());
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            assert!(gfq_satisfied(&i, &wg, &spec).unwrap());
            assert!(b <= vg + 1e-9);

            let (vu, _) = offline_opt(&i);
            assert!(vu + 1e-9 >= vg);
        }
    }

    #[test]
    fn prefix_evaluators_match_batch_oracles() {
        let mut rng = stream(5);
        for _ in 0..40 {
            let k = rng.random_range(1..=3);
            let i = random_instance(&mut rng, 16, 4, k);
            let spec = GfqSpec::new((0..k).map(|_| rng.random_range(0..=1)).collect());
            if spec.validate(&i.params).is_err() {
                continue;
            }
            let mut p = PrefixOpt::new(i.budget());
            let mut q = PrefixOptGfq::new(i.budget(), &spec);
            for t in 0..i.len() {
                p.push(i.agents[t].value);
                q.push(&i.agents[t]);
                let pre = i.prefix(t + 1);
                assert!((p.value() - offline_opt(&pre).0).abs() < 1e-9);
                match offline_opt_gfq(&pre, &spec) {
                    Ok((v, _)) => assert!((q.value().unwrap() - v).abs() < 1e-9),
                    Err(_) => assert!(q.value().is_none()),
                }
            }
        }
    }

    #[test]
    fn nsw_opt_serves_every_class_when_possible() {
        let i = inst(
            2,
            &[5.0, 10.0],
            &[(5.0, &[1]), (10.0, &[2]), (9.0, &[2]), (8.0, &[2])],
        );
        let x = offline_nsw_opt(&i);
        assert_eq!(x.decisions, vec![1.0, 1.0, 0.0, 0.0]);
        let counts = class_counts(&i, &x).unwrap();
        assert_eq!(counts, vec![1.0, 1.0]);
    }

    #[test]
    fn nsw_opt_matches_brute_force() {
        let mut rng = stream(21);
        for _ in 0..100 {
            let k = rng.random_range(1..=3);
            let i = random_instance(&mut rng, 10, 4, k);
            let x = offline_nsw_opt(&i);
            x.validate(i.budget()).unwrap();
            let present: Vec<bool> = (0..k)
                .map(|j| i.agents.iter().any(|a| a.labels.contains(j)))
                .collect();
            let score = |x: &Allocation| {
                let u = crate::model::class_utilities(&i, x).unwrap();
                nsw_score(&u, &present, total_value(&i, x).unwrap())
            };
            let got = score(&x);
            let n = i.len();
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize > i.budget() {
                    continue;
                }
                let y = Allocation::integral((0..n).map(|t| mask & (1 << t) != 0));
                let s = score(&y);
                assert!(
                    s.0 < got.0 || (s.0 == got.0 && s.1 <= got.1 + 1e-9),
                    "{s:?} beats {got:?}"
                );
            }
        }
    }

    #[test]
    fn nsw_local_search_agrees_with_enumeration_on_small_case() {
        let i = inst(
            3,
            &[5.0, 10.0],
            &[(5.0, &[1]), (2.0, &[1]), (10.0, &[2]), (9.0, &[2]), (3.0, &[1, 2])],
        );
        let groups = group_by_labels(&i.agents);
        let sizes: Vec<usize> = groups.iter().map(|g| g.desc.len()).collect();
        let present = vec![true, true];
        let evaluate = |counts: &[usize]| {
            let mut u = vec![0.0; 2];
            let mut total = 0.0;
            for (g, &n) in counts.iter().enumerate() {
                let s: f64 = groups[g].desc[..n].iter().map(|p| p.0).sum();
                total += s;
                for j in groups[g].labels.iter() {
                    u[j] += s;
                }
            }
            nsw_score(&u, &present, total)
        };
        let ls = nsw_local_search(&sizes, 3, &evaluate);
        let x = offline_nsw_opt(&i);
        let chosen: usize = x.decisions.iter().filter(|&&d| d == 1.0).count();
        assert_eq!(chosen, 3);
        let exact = {
            let mut c = vec![0; sizes.len()];
            for (g, grp) in groups.iter().enumerate() {
                c[g] = grp.desc.iter().filter(|p| x.decisions[p.1] == 1.0).count();
            }
            evaluate(&c)
        };
        assert!((evaluate(&ls).1 - exact.1).abs() < 1e-9);
    }

    struct Coin;

    impl Policy for Coin {
        fn name(&self) -> String {
            "coin".into()
        }
        fn run(&self, instance: &Instance, rng: &mut StreamRng) -> Result<RunOutput> {
            Ok(RunOutput::new(
                instance
                    .agents
                    .iter()
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect(),
            ))
        }
    }

    struct AcceptAll;

    impl Policy for AcceptAll {
        fn name(&self) -> String {
            "all".into()
        }
        fn run(&self, instance: &Instance, _: &mut StreamRng) -> Result<RunOutput> {
            Ok(RunOutput::new(vec![1.0; instance.len()]))
        }
        fn is_deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn mc_deterministic_policy_has_zero_error() {
        let i = inst(2, &[5.0], &[(2.0, &[1]), (3.0, &[1])]);
        let est = mc_expectation(&AcceptAll, &i, 1000, 1).unwrap();
        assert_eq!(est.mean_value, 5.0);
        assert_eq!(est.stderr_value, 0.0);
        assert!(mc_expectation(&AcceptAll, &i, 0, 1).is_err());
    }

    #[test]
    fn mc_bernoulli_mean() {
        let i = inst(1, &[5.0], &[(1.0, &[1])]);
        let est = mc_expectation(&Coin, &i, 100_000, 3).unwrap();
        assert!((est.mean_value - 0.5).abs() <= 4.0 * est.stderr_value);
        assert!((est.stderr_value - 0.5 / (100_000f64).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn mc_is_reproducible() {
        let i = inst(3, &[5.0], &[(1.0, &[1]), (2.0, &[1]), (4.0, &[1])]);
        let a = mc_expectation(&Coin, &i, 5000, 9).unwrap();
        let b = mc_expectation(&Coin, &i, 5000, 9).unwrap();
        assert_eq!(a.mean_value.to_bits(), b.mean_value.to_bits());
        assert_eq!(a, b);
        let p = mc_prefix_values(&Coin, &i, 5000, 9).unwrap();
        assert!((p.means[2] - a.mean_value).abs() < 1e-9);
    }
}
