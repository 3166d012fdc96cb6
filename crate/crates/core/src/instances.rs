//! Adversarial and synthetic instance generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};
use crate::model::{Agent, Instance, LabelSet, ProblemParams};
use crate::rng::stream;

/// A generated stream together with the positions where each value level
/// (or batch) ends. Every prefix `1..=T` is a stopping point.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub instance: Instance,
    pub level_ends: Vec<usize>,
}

impl Family {
    pub fn prefixes(&self) -> impl Iterator<Item = Instance> + '_ {
        (1..=self.instance.len()).map(|t| self.instance.prefix(t))
    }
}

fn check_step(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(OmcsError::Domain(format!("grid step {delta} must be positive")));
    }
    Ok(())
}

/// Levels `1, 1+δ, …` up to `top` (inclusive, with a small tolerance).
fn grid(delta: f64, top: f64) -> impl Iterator<Item = f64> {
    (0..)
        .map(move |n| 1.0 + n as f64 * delta)
        .take_while(move |v| *v <= top + 1e-9)
        .map(move |v| v.min(top))
}

/// Non-decreasing ramp: at each level `v`, `B` copies of every class still
/// eligible (`θ_j ≥ v`) followed by `B` copies of the agent labelled with
/// all eligible classes. The multi-labelled group is emitted when every
/// class is eligible or at least two are.
pub fn gen_hard_gfq(params: &ProblemParams, delta: f64) -> Result<Family> {
    params.validate()?;
    check_step(delta)?;
    let b = params.budget;
    let k = params.num_classes;
    let mut agents = Vec::new();
    let mut level_ends = Vec::new();
    for v in grid(delta, params.theta_max()) {
        let eligible: Vec<usize> = (0..k).filter(|&j| params.theta[j] + 1e-12 >= v).collect();
        for &j in &eligible {
            agents.extend(std::iter::repeat_n(Agent::new(v, LabelSet::single(j)), b));
        }
        if eligible.len() == k || eligible.len() >= 2 {
            let all = LabelSet::from_classes(eligible.iter().copied());
            agents.extend(std::iter::repeat_n(Agent::new(v, all), b));
        }
        level_ends.push(agents.len());
    }
    Ok(Family {
        instance: Instance::new(params.clone(), agents)?,
        level_ends,
    })
}

/// Class-by-class ramps: class 1 from 1 to `θ_1`, then class 2 from 1 to
/// `θ_2`, …, with `B` single-labelled copies per level.
pub fn gen_hard_pf(params: &ProblemParams, delta: f64) -> Result<Family> {
    params.validate()?;
    check_step(delta)?;
    let mut agents = Vec::new();
    let mut level_ends = Vec::new();
    for (j, &theta) in params.theta.iter().enumerate() {
        for v in grid(delta, theta) {
            agents.extend(std::iter::repeat_n(Agent::new(v, LabelSet::single(j)), params.budget));
            level_ends.push(agents.len());
        }
    }
    Ok(Family {
        instance: Instance::new(params.clone(), agents)?,
        level_ends,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LabelModel {
    /// One label drawn uniformly.
    SingleUniform,
    /// A uniform primary label plus each other label with probability `p`.
    Multi { p: f64 },
}

/// `T` agents with labels from `model` and values uniform on
/// `[1, min_{j ∈ labels} θ_j]`.
pub fn gen_synthetic(params: &ProblemParams, t: usize, seed: u64, model: LabelModel) -> Result<Instance> {
    params.validate()?;
    if let LabelModel::Multi { p } = model {
        if !(0.0..=1.0).contains(&p) {
            return Err(OmcsError::Domain(format!("label probability {p} outside [0, 1]")));
        }
    }
    let k = params.num_classes;
    let mut rng = stream(seed);
    let agents = (0..t)
        .map(|_| {
            let primary = rng.random_range(0..k);
            let labels = match model {
                LabelModel::SingleUniform => LabelSet::single(primary),
                LabelModel::Multi { p } => LabelSet::from_classes(
                    (0..k).filter(|&j| j == primary || rng.random::<f64>() < p),
                ),
            };
            let cap = params.value_cap(labels);
            let v = if cap > 1.0 { rng.random_range(1.0..=cap) } else { 1.0 };
            Agent::new(v, labels)
        })
        .collect();
    Instance::new(params.clone(), agents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(b: usize, theta: &[f64]) -> ProblemParams {
        ProblemParams::new(b, theta.to_vec()).unwrap()
    }

    fn pairs(inst: &Instance) -> Vec<(f64, Vec<usize>)> {
        inst.agents.iter().map(|a| (a.value, a.labels.iter().collect())).collect()
    }

    #[test]
    fn degenerate_gfq_grid() {
        let f = gen_hard_gfq(&params(3, &[1.0]), 0.1).unwrap();
        assert_eq!(f.instance.len(), 6);
        assert_eq!(f.level_ends, vec![6]);
        assert!(f.instance.agents.iter().all(|a| a.value == 1.0));
    }

    #[test]
    fn gfq_layout() {
        let f = gen_hard_gfq(&params(2, &[2.0, 4.0]), 1.0).unwrap();
        let p = pairs(&f.instance);
        assert_eq!(
            &p[..6],
            &[
                (1.0, vec![0]),
                (1.0, vec![0]),
                (1.0, vec![1]),
                (1.0, vec![1]),
                (1.0, vec![0, 1]),
                (1.0, vec![0, 1]),
            ]
        );
        // Level 3 exceeds θ_1: only class 2 remains.
        let l3 = &p[f.level_ends[1]..f.level_ends[2]];
        assert_eq!(l3, &[(3.0, vec![1]), (3.0, vec![1])]);
        assert_eq!(f.level_ends.len(), 4);
        assert_eq!(f.prefixes().count(), f.instance.len());
    }

    #[test]
    fn pf_layout() {
        let f = gen_hard_pf(&params(1, &[2.0]), 0.5).unwrap();
        assert_eq!(pairs(&f.instance), vec![(1.0, vec![0]), (1.5, vec![0]), (2.0, vec![0])]);
        let f = gen_hard_pf(&params(1, &[2.0, 3.0]), 1.0).unwrap();
        let vals: Vec<f64> = f.instance.agents.iter().map(|a| a.value).collect();
        assert_eq!(vals, vec![1.0, 2.0, 1.0, 2.0, 3.0]);
        let f = gen_hard_pf(&params(2, &[2.0, 3.0]), 5.0).unwrap();
        assert_eq!(f.instance.len(), 4);
        assert!(gen_hard_pf(&params(2, &[2.0]), 0.0).is_err());
    }

    #[test]
    fn synthetic_models() {
        let p = params(5, &[5.0, 10.0, 15.0]);
        let a = gen_synthetic(&p, 50, 7, LabelModel::Multi { p: 0.3 }).unwrap();
        let b = gen_synthetic(&p, 50, 7, LabelModel::Multi { p: 0.3 }).unwrap();
        assert_eq!(a, b);
        let all = gen_synthetic(&p, 50, 1, LabelModel::Multi { p: 1.0 }).unwrap();
        assert!(all
            .agents
            .iter()
            .all(|a| a.labels == LabelSet::all(3) && a.value <= 5.0));
        let one = gen_synthetic(&params(2, &[4.0]), 20, 1, LabelModel::SingleUniform).unwrap();
        assert!(one.agents.iter().all(|a| a.labels == LabelSet::single(0)));
    }
}
