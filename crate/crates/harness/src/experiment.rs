//! Experiment runner and report emission.
//!
//! CSV schemas (one header row, comma separated):
//!
//! - `allocation.csv`: `policy,class,utility,stderr,units` — Monte Carlo
//!   mean utility and mean units per class (1-based) on the first instance.
//! - `ratios.csv`: `policy,comparator,prefix,opt,mean_alg,stderr,ratio` —
//!   hard-instance prefixes.
//! - `cr.csv`: `policy,comparator,instance,opt,mean_alg,stderr,ratio` — one
//!   row per (policy, instance).
//! - `xi_sweep.csv`: `xi,variant,epsilon,rho,mean_pf,max_pf` — empirical
//!   fairness of LiLA variants across instances.
//!
//! Every run also writes `config.json` (the full config, seed included),
//! embeds the same JSON in each SVG's `<desc>`, and writes `summary.md`.

use std::fs;
use std::path::{Path, PathBuf};

use omcs::dgfq::DSetAside;
use omcs::frac_gfq::{FracGfq, RSetAsideGfq};
use omcs::instances::{gen_hard_gfq, gen_hard_pf, gen_synthetic, LabelModel};
use omcs::io::read_instance;
use omcs::lila::{make_advice, AdviceStream, AdviceTarget, LilaGfq, LilaPf};
use omcs::model::{class_utilities, empirical_pf_from_utilities};
use omcs::oracles::{mc_expectation, mc_prefix_values, offline_opt, offline_opt_gfq, PrefixOpt, PrefixOptGfq};
use omcs::pf::{FracPf, RSetAsidePf};
use omcs::rng::{mix_seed, StreamRng};
use omcs::{GfqSpec, Instance, Policy, ProblemParams, RunOutput};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind, InstanceSource, LabelChoice};
use crate::error::{HarnessError, Result};
use crate::svg::{bar_chart, line_chart, Series};
use crate::trace::{ingest_trace, TraceColumns, ValueMap};

const ADVICE_SALT: u64 = 0xad51_ce00;
const MC_SALT: u64 = 0x3c_0000;

/// A fixed decision sequence (advice replayed as a policy).
#[derive(Debug, Clone)]
pub struct Fixed {
    pub name: String,
    pub decisions: Vec<f64>,
}

impl Policy for Fixed {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn run(&self, instance: &Instance, _rng: &mut StreamRng) -> omcs::Result<RunOutput> {
        if instance.len() != self.decisions.len() {
            return Err(omcs::OmcsError::Alignment {
                expected: instance.len(),
                got: self.decisions.len(),
            });
        }
        Ok(RunOutput::new(self.decisions.clone()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Whether a policy id is scored against the GFQ-constrained optimum.
pub fn is_gfq_policy(id: &str) -> bool {
    matches!(id, "d-gfq" | "r-gfq" | "frac-gfq" | "lila-gfq" | "adv-gfq")
}

fn needs_advice(id: &str) -> bool {
    matches!(id, "lila-pf" | "lila-gfq" | "adv-pf" | "adv-gfq")
}

fn advice_for(id: &str, instance: &Instance, spec: &GfqSpec, xi: f64, seed: u64) -> Result<AdviceStream> {
    let target = if is_gfq_policy(id) {
        AdviceTarget::Gfq(spec.clone())
    } else {
        AdviceTarget::Pf
    };
    Ok(make_advice(instance, &target, xi, seed)?)
}

/// Builds policy `id` for `params`. Advice-driven policies derive their
/// advice from `instance` with the config's `xi`.
pub fn build_policy(
    id: &str,
    cfg: &ExperimentConfig,
    params: &ProblemParams,
    spec: &GfqSpec,
    instance: &Instance,
    advice_seed: u64,
) -> Result<Box<dyn Policy>> {
    let p = params.clone();
    let pf = |w: f64| RSetAsidePf::new(p.clone(), w);
    Ok(match id {
        "d-gfq" => Box::new(DSetAside::new(p, spec.clone())?),
        "r-gfq" => Box::new(RSetAsideGfq::new(p, spec.clone())?),
        "frac-gfq" => Box::new(FracGfq::new(p, spec.clone())?),
        "r-pf" => Box::new(pf(cfg.b_frac)?),
        "beta-pf" => Box::new(pf(0.0)?),
        "alpha-cr" => Box::new(pf(1.0)?),
        "frac-pf" => Box::new(FracPf(pf(cfg.b_frac)?)),
        "lila-pf" | "lila-gfq" | "adv-pf" | "adv-gfq" => {
            let adv = advice_for(id, instance, spec, cfg.xi, advice_seed)?;
            match id {
                "lila-pf" => Box::new(LilaPf::new(p, cfg.epsilon, adv)?.with_mode(cfg.mix)),
                "lila-gfq" => Box::new(LilaGfq::new(p, spec.clone(), cfg.epsilon, adv)?.with_mode(cfg.mix)),
                _ => Box::new(Fixed {
                    name: id.into(),
                    decisions: adv.allocation().decisions,
                }),
            }
        }
        other => return Err(HarnessError::UnknownPolicy(other.into())),
    })
}

/// Problem parameters, quotas and the instance list a config describes.
#[derive(Debug, Clone)]
pub struct Setup {
    pub params: ProblemParams,
    pub spec: GfqSpec,
    pub instances: Vec<Instance>,
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let mut params = ProblemParams::new(cfg.budget, cfg.theta.clone())?;
    let mut spec = if cfg.quotas.is_empty() {
        GfqSpec::zeros(cfg.theta.len())
    } else {
        GfqSpec::new(cfg.quotas.clone())
    };
    let instances = match cfg.instance {
        InstanceSource::Synthetic => {
            let model = match cfg.label_model {
                LabelChoice::Single => LabelModel::SingleUniform,
                LabelChoice::Multi => LabelModel::Multi { p: cfg.label_p },
            };
            (0..cfg.instances.max(1))
                .map(|i| gen_synthetic(&params, cfg.agents, mix_seed(cfg.seed, i as u64), model))
                .collect::<omcs::Result<Vec<_>>>()?
        }
        InstanceSource::HardGfq => vec![gen_hard_gfq(&params, cfg.delta)?.instance],
        InstanceSource::HardPf => vec![gen_hard_pf(&params, cfg.delta)?.instance],
        InstanceSource::File => {
            let path = cfg.path.as_deref().expect("validated");
            let file = read_instance(std::io::BufReader::new(fs::File::open(path)?))?;
            params = file.instance.params.clone();
            if let Some(q) = file.quotas {
                spec = q;
            }
            vec![file.instance]
        }
        InstanceSource::Trace => {
            let path = cfg.path.as_deref().expect("validated");
            let cols = TraceColumns {
                value: cfg.value_column.clone(),
                class: cfg.class_column.clone(),
                units: cfg.units_column.clone(),
            };
            let map = ValueMap {
                scale: cfg.value_scale,
                offset: cfg.value_offset,
            };
            let (inst, _) = ingest_trace(fs::File::open(path)?, &cols, map, &params, cfg.skip_bad)?;
            vec![inst]
        }
    };
    spec.validate(&params)?;
    Ok(Setup {
        params,
        spec,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub policy: String,
    pub class: usize,
    pub utility: f64,
    pub stderr: f64,
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub policy: String,
    pub comparator: String,
    pub prefix: usize,
    pub opt: f64,
    pub mean_alg: f64,
    pub stderr: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrRow {
    pub policy: String,
    pub comparator: String,
    pub instance: usize,
    pub opt: f64,
    pub mean_alg: f64,
    pub stderr: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiRow {
    pub xi: f64,
    pub variant: String,
    pub epsilon: f64,
    pub rho: f64,
    pub mean_pf: f64,
    pub max_pf: f64,
}

fn comparator(id: &str, spec: &GfqSpec) -> &'static str {
    if is_gfq_policy(id) && spec.total() > 0 {
        "opt-gfq"
    } else {
        "opt"
    }
}

fn ratio(opt: f64, alg: f64) -> f64 {
    if opt == 0.0 {
        1.0
    } else if alg <= 0.0 {
        f64::INFINITY
    } else {
        opt / alg
    }
}

/// Per-class Monte Carlo utilities and units on the first instance.
pub fn allocation_rows(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<AllocationRow>> {
    let inst = &setup.instances[0];
    let mut rows = Vec::new();
    for (pi, id) in cfg.policies.iter().enumerate() {
        let pol = build_policy(id, cfg, &setup.params, &setup.spec, inst, mix_seed(cfg.seed ^ ADVICE_SALT, 0))?;
        let est = mc_expectation(pol.as_ref(), inst, cfg.trials, mix_seed(cfg.seed ^ MC_SALT, pi as u64))?;
        for j in 0..setup.params.num_classes {
            let units = inst
                .agents
                .iter()
                .zip(&est.mean_decisions)
                .filter(|(a, _)| a.labels.contains(j))
                .map(|(_, x)| x)
                .sum();
            rows.push(AllocationRow {
                policy: id.clone(),
                class: j + 1,
                utility: est.mean_utilities[j],
                stderr: est.stderr_utilities[j],
                units,
            });
        }
    }
    Ok(rows)
}

/// Ratio curve over the prefixes of the (single) configured instance.
/// Prefixes on which the quotas are not yet satisfiable are skipped for
/// GFQ comparators.
pub fn hard_ratio_rows(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<RatioRow>> {
    let inst = &setup.instances[0];
    let b = setup.params.budget;
    let mut rows = Vec::new();
    for (pi, id) in cfg.policies.iter().enumerate() {
        let cmp = comparator(id, &setup.spec);
        let mut opt_gfq = PrefixOptGfq::new(b, &setup.spec);
        let mut opt = PrefixOpt::new(b);
        let mc_seed = mix_seed(cfg.seed ^ MC_SALT, pi as u64);
        let streamed = if needs_advice(id) {
            None
        } else {
            let pol = build_policy(id, cfg, &setup.params, &setup.spec, inst, 0)?;
            Some(mc_prefix_values(pol.as_ref(), inst, cfg.trials, mc_seed)?)
        };
        for t in 1..=inst.len() {
            let a = &inst.agents[t - 1];
            opt_gfq.push(a);
            opt.push(a.value);
            if t % cfg.prefix_stride != 0 && t != inst.len() {
                continue;
            }
            let o = if cmp == "opt-gfq" {
                match opt_gfq.value() {
                    Some(v) => v,
                    None => continue,
                }
            } else {
                opt.value()
            };
            let (mean, se) = match &streamed {
                Some(p) => (p.means[t - 1], p.stderrs[t - 1]),
                None => {
                    let pre = inst.prefix(t);
                    let pol = build_policy(id, cfg, &setup.params, &setup.spec, &pre, mix_seed(cfg.seed ^ ADVICE_SALT, t as u64))?;
                    let est = mc_expectation(pol.as_ref(), &pre, cfg.trials, mix_seed(mc_seed, t as u64))?;
                    (est.mean_value, est.stderr_value)
                }
            };
            rows.push(RatioRow {
                policy: id.clone(),
                comparator: cmp.into(),
                prefix: t,
                opt: o,
                mean_alg: mean,
                stderr: se,
                ratio: ratio(o, mean),
            });
        }
    }
    Ok(rows)
}

/// Empirical competitive ratio of each policy on each instance. Instances
/// on which the quotas cannot be met are skipped for GFQ comparators.
/// Instances are evaluated in parallel; rows come out in instance order.
pub fn cr_rows(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<CrRow>> {
    let per_instance: Vec<Result<Vec<CrRow>>> = setup
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| cr_rows_one(cfg, setup, i, inst))
        .collect();
    let mut rows = Vec::new();
    for r in per_instance {
        rows.extend(r?);
    }
    Ok(rows)
}

fn cr_rows_one(cfg: &ExperimentConfig, setup: &Setup, i: usize, inst: &Instance) -> Result<Vec<CrRow>> {
    let mut rows = Vec::new();
    let plain = offline_opt(inst).0;
    let gfq = if setup.spec.total() > 0 {
        offline_opt_gfq(inst, &setup.spec).ok().map(|r| r.0)
    } else {
        Some(plain)
    };
    for (pi, id) in cfg.policies.iter().enumerate() {
        let cmp = comparator(id, &setup.spec);
        let o = if cmp == "opt-gfq" {
            match gfq {
                Some(v) => v,
                None => continue,
            }
        } else {
            plain
        };
        let pol = build_policy(id, cfg, &setup.params, &setup.spec, inst, mix_seed(cfg.seed ^ ADVICE_SALT, i as u64))?;
        let est = mc_expectation(
            pol.as_ref(),
            inst,
            cfg.trials,
            mix_seed(mix_seed(cfg.seed ^ MC_SALT, pi as u64), i as u64),
        )?;
        rows.push(CrRow {
            policy: id.clone(),
            comparator: cmp.into(),
            instance: i,
            opt: o,
            mean_alg: est.mean_value,
            stderr: est.stderr_value,
            ratio: ratio(o, est.mean_value),
        });
    }
    Ok(rows)
}

/// Empirical fairness of the robust PF policy (`robust`), the advice alone
/// (`adv`) and LiLA at each `ε` of the grid, for each adversarial
/// probability `ξ`. The fairness of a variant on an instance is the
/// empirical PF ratio of its Monte Carlo mean utilities; rows report the
/// mean and maximum over instances (`inf` when some class is starved).
pub fn xi_rows(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<XiRow>> {
    let params = &setup.params;
    let robust = RSetAsidePf::new(params.clone(), 0.0)?;
    let beta = robust.config.alpha_beta().1;
    let robust_u: Vec<Vec<f64>> = setup
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            mc_expectation(&robust, inst, cfg.trials, mix_seed(cfg.seed ^ MC_SALT, i as u64)).map(|e| e.mean_utilities)
        })
        .collect::<omcs::Result<_>>()?;
    let mut rows = Vec::new();
    for (xk, &xi) in cfg.xi_grid.iter().enumerate() {
        let advice: Vec<AdviceStream> = setup
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| make_advice(inst, &AdviceTarget::Pf, xi, mix_seed(cfg.seed ^ ADVICE_SALT, (xk * 1_000_003 + i) as u64)))
            .collect::<omcs::Result<_>>()?;
        let mut push = |variant: &str, eps: f64, rho: f64, pfs: Vec<f64>| {
            let mean = pfs.iter().sum::<f64>() / pfs.len() as f64;
            let max = pfs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rows.push(XiRow {
                xi,
                variant: variant.into(),
                epsilon: eps,
                rho,
                mean_pf: mean,
                max_pf: max,
            });
        };
        let pf_of = |inst: &Instance, u: &[f64]| empirical_pf_from_utilities(inst, u);
        push(
            "robust",
            beta - 1.0,
            0.0,
            setup.instances.iter().zip(&robust_u).map(|(inst, u)| pf_of(inst, u)).collect(),
        );
        let adv_pf = setup
            .instances
            .iter()
            .zip(&advice)
            .map(|(inst, a)| Ok(pf_of(inst, &class_utilities(inst, &a.allocation())?)))
            .collect::<omcs::Result<Vec<_>>>()?;
        push("adv", 0.0, 1.0, adv_pf);
        for (ek, &eps) in cfg.eps_grid.iter().enumerate() {
            let mut pfs = Vec::new();
            let mut rho = 0.0;
            for (i, (inst, a)) in setup.instances.iter().zip(&advice).enumerate() {
                let pol = LilaPf::new(params.clone(), eps, a.clone())?.with_mode(cfg.mix);
                rho = pol.rho;
                let key = ((xk * 64 + ek) * 1_000_003 + i) as u64;
                let est = mc_expectation(&pol, inst, cfg.trials, mix_seed(cfg.seed ^ MC_SALT ^ 1, key))?;
                pfs.push(pf_of(inst, &est.mean_utilities));
            }
            push("lila", eps, rho, pfs);
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn by_policy<T>(rows: &[T], key: impl Fn(&T) -> &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.iter().any(|n| n == key(r)) {
            names.push(key(r).to_string());
        }
    }
    names
}

/// Files written by one run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Runs the configured experiment and writes CSV, SVG, `config.json` and
/// `summary.md` into `out`. Output is a deterministic function of the
/// config (seed included).
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let setup = build_setup(cfg)?;
    let mut files = vec![out.join("config.json")];
    fs::write(&files[0], cfg.to_json() + "\n")?;
    match cfg.experiment {
        ExperimentKind::Allocation => {
            let p = out.join("allocation.csv");
            write_csv(&p, &allocation_rows(cfg, &setup)?)?;
            files.push(p);
        }
        ExperimentKind::HardRatio => {
            let p = out.join("ratios.csv");
            write_csv(&p, &hard_ratio_rows(cfg, &setup)?)?;
            files.push(p);
        }
        ExperimentKind::CrCdf => {
            let p = out.join("cr.csv");
            write_csv(&p, &cr_rows(cfg, &setup)?)?;
            files.push(p);
        }
        ExperimentKind::XiSweep => {
            let p = out.join("xi_sweep.csv");
            write_csv(&p, &xi_rows(cfg, &setup)?)?;
            files.push(p);
        }
    }
    let rendered = render_report(out)?;
    files.extend(rendered.files);
    Ok(RunSummary {
        files,
        summary: rendered.summary,
    })
}

/// Re-renders SVG charts and `summary.md` from the CSVs in `dir`.
pub fn render_report(dir: &Path) -> Result<RunSummary> {
    let meta = fs::read_to_string(dir.join("config.json")).unwrap_or_default();
    let meta = meta.trim();
    let mut files = Vec::new();
    let mut md = format!("# Experiment report\n\nConfig: `{meta}`\n\n");
    let emit = |name: &str, svg: String, files: &mut Vec<PathBuf>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, svg)?;
        files.push(p);
        Ok(())
    };

    let p = dir.join("allocation.csv");
    if p.exists() {
        let rows: Vec<AllocationRow> = read_csv(&p)?;
        let pols = by_policy(&rows, |r| &r.policy);
        let classes: Vec<String> = {
            let mut c: Vec<usize> = rows.iter().map(|r| r.class).collect();
            c.sort_unstable();
            c.dedup();
            c.iter().map(|c| format!("class {c}")).collect()
        };
        let series = |f: fn(&AllocationRow) -> f64| -> Vec<(String, Vec<f64>)> {
            pols.iter()
                .map(|p| (p.clone(), rows.iter().filter(|r| &r.policy == p).map(f).collect()))
                .collect()
        };
        emit("allocation_utility.svg", bar_chart("Per-class utility", "utility", &classes, &series(|r| r.utility), meta), &mut files)?;
        emit("allocation_units.svg", bar_chart("Per-class allocation", "units", &classes, &series(|r| r.units), meta), &mut files)?;
        md.push_str("| policy | class | utility | units |\n|---|---|---|---|\n");
        for r in &rows {
            md.push_str(&format!("| {} | {} | {:.3} | {:.3} |\n", r.policy, r.class, r.utility, r.units));
        }
    }

    let p = dir.join("ratios.csv");
    if p.exists() {
        let rows: Vec<RatioRow> = read_csv(&p)?;
        let series: Vec<Series> = by_policy(&rows, |r| &r.policy)
            .into_iter()
            .map(|name| Series {
                points: rows.iter().filter(|r| r.policy == name).map(|r| (r.prefix as f64, r.ratio)).collect(),
                name,
            })
            .collect();
        emit("ratios.svg", line_chart("Ratio over stopping prefixes", "prefix length", "OPT / E[ALG]", &series, false, meta), &mut files)?;
        md.push_str("| policy | worst ratio | at prefix |\n|---|---|---|\n");
        for s in &series {
            let w = s.points.iter().cloned().fold((0.0, f64::NEG_INFINITY), |a, p| if p.1 > a.1 { p } else { a });
            md.push_str(&format!("| {} | {:.4} | {} |\n", s.name, w.1, w.0));
        }
    }

    let p = dir.join("cr.csv");
    if p.exists() {
        let rows: Vec<CrRow> = read_csv(&p)?;
        let series: Vec<Series> = by_policy(&rows, |r| &r.policy)
            .into_iter()
            .map(|name| {
                let mut r: Vec<f64> = rows.iter().filter(|r| r.policy == name).map(|r| r.ratio).collect();
                r.sort_by(f64::total_cmp);
                let n = r.len() as f64;
                Series {
                    points: r.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect(),
                    name,
                }
            })
            .collect();
        emit("cr_cdf.svg", line_chart("CDF of empirical competitive ratios", "OPT / E[ALG]", "fraction of instances", &series, true, meta), &mut files)?;
        md.push_str("| policy | instances | mean ratio | median | max |\n|---|---|---|---|---|\n");
        for s in &series {
            let v: Vec<f64> = s.points.iter().map(|p| p.0).collect();
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            md.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} |\n",
                s.name,
                v.len(),
                mean,
                v.get(v.len() / 2).copied().unwrap_or(f64::NAN),
                v.last().copied().unwrap_or(f64::NAN)
            ));
        }
    }

    let p = dir.join("xi_sweep.csv");
    if p.exists() {
        let rows: Vec<XiRow> = read_csv(&p)?;
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &rows {
            if !keys.iter().any(|k| k.0 == r.variant && k.1 == r.epsilon) {
                keys.push((r.variant.clone(), r.epsilon));
            }
        }
        let series: Vec<Series> = keys
            .iter()
            .map(|(v, e)| Series {
                name: if v == "lila" { format!("lila eps={e}") } else { v.clone() },
                points: rows.iter().filter(|r| &r.variant == v && r.epsilon == *e).map(|r| (r.xi, r.mean_pf)).collect(),
            })
            .collect();
        emit("xi_sweep.svg", line_chart("Empirical fairness vs adversarial probability", "xi", "mean empirical PF ratio", &series, false, meta), &mut files)?;
        md.push_str("| xi | variant | epsilon | rho | mean PF | max PF |\n|---|---|---|---|---|---|\n");
        for r in &rows {
            md.push_str(&format!("| {} | {} | {} | {:.4} | {:.4} | {:.4} |\n", r.xi, r.variant, r.epsilon, r.rho, r.mean_pf, r.max_pf));
        }
    }

    let p = dir.join("summary.md");
    fs::write(&p, &md)?;
    files.push(p);
    Ok(RunSummary { files, summary: md })
}
