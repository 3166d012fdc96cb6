use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use omcs::dgfq::solve_thresholds;
use omcs::frac_gfq::{FracGfq, FracThreshold};
use omcs::instances::{gen_hard_gfq, gen_hard_pf, gen_synthetic, LabelModel};
use omcs::io::write_instance;
use omcs::rng::mix_seed;
use omcs::rounding::{validate_lossless, FracStream};
use omcs::{GfqSpec, ProblemParams};
use omcs_harness::{render_report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "omcs", version, about = "Online multi-class selection with group fairness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Problem {
    /// Budget B.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    /// Fluctuation ratios, comma separated and non-decreasing.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    theta: Vec<f64>,
    /// Per-class quotas, comma separated (omit for none).
    #[arg(long, value_delimiter = ',')]
    quotas: Vec<usize>,
}

impl Problem {
    fn build(&self) -> Result<(ProblemParams, GfqSpec)> {
        let params = ProblemParams::new(self.budget, self.theta.clone())?;
        let spec = if self.quotas.is_empty() {
            GfqSpec::zeros(self.theta.len())
        } else {
            GfqSpec::new(self.quotas.clone())
        };
        spec.validate(&params)?;
        Ok((params, spec))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Synthetic,
    HardGfq,
    HardPf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write an instance as JSON lines.
    Gen {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, value_enum, default_value = "synthetic")]
        kind: GenKind,
        /// Stream length (synthetic).
        #[arg(long, default_value_t = 500)]
        agents: usize,
        /// Probability of each extra label (synthetic; 0 = single label).
        #[arg(long, default_value_t = 0.0)]
        label_p: f64,
        /// Grid step (hard instances).
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the deterministic and fractional threshold tables as JSON.
    SolveThresholds {
        #[command(flatten)]
        problem: Problem,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's Monte Carlo trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Check that randomized rounding of fractional GFQ streams is lossless.
    ValidateRounding {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, default_value_t = 200)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        streams: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        checkpoints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render charts and summary from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen {
            problem,
            kind,
            agents,
            label_p,
            delta,
            seed,
            out,
        } => {
            let (params, spec) = problem.build()?;
            let inst = match kind {
                GenKind::Synthetic => {
                    let model = if label_p > 0.0 {
                        LabelModel::Multi { p: label_p }
                    } else {
                        LabelModel::SingleUniform
                    };
                    gen_synthetic(&params, agents, seed, model)?
                }
                GenKind::HardGfq => gen_hard_gfq(&params, delta)?.instance,
                GenKind::HardPf => gen_hard_pf(&params, delta)?.instance,
            };
            let quotas = (spec.total() > 0).then_some(&spec);
            match out {
                Some(p) => {
                    let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    let mut w = BufWriter::new(f);
                    write_instance(&mut w, &inst, quotas)?;
                    w.flush()?;
                }
                None => write_instance(std::io::stdout().lock(), &inst, quotas)?,
            }
        }
        Cmd::SolveThresholds { problem } => {
            let (params, spec) = problem.build()?;
            let table = solve_thresholds(&params, &spec)?;
            let frac = FracThreshold::build(&params, &spec)?;
            let json = serde_json::json!({
                "deterministic": serde_json::from_str::<serde_json::Value>(&table.to_json())?,
                "fractional": serde_json::from_str::<serde_json::Value>(&frac.to_json())?,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Cmd::Run {
            config,
            out,
            seed,
            trials,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let summary = run_experiment(&cfg, &out)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
        }
        Cmd::ValidateRounding {
            problem,
            agents,
            streams,
            trials,
            checkpoints,
            seed,
        } => {
            let (params, spec) = problem.build()?;
            let policy = FracGfq::new(params.clone(), spec)?;
            let frac: Vec<FracStream> = (0..streams)
                .map(|s| {
                    let instance = gen_synthetic(&params, agents, mix_seed(seed, s as u64), LabelModel::SingleUniform)?;
                    let fractional = policy.fractional(&instance);
                    Ok(FracStream { instance, fractional })
                })
                .collect::<omcs::Result<_>>()?;
            let rep = validate_lossless(&frac, trials, seed, checkpoints)?;
            println!(
                "streams={} trials={} max_final_z={:.3} max_class_z={:.3} max_avail_z={:.3} max_prefix_z={:.3} max_exact_err={:.2e}",
                rep.streams.len(),
                rep.trials,
                rep.max_final_z,
                rep.max_class_z,
                rep.max_avail_z,
                rep.max_prefix_z,
                rep.max_exact_err
            );
            if !rep.pass {
                bail!("rounding check failed");
            }
            println!("pass");
        }
        Cmd::Report { out } => {
            let summary = render_report(&out)?;
            print!("{}", summary.summary);
        }
    }
    Ok(())
}
