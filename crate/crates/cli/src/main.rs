//! Command-line front end: item generation, training, paired evaluation,
//! and the self-audit sweep. All behavior is driven by one TOML config;
//! flags override individual fields.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restock::agents::{Agent, AgentKind};
use restock::harness::{
    derive_seed_for_items, emit_results, run_audit, run_evaluation, run_training, ExperimentConfig,
    Scenario, SqFactory,
};
use restock::items::{generate_items, save_items};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "restock",
    version,
    about = "Perishable-inventory replenishment: simulator, learned agents, paired benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every verb. Each one overrides the matching config
/// field after the file is read.
#[derive(Args)]
struct CommonOpts {
    /// TOML config file; omitted fields take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the forecast-noise scenario (h0, h1, h2).
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Override the agent kind (dqn, qr-dqn, er-dqn, gtdqn).
    #[arg(long)]
    agent: Option<AgentKind>,
    /// Override the number of quantile levels.
    #[arg(long)]
    quantiles: Option<usize>,
    /// Override the waste-cost multiplier in the reward.
    #[arg(long)]
    waste_weight: Option<f64>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(scenario) = self.scenario {
            cfg.scenario = scenario;
        }
        if let Some(agent) = self.agent {
            cfg.agent = agent;
        }
        if let Some(quantiles) = self.quantiles {
            cfg.num_quantiles = quantiles;
        }
        if let Some(w) = self.waste_weight {
            cfg.waste_weight = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a pseudo-item assortment and write it as CSV.
    GenerateItems {
        #[command(flatten)]
        common: CommonOpts,
        /// How many items; defaults to the config's train_items.
        #[arg(long)]
        count: Option<usize>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured agent; writes checkpoint, training log, and a
    /// summary into the output directory.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint (or, without one, the baseline against
    /// itself) on fresh item generations, paired with (s, Q).
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        /// Agent checkpoint from `train`; omit to benchmark the baseline
        /// mirror, which must land at exactly 100%.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for results.csv and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay random-policy episodes against a shadow model and verify
    /// rewards, stock dynamics, and conservation identities.
    Audit {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 50)]
        episodes: u64,
        #[arg(long, default_value_t = 500)]
        steps: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateItems { common, count, out } => {
            let cfg = common.resolve()?;
            let n = count.unwrap_or(cfg.train_items);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_for_items(cfg.master_seed));
            let items = generate_items(&cfg.copula_model()?, &cfg.item_gen_config(), n, &mut rng)?;
            save_items(&items, &out)?;
            println!("wrote {} items to {}", items.len(), out.display());
        }
        Command::Train { common, out } => {
            let cfg = common.resolve()?;
            std::fs::create_dir_all(&out)?;
            let run = run_training(&cfg, Some(&out))?;
            let checkpoint = out.join("agent.json");
            run.agent.save(&checkpoint)?;
            restock::harness::write_training_log(&run.log, &out.join("train_log.csv"))?;
            std::fs::write(
                out.join("train_summary.json"),
                serde_json::to_string_pretty(&run.summary)? + "\n",
            )?;
            let s = &run.summary;
            println!(
                "trained {} for {} updates over {} env steps (final epsilon {:.4})",
                cfg.agent.name(),
                s.updates,
                s.env_steps,
                s.final_epsilon
            );
            println!(
                "quantile crossings: {} of {} checks; optimizer skips: {}",
                s.crossing_events, s.crossing_checked, s.optimizer_skips
            );
            println!("checkpoint: {}", checkpoint.display());
        }
        Command::Evaluate { common, checkpoint, out } => {
            let cfg = common.resolve()?;
            let result = match &checkpoint {
                Some(path) => {
                    let agent = Agent::load(path)
                        .with_context(|| format!("loading checkpoint {}", path.display()))?;
                    check_checkpoint_matches(&cfg, &agent)?;
                    run_evaluation(&cfg, &agent)?
                }
                None => {
                    let baseline = SqFactory::from_config(&cfg, cfg.market()?);
                    run_evaluation(&cfg, &baseline)?
                }
            };
            let subject = checkpoint.as_ref().map_or("sq-baseline", |_| cfg.agent.name());
            emit_results(&cfg, &result, subject, &out)?;

            println!(
                "scenario {} (sigma {}), {} generations x {} items x {} steps",
                cfg.scenario.name(),
                result.sigma,
                cfg.eval_generations,
                cfg.eval_items_per_generation,
                cfg.eval_steps
            );
            println!("generation  norm_profit_pct  norm_waste_pct  excluded");
            for (g, d) in result.generations.iter().zip(&result.details) {
                println!(
                    "{:>10}  {:>15.3}  {:>14.3}  {:>8}",
                    g.generation, g.norm_profit_pct, g.norm_waste_pct, d.excluded_items
                );
            }
            println!(
                "profit: {:.3}% (MAD {:.3}, SE {:.3})",
                result.mean_norm_profit_pct, result.profit_mad, result.profit_se
            );
            println!(
                "waste:  {:.3}% (MAD {:.3}, SE {:.3})",
                result.mean_norm_waste_pct, result.waste_mad, result.waste_se
            );
            println!("files written to {}", out.display());
        }
        Command::Audit { common, episodes, steps } => {
            let cfg = common.resolve()?;
            let report = run_audit(&cfg, episodes, steps)?;
            println!(
                "audited {} episodes, {} steps: {} reward mismatches, {} stock mismatches, {} conservation violations",
                report.episodes,
                report.steps,
                report.reward_mismatches,
                report.lifo_mismatches,
                report.conservation_violations
            );
            if !report.clean() {
                bail!("audit failed");
            }
            println!("audit clean");
        }
    }
    Ok(())
}

/// A checkpoint carries its own agent config and network spec; refuse to
/// evaluate it under a config it was not trained for.
fn check_checkpoint_matches(cfg: &ExperimentConfig, agent: &Agent) -> Result<()> {
    let mut problems = Vec::new();
    if agent.config().kind != cfg.agent {
        problems.push(format!(
            "agent kind: checkpoint has {}, config asks for {}",
            agent.config().kind.name(),
            cfg.agent.name()
        ));
    }
    if agent.config().num_quantiles != cfg.num_quantiles {
        problems.push(format!(
            "num_quantiles: checkpoint has {}, config asks for {}",
            agent.config().num_quantiles,
            cfg.num_quantiles
        ));
    }
    let expected = cfg.network_spec();
    if *agent.network().spec() != expected {
        problems.push("network spec differs from the one this config would build".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("checkpoint does not match config:\n{}", problems.join("\n")))
    }
}
