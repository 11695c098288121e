use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecfm::harness::ablation::cmd_ablation;
use ecfm::harness::suite::{gradcheck_suite, score_report};
use ecfm::harness::train::{cmd_dump_activations, cmd_eval, cmd_gen_data, cmd_train};
use ecfm::harness::RunConfig;

/// Energy-driven frame/event fusion for steering prediction.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides such as `--lr=0.01` or `--loss.estimator=full`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> ecfm::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic driving dataset and write the train/test splits.
    GenData(Common),
    /// Train one model; writes metrics.csv and the best checkpoint.
    Train(Common),
    /// Evaluate a checkpoint; writes predictions.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; the test split of the configured data dir by default.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every op, the fusion block, the losses and the network.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare both energy-score estimators with the Gaussian closed form.
    Score {
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        z: f64,
        #[arg(long, short = 'm', default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every fusion and decoder variant over the configured seeds.
    Ablation(Common),
    /// Write the fusion activation maps of one sample.
    DumpActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> ecfm::Result<bool> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let (train, test) = cmd_gen_data(&cfg)?;
            for (name, m) in [("train", &train), ("test", &test)] {
                let f = m.filters.last().expect("filtered split");
                println!(
                    "{name}: {} of {} samples kept (speed -{}, band -{}, outliers -{})",
                    m.samples.len(),
                    f.input,
                    f.dropped_speed,
                    f.dropped_band,
                    f.dropped_outlier
                );
            }
            Ok(true)
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let outcome = cmd_train(&cfg)?;
            for m in &outcome.metrics {
                println!(
                    "epoch {:3}  loss {:.5}  val rmse {:.5}  mae {:.5}  {:.1}s",
                    m.epoch, m.train_loss, m.val_rmse, m.val_mae, m.wall_seconds
                );
            }
            println!("best epoch {}; checkpoint in {}", outcome.best_epoch, cfg.out_dir.join("checkpoint").display());
            Ok(true)
        }
        Command::Eval { checkpoint, manifest, common } => {
            let cfg = common.resolve()?;
            let manifest = manifest.unwrap_or_else(|| cfg.test_manifest_path());
            let (rmse, mae) = cmd_eval(&cfg, &checkpoint, &manifest)?;
            println!("rmse {rmse:.6}  mae {mae:.6}");
            Ok(rmse >= mae)
        }
        Command::GradCheck { seed } => {
            let items = gradcheck_suite(seed)?;
            let ops = items.iter().filter(|i| i.kind == "op").count();
            for i in &items {
                println!(
                    "{:<5} {:<28} {:>5} coords  max rel {:.3e}  (< {:.0e})  {}",
                    i.kind,
                    i.name,
                    i.checked,
                    i.max_rel_error,
                    i.tolerance,
                    if i.passed { "ok" } else { "FAIL" }
                );
            }
            let failed = items.iter().filter(|i| !i.passed).count();
            println!("{ops} ops, {} graphs, {failed} failed", items.len() - ops);
            Ok(failed == 0)
        }
        Command::Score { mu, sigma, z, samples, trials, seed } => {
            let r = score_report(mu, sigma, z, samples, trials, seed)?;
            println!("closed form  {:.6}", r.closed_form);
            println!("full         {:.6} ± {:.6}", r.full.mean, r.full.stderr);
            println!("fast         {:.6} ± {:.6}", r.fast.mean, r.fast.stderr);
            let rel = (r.fast.mean / r.closed_form - 1.0).abs();
            let gap = (r.full.mean - r.fast.mean).abs();
            println!("fast vs closed form: {:.3}% relative", 100.0 * rel);
            println!("full vs fast: {:.2} standard errors", gap / r.difference_stderr());
            Ok(rel < 0.01 && gap < 2.0 * r.difference_stderr())
        }
        Command::Ablation(common) => {
            let cfg = common.resolve()?;
            let report = cmd_ablation(&cfg)?;
            for r in &report.results {
                println!(
                    "{:<8} {:<20} rmse {:.5}  mae {:.5}  rank {} (reference {})",
                    format!("{:?}", r.variant.group).to_lowercase(),
                    r.variant.name,
                    r.mean_rmse,
                    r.mean_mae,
                    r.rank,
                    r.variant.reference_rank
                );
            }
            let fusion = report.fusion_ordering_holds();
            let decoder = report.decoder_best_holds();
            println!("fusion ordering: {}", if fusion { "holds" } else { "violated" });
            println!("decoder best cell: {}", if decoder { "holds" } else { "violated" });
            println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
            Ok(fusion && decoder)
        }
        Command::DumpActivations { checkpoint, manifest, index, common } => {
            let cfg = common.resolve()?;
            let manifest = manifest.unwrap_or_else(|| cfg.test_manifest_path());
            let dir = cmd_dump_activations(&cfg, &checkpoint, &manifest, index)?;
            println!("wrote {}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
