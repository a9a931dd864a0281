use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use advmiss::experiment::{self, ExperimentConfig, MECHANISM_FILE, RESULTS_FILE, SUMMARY_FILE, SWEEP_FILE};
use advmiss::surrogate::RemediationKind;

#[derive(Parser)]
#[command(name = "advmiss", version, about = "Adversarial missingness attacks on GLM fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a missingness mechanism against the configured victim.
    Attack(Overrides),
    /// Sample MNAR and matched MCAR masks and score every victim.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Trained mechanism; defaults to `<out-dir>/mechanism.json`.
        #[arg(long)]
        mechanism: Option<PathBuf>,
    },
    /// Discard the lowest-valued rows and refit.
    Defend {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        mechanism: Option<PathBuf>,
        /// Comma-separated discard fractions in [0, 1).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Attack the pinned two-cluster logistic problem.
    #[command(name = "demo-fig1")]
    DemoFig1(Overrides),
    /// Print a built-in configuration as TOML.
    Preset {
        #[arg(value_parser = ["fig1", "housing"])]
        name: String,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment manifest (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Remediation the attack is trained against.
    #[arg(long)]
    attack: Option<RemediationKind>,
    /// Victim strategy; repeat to run several.
    #[arg(long)]
    victim: Vec<RemediationKind>,
    #[arg(long)]
    lambda_upper: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn resolve(&self, fallback: Option<fn() -> ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, fallback) {
            (Some(path), _) => ExperimentConfig::from_toml_file(path)
                .with_context(|| format!("cannot load config {}", path.display()))?,
            (None, Some(f)) => f(),
            (None, None) => anyhow::bail!("--config is required for this command"),
        };
        if let Some(s) = self.seed {
            c.seed = s;
            c.attack.seed = s;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        if let Some(t) = self.trials {
            c.trials = t;
        }
        if let Some(k) = self.attack {
            c.attack.kind = k;
        }
        if !self.victim.is_empty() {
            c.victims = self.victim.clone();
        }
        if let Some(l) = self.lambda_upper {
            c.attack.lambda_upper = l;
        }
        if let Some(lr) = self.lr {
            c.attack.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            c.attack.epochs = e;
        }
        c.validate()?;
        Ok(c)
    }
}

fn mechanism_path(config: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| config.out_dir.join(MECHANISM_FILE))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack(o) => {
            let c = o.resolve(None)?;
            let s = experiment::cmd_attack(&c)?;
            println!(
                "final delta {:.6e}, target missingness {:.4}, victim p-value {:.4}",
                s.final_delta, s.sampled_target_missingness, s.victim_target_p_value
            );
            println!("wrote {}", c.out_dir.join(SUMMARY_FILE).display());
        }
        Command::Evaluate { overrides, mechanism } => {
            let c = overrides.resolve(None)?;
            let rows = experiment::cmd_evaluate(&c, &mechanism_path(&c, &mechanism))?;
            for r in &rows {
                println!(
                    "{} victim, {} masks: distance {:.4}, p-value {:.4e}, audit {:.4}",
                    r.victim,
                    r.mechanism.as_str(),
                    r.distance_mean,
                    r.p_value_mean,
                    r.audit_mean
                );
            }
            println!("wrote {}", c.out_dir.join(RESULTS_FILE).display());
        }
        Command::Defend { overrides, mechanism, fractions } => {
            let c = overrides.resolve(None)?;
            let fractions = fractions.unwrap_or_else(|| c.defense_fractions.clone());
            let points = experiment::cmd_defend(&c, &mechanism_path(&c, &mechanism), &fractions)?;
            for p in &points {
                println!(
                    "discard {:.2}: to alpha {:.4}, to true {:.4}, p-value {:.4e}",
                    p.fraction, p.report.distance_to_alpha, p.report.distance_to_true, p.report.target_p_value
                );
            }
            println!("wrote {}", c.out_dir.join(SWEEP_FILE).display());
        }
        Command::DemoFig1(o) => {
            let c = o.resolve(Some(ExperimentConfig::two_cluster_demo))?;
            let s = experiment::demo_fig1(&c)?;
            println!(
                "target missingness {:.4}, victim p-value {:.4}, accuracy {:.4} -> {:.4}",
                s.attack.sampled_target_missingness,
                s.attack.victim_target_p_value,
                s.attack.clean_audit_metric,
                s.attack.victim_audit_metric
            );
            println!("wrote {}", c.out_dir.join(SUMMARY_FILE).display());
        }
        Command::Preset { name } => {
            let c = match name.as_str() {
                "fig1" => ExperimentConfig::two_cluster_demo(),
                _ => ExperimentConfig::housing_demo(),
            };
            print!("{}", c.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_config_fields() {
        let o = Overrides {
            seed: Some(5),
            trials: Some(3),
            attack: Some(RemediationKind::Cca),
            victim: vec![RemediationKind::Linear],
            lambda_upper: Some(0.5),
            lr: Some(0.2),
            epochs: Some(7),
            ..Overrides::default()
        };
        let c = o.resolve(Some(ExperimentConfig::two_cluster_demo)).unwrap();
        assert_eq!((c.seed, c.attack.seed, c.trials), (5, 5, 3));
        assert_eq!(c.attack.kind, RemediationKind::Cca);
        assert_eq!(c.victims, vec![RemediationKind::Linear]);
        assert_eq!((c.attack.lambda_upper, c.attack.learning_rate, c.attack.epochs), (0.5, 0.2, 7));
    }

    #[test]
    fn config_required_without_fallback() {
        assert!(Overrides::default().resolve(None).is_err());
    }

    #[test]
    fn zero_trials_rejected() {
        let o = Overrides { trials: Some(0), ..Overrides::default() };
        assert!(o.resolve(Some(ExperimentConfig::two_cluster_demo)).is_err());
    }
}
