use std::path::PathBuf;
use std::process::ExitCode;

use awmoe::config::RunConfig;
use awmoe::pipeline;
use awmoe::selftest::run_property_suite;
use awmoe::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "awmoe", about = "Weather-routed mixture-of-experts 3D detection")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic dataset and GT database.
    Gen(Common),
    /// Train the shared backbone and the designated expert.
    TrainStage1(Common),
    /// Train the image weather classifier and the point-feature gate.
    TrainClassifier(Common),
    /// Copy experts, train them under routing, and train the baseline.
    TrainMoe(Common),
    /// Evaluate the trained models on the test split.
    Eval(Common),
    /// Write CSV and SVG tables from eval.json.
    Report(Common),
    /// Run the oracle and invariant suites.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
}

impl Common {
    fn load(&self) -> awmoe::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::MissingCache(_) => "missing_cache",
        Error::Empty(_) => "empty",
        Error::MissingComponent(_) => "missing_component",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
    }
}

fn run(verb: &Verb) -> awmoe::Result<()> {
    match verb {
        Verb::Gen(c) => {
            let m = pipeline::gen(&c.load()?, &c.run_dir)?;
            println!("generated {} frames in {}", m.entries.len(), c.run_dir.display());
        }
        Verb::TrainStage1(c) => {
            let log = pipeline::train_stage1_verb(&c.load()?, &c.run_dir)?;
            println!("stage 1: {} steps, final loss {:.4}", log.steps, log.epoch_loss.last().unwrap_or(&f64::NAN));
        }
        Verb::TrainClassifier(c) => {
            let logs = pipeline::train_classifier_verb(&c.load()?, &c.run_dir)?;
            println!("classifier test accuracy {:.4}", logs.classifier_test_accuracy);
        }
        Verb::TrainMoe(c) => {
            let logs = pipeline::train_moe_verb(&c.load()?, &c.run_dir)?;
            println!(
                "stage 4: {} steps, {} audits passed; baseline {} steps",
                logs.moe.steps, logs.moe.audits, logs.baseline.steps
            );
        }
        Verb::Eval(c) => {
            let file = pipeline::eval_verb(&c.load()?, &c.run_dir)?;
            for (name, r) in &file.results {
                let row = r.row(awmoe::eval::ApKind::ThreeD, 0.3).expect("AP_3D@0.3 row");
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("{name}: AP_3D@0.3 total {} adverse {}", fmt(row.total), fmt(row.adverse_mean()));
            }
        }
        Verb::Report(c) => {
            for p in pipeline::report_verb(&c.load()?, &c.run_dir)? {
                println!("{}", p.display());
            }
        }
        Verb::Selftest(c) => {
            c.load()?;
            let outcomes = run_property_suite();
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("selftest failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
            eprintln!("awmoe-error kind={} message={msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}
