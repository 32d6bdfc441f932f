use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mdpm::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "mdpm", version, about = "Mid-level deep pattern mining")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Stage {
    /// Validate and copy feature files into the working directory.
    Ingest,
    /// Sparsified vs binarized pooled-feature accuracy over several k.
    Study,
    /// Mine patterns per category.
    Mine,
    /// Retrieve elements, train detectors and merge.
    Merge,
    /// Choose the detector bank.
    Select,
    /// Encode train and test images.
    Encode,
    /// Train the image classifier.
    Train,
    /// Evaluate on the test split.
    Eval,
    /// Write synthetic features with planted patterns.
    Synth,
    /// Run ingest through eval.
    Pipeline,
}

fn print<T: Serialize>(report: &T) {
    println!("{}", serde_json::to_string_pretty(report).expect("reports serialize"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.common.workdir {
        config.paths.workdir = w;
    }
    if let Some(s) = cli.common.seed {
        config.seed = s;
        config.synth.seed = s;
    }
    config.validate()?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(PipelineError::Config {
                field: "--threads".into(),
                reason: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match cli.stage {
        Stage::Ingest => print(&pipeline::ingest(&config)?),
        Stage::Synth => print(&pipeline::synth(&config)?),
        Stage::Mine => print(&pipeline::mine(&config)?),
        Stage::Merge => print(&pipeline::merge(&config)?),
        Stage::Select => print(&pipeline::select(&config)?),
        Stage::Encode => print(&pipeline::encode(&config)?),
        Stage::Train => print(&pipeline::train(&config)?),
        Stage::Eval => {
            let r = pipeline::eval(&config)?;
            for c in &r.categories {
                let ap = c.average_precision.map_or("-".to_owned(), |a| format!("{:.2}%", 100.0 * a));
                eprintln!("{:<24} acc {:>7.2}%  AP {ap:>7}", c.category, 100.0 * c.accuracy);
            }
            eprintln!("overall accuracy {:.2}%, mAP {:.2}%", 100.0 * r.accuracy, 100.0 * r.mean_average_precision);
            print(&r);
        }
        Stage::Study => {
            let r = pipeline::study(&config)?;
            eprintln!("{}", r.table());
            print(&r);
        }
        Stage::Pipeline => print(&pipeline::run_pipeline(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
