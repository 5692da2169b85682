use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use prefgen_core::harness::{self, commands, config::parse_override, RunConfig};

/// Top-level config keys that may be given as plain flags.
const TOP_LEVEL_KEYS: [&str; 6] = [
    "experiment",
    "seed",
    "jobs",
    "out_dir",
    "corpus_path",
    "users",
];

#[derive(Parser, Debug)]
#[command(
    name = "prefgen",
    version,
    about = "Retrieval-augmented personalized generation pipeline and experiments",
    after_help = "Any config key can be overridden with a flag of the same dotted name, \
                  e.g. --reflection.steps=50 or --pipeline.retrieval.k 10. Flags win over the config file. \
                  The output root defaults to $PREFGEN_OUT, then ./out."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key.path=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (no-op when unchanged).
    GenData,
    /// Train the ranking model on the corpus.
    TrainRm,
    /// Run reflection for every selected user.
    Reflect,
    /// Evaluate reflected calibrators and write the metrics report.
    Eval,
    /// Compare retrieval strategies against planted preferences.
    ValidateRetrieval,
    /// Sweep retrieval_k or noise_r.
    Ablate,
    /// Retrain the ranking model on substituted reference images.
    Auxiliary,
    /// Summarize run directories as one CSV.
    Report {
        /// Experiment or seed directories.
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Pulls `--a.b=v`, `--a.b v` and top-level `--seed 3` style flags out of
/// the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let normalized = key.replace('-', "_");
        let is_config_key = key.contains('.') || TOP_LEVEL_KEYS.contains(&normalized.as_str());
        if !is_config_key {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .with_context(|| format!("flag --{key} needs a value"))?,
        };
        let key = if key.contains('.') { key } else { normalized };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    let mut all = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<prefgen_core::Result<Vec<_>>>()?;
    all.append(&mut overrides);
    Ok(RunConfig::load(cli.config.as_deref(), &all)?)
}

macro_rules! print_json {
    ($v:expr) => {{
        println!("{}", serde_json::to_string($v)?);
        Ok(())
    }};
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    if let Command::Report { dirs, output } = &cli.command {
        if !overrides.is_empty() {
            anyhow::bail!(prefgen_core::Error::config(
                "report takes directories, not config flags"
            ));
        }
        let csv = harness::build_report(dirs)?;
        match output {
            Some(path) => {
                std::fs::write(path, &csv).map_err(|e| prefgen_core::Error::io(path, e))?;
                let rows = csv.lines().count() - 1;
                println!(
                    "{}",
                    serde_json::json!({ "command": "report", "output": path, "rows": rows })
                );
            }
            None => print!("{csv}"),
        }
        return Ok(());
    }
    let cfg = load_config(&cli, overrides)?;
    match cli.command {
        Command::GenData => print_json!(&commands::gen_data(&cfg)?),
        Command::TrainRm => print_json!(&commands::train_rm(&cfg)?),
        Command::Reflect => print_json!(&commands::reflect(&cfg)?),
        Command::Eval => print_json!(&commands::eval(&cfg)?.0),
        Command::ValidateRetrieval => print_json!(&commands::validate_retrieval(&cfg)?.0),
        Command::Ablate => print_json!(&commands::ablate(&cfg)?.0),
        Command::Auxiliary => print_json!(&commands::auxiliary(&cfg)?.0),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn error_record(err: &anyhow::Error) -> (serde_json::Value, u8) {
    let core = err
        .chain()
        .find_map(|e| e.downcast_ref::<prefgen_core::Error>());
    let kind = core.map_or("internal", |e| e.kind());
    let code = match kind {
        "config" | "parse" | "usage" => 2,
        "missing_artifact" => 3,
        _ => 1,
    };
    let causes: Vec<String> = err.chain().skip(1).map(|e| e.to_string()).collect();
    let record = serde_json::json!({
        "error": { "kind": kind, "message": err.to_string(), "causes": causes }
    });
    (record, code)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": e.to_string(), "causes": [] } })
            );
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let message = e.render().to_string();
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": message.trim(), "causes": [] } })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (record, code) = error_record(&e);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
