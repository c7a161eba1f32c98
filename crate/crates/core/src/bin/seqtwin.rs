use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqtwin::app::{
    handle_simulate, load_bundle, save_bundle, train_pipeline, AppState, PipelineConfig,
    SimulationRequest,
};
use seqtwin::cohort::{
    generate_synthetic_cohort, load_cohort_csv, save_cohort_csv, PatientFeatures, Stage,
    SyntheticConfig,
};
use seqtwin::evaluation::evaluate;
use seqtwin::policy::Strategy;
use seqtwin::symptoms::{
    generate_symptom_cohort, load_symptom_csv, save_symptom_csv, SymptomSyntheticConfig,
    DEFAULT_SYMPTOM_COHORT,
};
use seqtwin::{Error, Result};

#[derive(Parser)]
#[command(name = "seqtwin", version, about = "Treatment-sequence digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort CSV.
    GenCohort {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 536)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Decisions follow a logistic function of staging instead of the
        /// published sequence marginals.
        #[arg(long)]
        logistic_staging: bool,
        /// Also write a synthetic symptom cohort here.
        #[arg(long)]
        symptoms_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SYMPTOM_COHORT)]
        symptoms_n: usize,
    },
    /// Fit every model and write a bundle.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out_bundle: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Symptom cohort CSV; a synthetic one is generated when omitted.
        #[arg(long)]
        symptoms: Option<PathBuf>,
        /// Full-width networks instead of the desk-scale defaults.
        #[arg(long)]
        full: bool,
    },
    /// Score a bundle on a cohort and write a JSON report.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Run one simulation and print the JSON response.
    Simulate {
        #[arg(long)]
        bundle: PathBuf,
        /// Patient JSON, inline or a path to a file.
        #[arg(long)]
        patient: String,
        #[arg(long, value_parser = parse_stage)]
        decision: Stage,
        #[arg(long, default_value = "imitation", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown decision `{s}` (ic, cc or nd)"))
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}` (imitation or optimal)"))
}

fn read_patient(arg: &str) -> Result<PatientFeatures> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::Io {
            path: arg.into(),
            source: e,
        })?
    };
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCohort {
            seed,
            n,
            out,
            logistic_staging,
            symptoms_out,
            symptoms_n,
        } => {
            let cfg = if logistic_staging {
                SyntheticConfig::logistic_staging()
            } else {
                SyntheticConfig::default()
            };
            let cohort = generate_synthetic_cohort(seed, n, &cfg)?;
            save_cohort_csv(&out, &cohort)?;
            log::info!("wrote {} records to {}", cohort.len(), out.display());
            if let Some(path) = symptoms_out {
                let s = generate_symptom_cohort(seed, symptoms_n, &SymptomSyntheticConfig::default())?;
                save_symptom_csv(&path, &s)?;
                log::info!("wrote {} symptom records to {}", s.len(), path.display());
            }
        }
        Command::Train {
            cohort,
            out_bundle,
            seed,
            symptoms,
            full,
        } => {
            let records = load_cohort_csv(&cohort)?;
            let symptom_records = symptoms.as_ref().map(load_symptom_csv).transpose()?;
            let cfg = if full {
                PipelineConfig::full(seed)
            } else {
                PipelineConfig::desk(seed)
            };
            let bundle = train_pipeline(
                &records,
                symptom_records.as_deref(),
                &cohort.display().to_string(),
                &cfg,
            )?;
            let digest = save_bundle(&bundle, &out_bundle)?;
            println!("{digest}");
        }
        Command::Eval {
            bundle,
            cohort,
            report,
        } => {
            let (b, _) = load_bundle(&bundle)?;
            let records = load_cohort_csv(&cohort)?;
            let r = evaluate(&b.simulator, Some(&b.policy), &b.config.policy.objective, &records)?;
            let json = serde_json::to_string_pretty(&r)?;
            std::fs::write(&report, json).map_err(|e| Error::Io {
                path: report.clone(),
                source: e,
            })?;
            print!("{}", r.render_text());
        }
        Command::Serve { bundle, port } => {
            let loaded = load_bundle(&bundle)?;
            log::info!("loaded bundle {}", loaded.1);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: "tokio runtime".into(),
                source: e,
            })?;
            rt.block_on(seqtwin::app::serve(AppState::new(Some(loaded)), port))?;
        }
        Command::Simulate {
            bundle,
            patient,
            decision,
            strategy,
            seed,
        } => {
            let (b, _) = load_bundle(&bundle)?;
            let mut req = SimulationRequest::new(read_patient(&patient)?, decision, strategy);
            req.seed = seed;
            let resp = handle_simulate(&req, &b, 0)?;
            println!("{}", serde_json::to_string_pretty(&resp)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQTWIN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
