use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use casc_core::backends::conformance::{self, Mode, Transcript};
use casc_core::backends::protocol::{handle_body, serve};
use casc_core::backends::{AnalyticBackend, Backend, BackendError, ExternalBackend};
use casc_core::orchestrator::{self, PipelineConfig, ReportFormat, RunOptions, SweepParam};
use casc_core::synth::{self, SynthConfig};
use casc_core::tensor::Tensor;
use casc_core::{metrics, Error, Mask3D};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "casc", version, about = "Label-free brain tumor segmentation cascade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline, skipping stages whose inputs are unchanged.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stage names; all stages by default.
        #[arg(long, value_delimiter = ',')]
        stage: Option<Vec<String>>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rerun the affected part of the pipeline for each value of alpha or beta.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score a directory of predicted masks against ground truth, matched by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// HD95 when exactly one mask is empty; the volume diagonal by default.
        #[arg(long)]
        penalty_mm: Option<f64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Replay a recorded protocol session against a backend.
    BackendCheck {
        #[arg(long)]
        transcript: PathBuf,
        /// Require byte-identical responses instead of matching shapes.
        #[arg(long)]
        strict: bool,
        /// Write the built-in golden session to the transcript path instead.
        #[arg(long)]
        record: bool,
        /// Adapter command to check; the in-process analytic backend otherwise.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Serve the analytic backend over the protocol on stdin/stdout.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus (input/ and gt/) under a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Table,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency { .. } => 3,
        Error::Backend(_) | Error::Stage { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path, jobs: Option<usize>) -> casc_core::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> casc_core::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            stage,
            force,
            jobs,
        } => {
            let cfg = load_config(&config, jobs)?;
            let backend = cfg.build_backend()?;
            let report = orchestrator::run(&cfg, backend.as_ref(), &RunOptions { stages: stage, force })?;
            for (name, action) in &report.actions {
                println!("{name}\t{}", serde_json::to_value(action)?.as_str().unwrap_or("?"));
            }
            if cfg.report_format != ReportFormat::Json {
                if let Ok(table) = std::fs::read_to_string(cfg.workdir.join(orchestrator::stages::REPORT_TABLE)) {
                    if report.actions.iter().any(|(n, _)| n == "eval") {
                        print!("{table}");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            param,
            values,
            jobs,
        } => {
            let cfg = load_config(&config, jobs)?;
            let param: SweepParam = param.parse()?;
            let backend = cfg.build_backend()?;
            let report = orchestrator::sweep(&cfg, backend.as_ref(), param, &values)?;
            print!("{}", report.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            pred,
            gt,
            penalty_mm,
            format,
        } => {
            let predictions: BTreeMap<String, Mask3D> = read_mask_dir(&pred)?
                .into_iter()
                .map(|(id, (m, _))| (id, m))
                .collect();
            let truths = read_mask_dir(&gt)?;
            let report = metrics::evaluate_by_id(&predictions, &truths, penalty_mm)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Table => print!("{}", report.to_table("prediction")),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BackendCheck {
            transcript,
            strict,
            record,
            command,
        } => {
            if record {
                let t = conformance::golden_transcript();
                casc_core::fsutil::write_atomic(&transcript, &t.to_bytes())?;
                println!("wrote {} exchanges to {}", t.exchanges.len(), transcript.display());
                return Ok(ExitCode::SUCCESS);
            }
            let file = std::fs::File::open(&transcript)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", transcript.display())))?;
            let t = Transcript::read_from(&mut BufReader::new(file))
                .map_err(|e| Error::Format(format!("{}: {e}", transcript.display())))?;
            let mode = if strict { Mode::Strict } else { Mode::Shape };
            let report = if command.is_empty() {
                let backend = AnalyticBackend::default();
                conformance::replay(&t, mode, |body| Ok(handle_body(&backend, body)))
            } else {
                let ext = ExternalBackend::spawn(&command[0], &command[1..], 1)?;
                conformance::replay(&t, mode, |body| ext.exchange_raw(body))
            };
            for m in &report.mismatches {
                println!("FAIL #{} {}: {}", m.index, m.op, m.reason);
            }
            println!(
                "{} of {} exchanges conform",
                report.total - report.mismatches.len(),
                report.total
            );
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Backend(BackendError::protocol(format!(
                    "{} exchanges do not conform",
                    report.mismatches.len()
                ))))
            }
        }
        Command::Serve { config } => {
            let backend: Box<dyn Backend> = match config {
                Some(path) => {
                    let mut cfg = PipelineConfig::load(&path)?;
                    cfg.backend = match cfg.backend {
                        b @ orchestrator::BackendConfig::Analytic(_) => b,
                        orchestrator::BackendConfig::External { .. } => {
                            return Err(Error::Config("serve only hosts the analytic backend".into()))
                        }
                    };
                    cfg.build_backend()?
                }
                None => Box::new(AnalyticBackend::default()),
            };
            let stdin = std::io::stdin().lock();
            let stdout = BufWriter::new(std::io::stdout().lock());
            serve(backend.as_ref(), stdin, stdout)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                count,
                size,
                seed,
                ..Default::default()
            };
            if size < 16 {
                return Err(Error::Config("synthetic volumes need size >= 16".into()));
            }
            let cases = synth::generate(&cfg);
            synth::write_corpus(&out, &cases)?;
            println!("wrote {} volumes to {}", cases.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Masks in `dir/*.tns` keyed by file stem, with their recorded spacing.
fn read_mask_dir(dir: &Path) -> casc_core::Result<BTreeMap<String, (Mask3D, [f64; 3])>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_none_or(|e| e != "tns") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(String::from) else {
            continue;
        };
        let t = Tensor::load(&path)?;
        let spacing = match t.spacing.as_deref() {
            Some([a, b, c]) => [*a, *b, *c],
            _ => casc_core::volume::DEFAULT_SPACING,
        };
        out.insert(id, (t.into_mask3()?, spacing));
    }
    Ok(out)
}
