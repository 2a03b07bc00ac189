//! Command-line front end: `synth`, `train`, `infer`, `eval`, `report`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 training
//! divergence, 4 evaluation mismatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::data::{
    read_manifest, read_report, synth_dataset, write_report, EvalReport, SyntheticSpec,
    TestSetScores,
};
use crate::evalkit::{
    lpw_normalize, render_report, score_asr, score_st, word_wer, BleuMode, EvalError,
};
use crate::microlm::LmError;
use crate::pipeline::{
    run_inference, run_training, PipelineConfig, PipelineError, RecordOutput, SpeechLm,
};

pub const DATA_DIR_ENV: &str = "STLLM_DATA_DIR";
pub const TRANSCRIPTS_FILE: &str = "transcripts.txt";
pub const TRANSLATIONS_FILE: &str = "translations.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Lm(LmError::Divergence { .. }) => CliError::Divergence(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyReference => CliError::Data(e.to_string()),
            EvalError::SegmentCount { .. } => CliError::Mismatch(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stllm",
    version,
    about = "Speech features to transcript and translation with a small causal LM"
)]
pub struct Cli {
    /// Default directory for manifests and datasets.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Asr,
    St,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Doc,
    Reseg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (features, manifest, text pairs).
    Synth {
        /// Output directory; defaults to the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 24)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 256)]
        text_pairs: usize,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional `step,loss` CSV.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Decode a manifest into transcript and translation hypothesis files.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Keep blank runs when collapsing frames.
        #[arg(long)]
        keep_blanks: bool,
        /// Directory for the two hypothesis files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a hypothesis file against manifest references.
    Eval {
        /// One segment per line.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, value_enum, default_value = "reseg")]
        mode: Mode,
        /// Report file; merged into when it exists.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "system")]
        system: String,
        #[arg(long, default_value = "test")]
        test_set: String,
    },
    /// Render one or more reports as tables.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

/// Parses `args` and runs the command, writing normal output to `out`.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn data_path(
    cli: &Cli,
    explicit: &Option<PathBuf>,
    default_name: &str,
) -> Result<PathBuf, CliError> {
    match (explicit, &cli.data_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(default_name)),
        (None, None) => Err(CliError::Usage(format!(
            "no path given and {DATA_DIR_ENV} is not set (expected {default_name})"
        ))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    match &cli.command {
        Command::Synth {
            out: dir,
            seed,
            n,
            vocab,
            dim,
            noise,
            text_pairs,
        } => {
            let dir = match (dir, &cli.data_dir) {
                (Some(d), _) => d.clone(),
                (None, Some(d)) => d.clone(),
                (None, None) => {
                    return Err(CliError::Usage(format!(
                        "--out missing and {DATA_DIR_ENV} not set"
                    )))
                }
            };
            let spec = SyntheticSpec {
                seed: *seed,
                n_samples: *n,
                vocab_size: *vocab,
                dim: *dim,
                noise_sigma: *noise,
                text_pairs: *text_pairs,
                ..SyntheticSpec::default()
            };
            let manifest = synth_dataset(&spec, &dir)?;
            writeln!(out, "wrote {} records to {}", manifest.len(), dir.display()).map_err(io)?;
        }
        Command::Train {
            config,
            manifest,
            checkpoint,
            loss_curve,
        } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            let manifest =
                read_manifest(data_path(cli, manifest, crate::data::synth::MANIFEST_FILE)?)?;
            let result = run_training(&cfg, &manifest, |step, loss| {
                if step % 500 == 0 {
                    let _ = writeln!(err, "step {step} loss {loss:.5}");
                }
            })?;
            result.model.save(Some(&result.adam), checkpoint)?;
            if let Some(p) = loss_curve {
                write_file(p, &result.curve.to_csv())?;
            }
            writeln!(
                out,
                "trained {} steps, final loss {:.6}, checkpoint {}",
                result.curve.points.len(),
                result.final_loss,
                checkpoint.display()
            )
            .map_err(io)?;
        }
        Command::Infer {
            checkpoint,
            manifest,
            beam,
            max_len,
            keep_blanks,
            out_dir,
        } => {
            let (mut model, _) = SpeechLm::load(checkpoint)?;
            if let Some(b) = beam {
                if *b == 0 {
                    return Err(CliError::Usage("--beam must be >= 1".into()));
                }
                model.config.decode.beam = *b;
            }
            if let Some(m) = max_len {
                if *m == 0 {
                    return Err(CliError::Usage("--max-len must be >= 1".into()));
                }
                model.config.decode.max_len = *m;
            }
            if *keep_blanks {
                model.config.keep_blanks = true;
            }
            let manifest =
                read_manifest(data_path(cli, manifest, crate::data::synth::MANIFEST_FILE)?)?;
            let records = run_inference(&model, &manifest);
            let mut transcripts = String::new();
            let mut translations = String::new();
            for r in &records {
                transcripts.push_str(r.transcript());
                transcripts.push('\n');
                translations.push_str(r.translation());
                translations.push('\n');
                match &r.output {
                    RecordOutput::Decoded { .. } => {}
                    RecordOutput::Malformed { .. } => {
                        let _ = writeln!(err, "{}: no translation separator generated", r.id);
                    }
                    RecordOutput::Failed { message } => {
                        let _ = writeln!(err, "{}: {message}", r.id);
                    }
                }
            }
            fs::create_dir_all(out_dir).map_err(io)?;
            write_file(&out_dir.join(TRANSCRIPTS_FILE), &transcripts)?;
            write_file(&out_dir.join(TRANSLATIONS_FILE), &translations)?;
            let failed = records
                .iter()
                .filter(|r| !matches!(r.output, RecordOutput::Decoded { .. }))
                .count();
            writeln!(
                out,
                "decoded {} records ({failed} with problems)",
                records.len()
            )
            .map_err(io)?;
        }
        Command::Eval {
            hyp,
            manifest,
            task,
            mode,
            out: report_path,
            system,
            test_set,
        } => {
            let hyps = read_lines(hyp)?;
            let manifest =
                read_manifest(data_path(cli, manifest, crate::data::synth::MANIFEST_FILE)?)?;
            let refs: Vec<String> = match task {
                Task::Asr => manifest
                    .records()
                    .iter()
                    .map(|r| r.transcript.clone())
                    .collect(),
                Task::St => manifest
                    .records()
                    .iter()
                    .map(|r| {
                        r.translation.clone().ok_or_else(|| {
                            CliError::Data(format!("record {} has no translation", r.id))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            };
            if refs.is_empty() {
                return Err(CliError::Data("reference manifest is empty".into()));
            }
            if *mode == Mode::Doc && hyps.len() != refs.len() {
                return Err(EvalError::SegmentCount {
                    hyp: hyps.len(),
                    refs: refs.len(),
                }
                .into());
            }
            let mut scores = TestSetScores {
                id: test_set.clone(),
                hyp_segments: hyps.len(),
                ref_segments: refs.len(),
                ..Default::default()
            };
            match (task, mode) {
                (Task::Asr, Mode::Reseg) => scores.wer = Some(score_asr(&hyps, &refs)?.wer()),
                (Task::Asr, Mode::Doc) => {
                    let words = |xs: &[String]| -> Vec<String> {
                        xs.iter()
                            .flat_map(|s| {
                                lpw_normalize(s)
                                    .split_whitespace()
                                    .map(str::to_string)
                                    .collect::<Vec<_>>()
                            })
                            .collect()
                    };
                    scores.wer = Some(word_wer(&words(&refs), &words(&hyps))?.wer());
                }
                (Task::St, Mode::Doc) => {
                    scores.bleu_doc = Some(score_st(&hyps, &refs, BleuMode::DocAsWhole)?.score)
                }
                (Task::St, Mode::Reseg) => {
                    scores.bleu_reseg = Some(score_st(&hyps, &refs, BleuMode::Resegmented)?.score)
                }
            }
            let mut report = if report_path.exists() {
                read_report(report_path)?
            } else {
                EvalReport::new(system.clone())
            };
            report.system = system.clone();
            report.upsert(scores);
            write_report(&report, report_path)?;
            write!(out, "{}", render_report(&[report])).map_err(io)?;
        }
        Command::Report { reports } => {
            let loaded = reports
                .iter()
                .map(read_report)
                .collect::<Result<Vec<_>, _>>()?;
            write!(out, "{}", render_report(&loaded)).map_err(io)?;
        }
    }
    Ok(())
}
