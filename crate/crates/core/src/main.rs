use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lda::checkpoints::{self, MergeSource};
use lda::{Error, Result};
use lda::frontend::{read_corpus, write_corpus, Corpus, Utterance};
use lda::harness::{self, EvalReport, PeakTracker, RunConfig};
use lda::nst::ledger_to_tsv;
use lda::Model;

#[derive(Parser)]
#[command(name = "lda", version, about = "Language-dependent adapter finetuning on a synthetic multilingual corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
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

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Even-id half of the held-out set, used for checkpoint selection.
    Dev,
    /// Odd-id half of the held-out set.
    Test,
    /// The whole held-out set.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the multilingual backbone (adapters stay at identity).
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapter-only finetuning over a frozen backbone; writes periodic
    /// checkpoints, dev reports, per-language peaks and the merged model.
    FinetuneLda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monolingual finetuning of every parameter for one language.
    FinetuneFull {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lang: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noisy student training ending in an adapter-only student.
    NstRun {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine per-language adapter slices from several checkpoints.
    MergeAdapters {
        /// Checkpoint supplying the backbone and any unlisted languages.
        #[arg(long)]
        base: PathBuf,
        /// Source checkpoint; pair each with a --lang, in order.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        lang: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reset one language's adapter slice to the identity.
    ZeroAdapter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lang: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-language WER of both passes as a TSV table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative WER reduction of a candidate report against a baseline.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_data(dir: &Path) -> Result<Corpus<f32>> {
    let corpus = read_corpus(dir)?;
    if corpus.supervised.is_empty() {
        return Err(Error::Data(format!("{} holds no supervised utterances", dir.display())));
    }
    Ok(corpus)
}

fn check_model(cfg: &RunConfig, model: &Model<f32>) -> Result<()> {
    if model.config != cfg.model {
        return Err(Error::Config("checkpoint architecture differs from the run configuration".into()));
    }
    Ok(())
}

fn provenance(cfg: &RunConfig, stage: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), stage.to_string()),
        ("run_config_digest".to_string(), format!("{:016x}", cfg.digest())),
    ])
}

fn save_tracker(tracker: &PeakTracker, cfg: &RunConfig, stage: &str, out: &Path) -> Result<()> {
    let mut reports = String::new();
    for r in &tracker.reports {
        reports.push_str(&r.to_tsv());
    }
    write(&out.join("dev_reports.tsv"), &reports)?;
    let mut peaks = String::from("language\tstep\twer_cascaded\n");
    for (l, (s, w)) in tracker.peaks()? {
        peaks.push_str(&format!("{l}\t{s}\t{w:.6}\n"));
    }
    write(&out.join("peaks.tsv"), &peaks)?;
    for (step, model) in &tracker.snapshots {
        checkpoints::save_with_metadata(model, &provenance(cfg, stage), out.join(format!("step_{step:06}.ldac")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.run_config()?;
            let corpus = harness::generate(&cfg)?;
            write_corpus(&out, &corpus)?;
            write(&out.join("run.cfg"), &cfg.to_text())?;
            eprintln!(
                "wrote {} supervised, {} unlabeled, {} held-out utterances to {}",
                corpus.supervised.len(),
                corpus.unlabeled.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::TrainBackbone { common, data, out } => {
            let cfg = common.run_config()?;
            let corpus = load_data(&data)?;
            let model = harness::train_backbone(&cfg, &corpus)?;
            checkpoints::save_with_metadata(&model, &provenance(&cfg, "backbone"), &out)?;
        }
        Command::FinetuneLda {
            common,
            data,
            checkpoint,
            out,
        } => {
            let cfg = common.run_config()?;
            let corpus = load_data(&data)?;
            let backbone = checkpoints::load(&checkpoint)?;
            check_model(&cfg, &backbone)?;
            let (dev, _) = harness::dev_test_split(&corpus.test);
            let tracker = harness::finetune_lda(&cfg, &backbone, &corpus.supervised, &dev)?;
            save_tracker(&tracker, &cfg, "lda", &out)?;
            let merged = tracker.merged(&backbone)?;
            checkpoints::save_with_metadata(&merged, &provenance(&cfg, "lda-merged"), out.join("merged.ldac"))?;
        }
        Command::FinetuneFull {
            common,
            data,
            checkpoint,
            lang,
            out,
        } => {
            let cfg = common.run_config()?;
            let corpus = load_data(&data)?;
            let backbone = checkpoints::load(&checkpoint)?;
            check_model(&cfg, &backbone)?;
            let (dev, _) = harness::dev_test_split(&corpus.test);
            let tracker = harness::finetune_full(&cfg, &backbone, &corpus.supervised, &dev, lang)?;
            save_tracker(&tracker, &cfg, "full", &out)?;
            let peak = tracker.peak_model(lang)?;
            checkpoints::save_with_metadata(peak, &provenance(&cfg, "full-peak"), out.join("peak.ldac"))?;
        }
        Command::NstRun {
            common,
            data,
            checkpoint,
            out,
        } => {
            let cfg = common.run_config()?;
            let corpus = load_data(&data)?;
            if corpus.unlabeled.is_empty() {
                return Err(Error::Data(format!("{} holds no unlabeled utterances", data.display())));
            }
            let backbone = checkpoints::load(&checkpoint)?;
            check_model(&cfg, &backbone)?;
            let (dev, _) = harness::dev_test_split(&corpus.test);
            let (outcome, tracker) = harness::nst_run(&cfg, &backbone, &corpus, &dev)?;
            write(&out.join("ledger.tsv"), &ledger_to_tsv(&outcome.ledger))?;
            save_tracker(&tracker, &cfg, "nst", &out)?;
            let merged = tracker.merged(&backbone)?;
            checkpoints::save_with_metadata(&merged, &provenance(&cfg, "nst-merged"), out.join("merged.ldac"))?;
        }
        Command::MergeAdapters {
            base,
            checkpoint,
            lang,
            out,
        } => {
            if checkpoint.len() != lang.len() {
                return Err(Error::Config(format!(
                    "{} --checkpoint values but {} --lang values",
                    checkpoint.len(),
                    lang.len()
                )));
            }
            let base_model = checkpoints::load(&base)?;
            let models = checkpoint.iter().map(checkpoints::load).collect::<Result<Vec<_>>>()?;
            let sources: Vec<MergeSource> = models
                .iter()
                .zip(&lang)
                .zip(&checkpoint)
                .map(|((model, &language), path)| MergeSource {
                    language,
                    model,
                    label: path.display().to_string(),
                })
                .collect();
            let merged = checkpoints::merge_adapters(&base_model, &sources)?;
            checkpoints::save(&merged, &out)?;
        }
        Command::ZeroAdapter { checkpoint, lang, out } => {
            let mut model = checkpoints::load(&checkpoint)?;
            checkpoints::zero_adapter(&mut model, lang)?;
            checkpoints::save(&model, &out)?;
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
            out,
        } => {
            if checkpoint.is_empty() {
                return Err(Error::Config("evaluate needs at least one --checkpoint".into()));
            }
            let cfg = common.run_config()?;
            let corpus = read_corpus(&data)?;
            let (dev, test) = harness::dev_test_split(&corpus.test);
            let utts: Vec<Utterance<f32>> = match split {
                Split::Dev => dev,
                Split::Test => test,
                Split::All => corpus.test,
            };
            let mut text = String::new();
            for path in &checkpoint {
                let model = checkpoints::load(path)?;
                let name = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                let report = harness::evaluate_model(&model, &name, &utts, &cfg.pipeline(false))?;
                text.push_str(&report.to_tsv());
            }
            emit(out.as_deref(), &text)?;
        }
        Command::Report { baseline, candidate, out } => {
            let read = |p: &Path| -> Result<EvalReport> {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                EvalReport::parse_tsv(&text)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Data(format!("{} holds no report", p.display())))
            };
            let werr = harness::report_werr(&read(&baseline)?, &read(&candidate)?)?;
            emit(out.as_deref(), &werr.to_tsv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
