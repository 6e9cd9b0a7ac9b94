use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use synergy_core::config::RunConfig;
use synergy_core::data::{encode_dataset, generate_records, read_dataset, read_jsonl, vocab_corpus, write_jsonl, EncodedDialog};
use synergy_core::eval::{ensemble_files, evaluate, report_from_scores, score_dataset, EvalMode, TurnScores};
use synergy_core::generative::beam_search;
use synergy_core::text::Vocabulary;
use synergy_core::train::{Checkpoint, Trainer};
use synergy_core::{Error, Model64, Result};

#[derive(Parser)]
#[command(name = "synergy", version, about = "Two-stage answer ranking for synthetic visual dialog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set lr=0.003 --set data.candidates=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog dataset as JSONL.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary from a dataset's captions, questions and answers.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, log.jsonl and manifest.json to DIR.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; built from the training data when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also keep `epoch-N.json` every N epochs.
        #[arg(long, default_value_t = 0)]
        save_every: usize,
    },
    /// Score a dataset and write a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "two-stage")]
        mode: EvalMode,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-turn scores as JSONL.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Dump per-turn rankings with both stages' scores as JSONL.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "two-stage")]
        mode: EvalMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate answers with beam search from a generative checkpoint.
    Beam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sum several scores files turn by turn.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset to compute metrics of the ensemble on.
        #[arg(long, requires = "report")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, seed, out } => {
            let cfg = config.load()?;
            let records = generate_records(&cfg.data, seed.unwrap_or(cfg.seed))?;
            write_jsonl(create(&out)?, &records)
        }
        Command::BuildVocab { data, min_count, out } => {
            let records = read_dataset(open(&data)?)?;
            let vocab = Vocabulary::build(&vocab_corpus(&records), min_count)?;
            std::fs::write(out, vocab.to_json()?)?;
            Ok(())
        }
        Command::Train {
            config,
            data,
            vocab,
            out,
            resume,
            save_every,
        } => train(config, &data, vocab.as_deref(), &out, resume.as_deref(), save_every),
        Command::Evaluate {
            checkpoint,
            data,
            mode,
            report,
            scores,
        } => {
            let (model, data) = load_model(&checkpoint, &data)?;
            let eval = evaluate(&model, &data, mode)?;
            std::fs::write(report, serde_json::to_string_pretty(&eval.report)?)?;
            if let Some(path) = scores {
                let lines: Vec<TurnScores> = eval.turns.iter().map(|t| t.turn_scores()).collect();
                write_jsonl(create(&path)?, &lines)?;
            }
            let m = &eval.report.metrics;
            println!(
                "ndcg {:.4}  mrr {:.4}  r@1 {:.4}  r@5 {:.4}  r@10 {:.4}  mean rank {:.3}  ({} turns)",
                m.ndcg, m.mrr, m.r1, m.r5, m.r10, m.mean_rank, m.turns
            );
            Ok(())
        }
        Command::Rank {
            checkpoint,
            data,
            mode,
            out,
        } => {
            let (model, data) = load_model(&checkpoint, &data)?;
            let turns = score_dataset(&model, &data, mode)?;
            match out {
                Some(path) => write_jsonl(create(&path)?, &turns),
                None => write_jsonl(std::io::stdout().lock(), &turns),
            }
        }
        Command::Beam {
            checkpoint,
            data,
            width,
            max_len,
            out,
        } => {
            let (model, data) = load_model(&checkpoint, &data)?;
            let lines = beam(&model, &data, width, max_len)?;
            match out {
                Some(path) => write_jsonl(create(&path)?, &lines),
                None => write_jsonl(std::io::stdout().lock(), &lines),
            }
        }
        Command::Ensemble {
            scores,
            out,
            data,
            report,
        } => {
            let files = scores
                .iter()
                .map(|p| read_jsonl::<_, TurnScores>(open(p)?))
                .collect::<Result<Vec<_>>>()?;
            let combined = ensemble_files(&files)?;
            write_jsonl(create(&out)?, &combined)?;
            if let (Some(data), Some(report)) = (data, report) {
                let records = read_dataset(open(&data)?)?;
                let vocab = Vocabulary::build(&vocab_corpus(&records), 0)?;
                let encoded = encode_dataset(&records, &vocab)?;
                let metrics = report_from_scores(&encoded, &combined)?;
                std::fs::write(report, serde_json::to_string_pretty(&json!({ "metrics": metrics }))?)?;
            }
            Ok(())
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn feature_dim(data: &[EncodedDialog]) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    if let Some(d) = data.iter().find(|d| d.feature_dim != first.feature_dim) {
        return Err(Error::Data(format!(
            "dialog {} has feature width {}, expected {}",
            d.dialog_id, d.feature_dim, first.feature_dim
        )));
    }
    Ok(first.feature_dim)
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<(Model64, Vec<EncodedDialog>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model::<f64>()?;
    let records = read_dataset(open(data)?)?;
    let encoded = encode_dataset(&records, &model.vocab)?;
    Ok((model, encoded))
}

fn train(
    config: ConfigArgs,
    data: &Path,
    vocab: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    save_every: usize,
) -> Result<()> {
    let records = read_dataset(open(data)?)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if config.config.is_some() || !config.overrides.is_empty() {
                let cfg = config.load()?;
                if cfg.model != ckpt.config.model || cfg.hidden != ckpt.config.hidden {
                    return Err(Error::Config("cannot change the model shape when resuming".into()));
                }
                ckpt.config = cfg;
            }
            Trainer::<f64>::from_checkpoint(&ckpt)?
        }
        None => {
            let cfg = config.load()?;
            let vocab = match vocab {
                Some(path) => Vocabulary::from_json(&std::fs::read_to_string(path)?)?,
                None => Vocabulary::build(&vocab_corpus(&records), cfg.min_count)?,
            };
            let encoded = encode_dataset(&records, &vocab)?;
            Trainer::new(cfg, vocab, feature_dim(&encoded)?)?
        }
    };
    let encoded = encode_dataset(&records, &trainer.model.vocab)?;
    if feature_dim(&encoded)? != trainer.model.feature_dim {
        return Err(Error::Data("dataset feature width does not match the checkpoint".into()));
    }

    std::fs::create_dir_all(out)?;
    let cfg = &trainer.model.config;
    let manifest = json!({
        "config": cfg,
        "data": data.display().to_string(),
        "dialogs": encoded.len(),
        "turns": encoded.iter().map(|d| d.turns.len()).sum::<usize>(),
        "vocab_size": trainer.model.vocab.len(),
        "feature_dim": trainer.model.feature_dim,
        "parameters": trainer.model.params.ids().map(|id| trainer.model.params.get(id).numel()).sum::<usize>(),
        "batch": {
            "turns_per_step": cfg.accumulate,
            "shuffle": "all turns of the dataset, reshuffled every epoch",
        },
        "resumed_from": resume.map(|p| p.display().to_string()),
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let mut log = BufWriter::new(File::options().create(true).append(true).open(out.join("log.jsonl"))?);
    let result = trainer.train(&encoded, |t, entry| {
        writeln!(log, "{}", serde_json::to_string(entry)?)?;
        log.flush()?;
        eprintln!(
            "epoch {:>3} {:<7} lr {:.2e} loss {:.5}",
            entry.epoch, entry.phase, entry.lr, entry.loss
        );
        let ckpt = t.checkpoint();
        ckpt.save(&out.join("checkpoint.json"))?;
        if save_every > 0 && t.epoch % save_every == 0 {
            ckpt.save(&out.join(format!("epoch-{}.json", t.epoch)))?;
        }
        Ok(())
    });
    if result.is_err() && trainer.epoch == 0 {
        trainer.checkpoint().save(&out.join("checkpoint.json"))?;
    }
    result
}

fn beam(model: &Model64, data: &[EncodedDialog], width: Option<usize>, max_len: Option<usize>) -> Result<Vec<serde_json::Value>> {
    let dec = model
        .layout
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Config("beam search needs a generative checkpoint".into()))?;
    let width = width.unwrap_or(model.config.beam_width);
    let max_len = max_len.unwrap_or(model.config.beam_max_len);
    let mut lines = Vec::new();
    for dialog in data {
        for (t, turn) in dialog.turns.iter().enumerate() {
            let (question_h, context) = model.decoder_inputs(dialog, turn)?;
            let hyps = beam_search(&model.params, &model.layout.text.embedding, dec, &question_h, &context, width, max_len)?;
            let candidates: Vec<_> = hyps
                .iter()
                .map(|h| {
                    json!({
                        "answer": model.vocab.decode(h.answer()).join(" "),
                        "log_prob": h.log_prob,
                        "complete": h.is_complete(),
                    })
                })
                .collect();
            lines.push(json!({ "dialog_id": dialog.dialog_id, "turn": t, "candidates": candidates }));
        }
    }
    Ok(lines)
}
