//! `tsreason`: build data, train the tokenizer and language model, evaluate,
//! and compare against a continuous-adapter baseline.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tsreason_core::config::{ConfigError, RunConfig};
use tsreason_core::eval::{compute_lra_dr, read_review_csv};
use tsreason_core::pipeline::*;
use tsreason_core::train::{FINETUNE_STAGE, PRETRAIN_STAGE};

#[derive(Parser, Debug)]
#[command(name = "tsreason", version, about = "Time-series reasoning with temporal tokens")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Force single-threaded, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(subcommand)]
    Dataset(DatasetCmd),
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    #[command(subcommand)]
    Train(TrainCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Train the quantized model and the adapter baseline per seed and compare.
    Ablate,
    /// Small end-to-end run on a scaled-down dataset.
    Demo,
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Simulate, label and write every split.
    Build,
}

#[derive(Subcommand, Debug)]
enum TokenizerCmd {
    /// Fit normalization and the VQ-VAE.
    Train,
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    /// Train the embedding rows of a fresh model.
    Pretrain,
    /// Train every parameter of the pre-trained checkpoint.
    Finetune,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Score conclusion accuracy on the test split.
    Ca,
    /// Write the review sheet for manual annotation.
    ReviewExport,
    /// Aggregate a filled-in review sheet.
    Lra {
        /// Annotated review sheet; defaults to the exported one.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn print_report(report: &tsreason_core::eval::CaReport) {
    for (task, s) in &report.per_task {
        println!("{:<16} {:>4}/{:<4} CA {:.3}", task.name(), s.correct, s.total, s.ca);
    }
    println!("{:<16} {:>9} CA {:.3}", "average", "", report.average);
}

fn tokenizer_train(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let bundle = load_dataset(layout)?;
    let (tokenizer, report, _) = fit_tokenizer(cfg, &bundle)?;
    tokenizer.save(&layout.tokenizer())?;
    write_json(&layout.tokenizer_report(), &report)?;
    println!(
        "held-out recon mse {:.5} (patch variance {:.4}), codebook utilization {:.1}%",
        report.heldout.recon_mse,
        report.heldout.patch_variance,
        100.0 * report.heldout.utilization
    );
    record_artifacts(cfg, layout, "tokenizer train", &[layout.tokenizer(), layout.tokenizer_report()])
}

fn train_pretrain(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let bundle = load_dataset(layout)?;
    let tokenizer = load_tokenizer(layout)?;
    let (ck, history) = run_pretrain(cfg, &bundle, &tokenizer, cfg.encoding)?;
    ck.save(&layout.checkpoint(PRETRAIN_STAGE))?;
    history.write_csv(&layout.history(PRETRAIN_STAGE))?;
    if let Some((start, end)) = history.moving_average_ends(100.min(history.len())) {
        println!("pretrain: {} steps, loss {start:.4} -> {end:.4}", history.len());
    }
    record_artifacts(cfg, layout, "train pretrain", &[layout.checkpoint(PRETRAIN_STAGE), layout.history(PRETRAIN_STAGE)])
}

fn train_finetune(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let ck = load_checkpoint(layout, PRETRAIN_STAGE, "train pretrain")?;
    let bundle = load_dataset(layout)?;
    let tokenizer = load_tokenizer(layout)?;
    let (ck, history) = run_finetune(cfg, &bundle, &tokenizer, ck)?;
    ck.save(&layout.checkpoint(FINETUNE_STAGE))?;
    history.write_csv(&layout.history(FINETUNE_STAGE))?;
    if let Some((start, end)) = history.moving_average_ends(100.min(history.len())) {
        println!("finetune: {} steps, loss {start:.4} -> {end:.4}", history.len());
    }
    record_artifacts(cfg, layout, "train finetune", &[layout.checkpoint(FINETUNE_STAGE), layout.history(FINETUNE_STAGE)])
}

fn eval_ca(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let ck = load_checkpoint(layout, FINETUNE_STAGE, "train finetune")?;
    let bundle = load_dataset(layout)?;
    let tokenizer = load_tokenizer(layout)?;
    let records = evaluate_checkpoint(cfg, &ck, &tokenizer, &bundle.finetune_test)?;
    write_records(&layout.records(), &records)?;
    let report = score(&records)?;
    write_json(&layout.report(), &report)?;
    print_report(&report);
    record_artifacts(cfg, layout, "eval ca", &[layout.records(), layout.report()])
}

fn eval_review_export(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let path = layout.records();
    if !path.exists() {
        return Err(PipelineError::MissingArtifact { what: "evaluation records", path: path.display().to_string(), hint: "eval ca" });
    }
    let records = read_records(&path)?;
    let review = review_bundle(cfg, layout, &records)?;
    println!("wrote {}", review.display());
    record_artifacts(cfg, layout, "eval review-export", &[review])
}

fn eval_lra(cfg: &RunConfig, layout: &Layout, annotations: Option<PathBuf>) -> Result<(), PipelineError> {
    let path = annotations.unwrap_or_else(|| layout.review());
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            what: "annotated review sheet",
            path: path.display().to_string(),
            hint: "eval review-export",
        });
    }
    let metrics = compute_lra_dr(&read_review_csv(&path)?)?;
    let out = layout.root.join("review_metrics.json");
    write_json(&out, &metrics)?;
    println!("LRA {:.3}  DR {:.3}  over {} annotated rows", metrics.lra, metrics.dr, metrics.annotated);
    record_artifacts(cfg, layout, "eval lra", &[out])
}

fn ablate(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let dir = layout.ablation();
    std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    let mut summaries = Vec::new();
    let report = run_ablation(cfg, |seed, run| {
        println!("seed {seed} {}: average CA {:.3}", run.encoding.name(), run.report.average);
        summaries.push((seed, run.encoding, run.report.clone()));
    })?;
    let csv = dir.join("report.csv");
    let txt = dir.join("report.txt");
    let runs = dir.join("runs.json");
    report.write_csv(&csv)?;
    let text = report.to_text();
    std::fs::write(&txt, &text).map_err(|source| PipelineError::Io { path: txt.display().to_string(), source })?;
    write_json(&runs, &summaries)?;
    print!("{text}");
    record_artifacts(cfg, layout, "ablate", &[csv, txt, runs])
}

fn demo(cfg: &RunConfig, layout: &Layout) -> Result<(), PipelineError> {
    let mut cfg = cfg.clone();
    cfg.dataset = cfg.dataset.scaled(0.01, 2);
    cfg.tokenizer_training.steps = cfg.tokenizer_training.steps.min(100);
    cfg.tokenizer_training.reseed_every = cfg.tokenizer_training.reseed_every.min(50);
    cfg.finetune.eval_every = 0;
    cfg.eval.review_per_task = cfg.eval.review_per_task.min(1);
    let bundle = make_dataset(&cfg)?;
    save_dataset(layout, &bundle)?;
    let (tokenizer, _, _) = fit_tokenizer(&cfg, &bundle)?;
    tokenizer.save(&layout.tokenizer())?;
    let outcome = train_and_evaluate(&cfg, &bundle, &tokenizer, cfg.encoding)?;
    outcome.checkpoint.save(&layout.checkpoint(FINETUNE_STAGE))?;
    write_records(&layout.records(), &outcome.records)?;
    write_json(&layout.report(), &outcome.report)?;
    print_report(&outcome.report);
    let mut files = dataset_files(layout);
    files.extend([layout.tokenizer(), layout.checkpoint(FINETUNE_STAGE), layout.records(), layout.report()]);
    record_artifacts(&cfg, layout, "demo", &files)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    let layout = Layout::new(&cfg.out);
    std::fs::create_dir_all(&layout.root).map_err(|source| PipelineError::Io { path: layout.root.display().to_string(), source })?;
    match cli.command {
        Command::Dataset(DatasetCmd::Build) => {
            let bundle = make_dataset(&cfg)?;
            save_dataset(&layout, &bundle)?;
            println!("{} samples, {} regenerated windows", bundle.manifest.total_samples, bundle.manifest.regenerations);
            record_artifacts(&cfg, &layout, "dataset build", &dataset_files(&layout))
        }
        Command::Tokenizer(TokenizerCmd::Train) => tokenizer_train(&cfg, &layout),
        Command::Train(TrainCmd::Pretrain) => train_pretrain(&cfg, &layout),
        Command::Train(TrainCmd::Finetune) => train_finetune(&cfg, &layout),
        Command::Eval(EvalCmd::Ca) => eval_ca(&cfg, &layout),
        Command::Eval(EvalCmd::ReviewExport) => eval_review_export(&cfg, &layout),
        Command::Eval(EvalCmd::Lra { annotations }) => eval_lra(&cfg, &layout, annotations),
        Command::Ablate => ablate(&cfg, &layout),
        Command::Demo => demo(&cfg, &layout),
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(ConfigError::Invalid(_)) => 2,
        PipelineError::MissingArtifact { .. } => 3,
        PipelineError::Io { .. } | PipelineError::Config(ConfigError::Io { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
