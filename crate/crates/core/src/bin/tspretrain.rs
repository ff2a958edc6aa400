use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tspretrain::data::{write_dataset_dir, Dataset, LabeledSeries};
use tspretrain::evaluation::{average_rank, emit_report, rank_csv, ResultsMatrix};
use tspretrain::generators::GeneratorKind;
use tspretrain::models::Model;
use tspretrain::pipeline::{
    evaluate_test, expand_run_file, fine_tune, generate_pretraining_set, load_records, load_source, prepare,
    pretrain_stage, run_all, ExperimentConfig, RunFile, Status,
};
use tspretrain::{Error, Result};

#[derive(Parser)]
#[command(name = "tspretrain", version, about = "Pretraining and classification experiments on time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a config file and write one record per experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Pretrain a model and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "pretrained.ckpt")]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint (or a fresh model) and report test accuracy.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to save the fine-tuned model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw series from a generator fitted on the configured dataset.
    Generate {
        #[arg(long)]
        kind: GeneratorKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "generated")]
        out: PathBuf,
    },
    /// Average ranks of the records in a directory.
    Rank {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        archive: Option<String>,
    },
    /// Rank table, gain regressions and scatter points of the records in a directory.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long)]
        archive: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn rank_table(records: &Path, archive: Option<String>) -> Result<(tspretrain::evaluation::RankTable, Vec<tspretrain::pipeline::ExperimentRecord>)> {
    let recs = load_records(records)?;
    let mut table = average_rank(&ResultsMatrix::from_records(&recs)?)?;
    table.archive = archive;
    Ok((table, recs))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, workers } => {
            let cfgs = expand_run_file(&RunFile::load(&config)?)?;
            eprintln!("running {} experiment(s) on {} worker(s)", cfgs.len(), workers.max(1));
            let records = run_all(&cfgs, &out, workers)?;
            let mut failed = 0;
            for r in &records {
                match &r.status {
                    Status::Complete => println!(
                        "{}\t{}\t{}\t{}",
                        r.config_hash,
                        r.method,
                        r.dataset,
                        r.test_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                    ),
                    Status::Failed { stage, message } => {
                        failed += 1;
                        println!("{}\t{}\t{}\tFAILED in {stage}: {message}", r.config_hash, r.method, r.dataset);
                    }
                }
            }
            if failed > 0 {
                return Err(Error::Usage(format!("{failed} experiment(s) failed")));
            }
        }
        Command::Pretrain { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = prepare(&load_source(&cfg.dataset)?, &cfg)?;
            let pre = pretrain_stage(&cfg, &bundle)?;
            if let Some(n) = pre.n_gen {
                eprintln!("pretrained on {n} generated series");
            }
            for (epoch, loss) in pre.losses.iter().enumerate() {
                println!("{}\t{loss:.6}", epoch + 1);
            }
            pre.model.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Finetune { config, checkpoint, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = prepare(&load_source(&cfg.dataset)?, &cfg)?;
            let mut model = match &checkpoint {
                Some(p) => Model::load(p)?,
                None => pretrain_stage(&ExperimentConfig { ptm: None, ..cfg.clone() }, &bundle)?.model,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let outcome = fine_tune(
                &mut model,
                &bundle.train,
                &bundle.validation,
                bundle.num_classes(),
                &cfg.finetune,
                cfg.validate_every,
                &mut rng,
            )?;
            for p in &outcome.validation {
                println!("epoch {}\tvalidation {:.4}", p.epoch, p.accuracy);
            }
            println!("selected epoch {}", outcome.selected_epoch);
            println!("test accuracy {:.4}", evaluate_test(&model, &bundle.test)?);
            if let Some(p) = out {
                model.save(&p)?;
            }
        }
        Command::Generate { kind, n, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = load_source(&cfg.dataset)?;
            let bundle = prepare(&dataset, &cfg)?;
            let series = generate_pretraining_set(&cfg, kind, &bundle, n)?;
            let samples = series.into_iter().map(|series| LabeledSeries { series, label: 0 }).collect();
            let ds = Dataset::new(format!("{}-{}", dataset.name, kind.name()), samples);
            let dir = write_dataset_dir(&ds, &out)?;
            println!("{}", dir.display());
        }
        Command::Rank { records, out, archive } => {
            let (table, _) = rank_table(&records, archive)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let csv = rank_csv(&table);
            let path = out.join("ranks.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
        }
        Command::Report { records, out, archive } => {
            let (table, recs) = rank_table(&records, archive)?;
            for p in emit_report(&table, &recs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
