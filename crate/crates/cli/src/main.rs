use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ansrec::config::RunConfig;
use ansrec::diagnostics::{
    histograms_svg, minmax_svg, read_histogram_csv, read_minmax_csv, write_histogram_csv,
    write_minmax_csv, write_overlap_csv,
};
use ansrec::report::{
    compare_runs, emit_comparison, emit_report, metric_rows, read_report_json, ReportFormat,
};
use ansrec::runner::{
    evaluate_checkpoint, prepare_splits, run_on_splits, NoObserver, RunOptions, RunRecord,
};
use ansrec::sampler::SamplerKind;

#[derive(Parser)]
#[command(
    name = "ansrec",
    version,
    about = "Negative-sampling experiments for implicit-feedback recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.sampler {
            cfg.sampler = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Remap an interaction log to dense ids and write remap tables.
    Ingest {
        input: PathBuf,
        /// Lines carry a third timestamp column.
        #[arg(long)]
        timestamps: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train, select the best epoch on validation and evaluate on test.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split the config describes.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train with score histograms, min/max curves and overlap tracking on.
    Diagnose(RunArgs),
    /// Pairwise exclusive-hit ratios and metric deltas between runs.
    Compare {
        /// `report.json` files from `train`.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render a histogram or min/max CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn summarise(record: &RunRecord) {
    let k = record.config.selection_k();
    eprintln!(
        "{} seed {}: {} epochs, best epoch {} (validation ndcg@{k} {:.4}), {:.1}s",
        record.config.sampler,
        record.seed,
        record.epochs_trained(),
        record.best_epoch,
        record.best_validation_ndcg,
        record.total_seconds
    );
    for m in &record.test.metrics {
        println!(
            "test@{}: hit {:.4} recall {:.4} ndcg {:.4}",
            m.k, m.hit_ratio, m.recall, m.ndcg
        );
    }
}

fn train(mut cfg: RunConfig, out: &Path, diagnose: bool) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if diagnose {
        cfg.diagnostics.enabled = true;
        if let Some(&last) = cfg.diagnostics.checkpoints.iter().max() {
            cfg.max_epochs = cfg.max_epochs.max(last);
        }
    }
    let splits = prepare_splits(&cfg)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
    };
    let record = run_on_splits(&cfg, &splits, &opts, &mut NoObserver)?;
    emit_report(&record, ReportFormat::Json, out)?;
    emit_report(&record, ReportFormat::Csv, out)?;
    if let Some(d) = &record.diagnostics {
        write_histogram_csv(create(&out.join("histograms.csv"))?, &d.histograms)?;
        write_minmax_csv(create(&out.join("minmax.csv"))?, &d.minmax)?;
        write_overlap_csv(create(&out.join("overlap.csv"))?, &d.overlap_per_epoch)?;
        std::fs::write(out.join("histograms.svg"), histograms_svg(&d.histograms))?;
        std::fs::write(out.join("minmax.svg"), minmax_svg(&d.minmax))?;
        for h in &d.histograms {
            eprintln!(
                "epoch {:>3}: {:.3} of sampled scores below the epoch-0 marker",
                h.epoch, h.below_marker
            );
        }
    }
    summarise(&record);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest {
            input,
            timestamps,
            out,
        } => {
            let ing = ansrec::dataset::ingest_interactions(&input, timestamps)?;
            ing.write_to(&out)?;
            eprintln!(
                "{} users, {} items, {} interactions written to {}",
                ing.set.n_users(),
                ing.set.n_items(),
                ing.set.len(),
                out.display()
            );
        }
        Command::Train(args) => train(args.load()?, &args.out, false)?,
        Command::Diagnose(args) => train(args.load()?, &args.out, true)?,
        Command::Evaluate { run, checkpoint } => {
            let cfg = run.load()?;
            let e = evaluate_checkpoint(&cfg, &checkpoint)?;
            std::fs::create_dir_all(&run.out)?;
            std::fs::write(
                run.out.join("evaluation.json"),
                serde_json::to_string_pretty(&e.report)? + "\n",
            )?;
            for r in metric_rows(&e.report) {
                println!("{},{},{}", r.k, r.metric, r.value);
            }
        }
        Command::Compare { reports, out } => {
            let records = reports
                .iter()
                .map(|p| read_report_json(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let c = compare_runs(&records)?;
            emit_comparison(&c, &out)?;
            println!("PER@{} (row's hits missed by column)", c.k);
            println!(
                "{:>10} {}",
                "",
                c.tags
                    .iter()
                    .map(|t| format!("{t:>10}"))
                    .collect::<String>()
            );
            for (tag, row) in c.tags.iter().zip(&c.per) {
                println!(
                    "{tag:>10} {}",
                    row.iter().map(|v| format!("{v:>10.4}")).collect::<String>()
                );
            }
        }
        Command::Plot { csv, out } => {
            let header = std::fs::read_to_string(&csv)
                .with_context(|| format!("reading {}", csv.display()))?
                .lines()
                .next()
                .unwrap_or_default()
                .to_string();
            let svg = match header.as_str() {
                "epoch,bin_lo,bin_hi,count" => {
                    histograms_svg(&read_histogram_csv(File::open(&csv)?)?)
                }
                "epoch,min,max" => minmax_svg(&read_minmax_csv(File::open(&csv)?)?),
                other => bail!("unrecognised CSV header {other:?}"),
            };
            std::fs::write(&out, svg)?;
        }
        Command::Config => print!("{}", RunConfig::default().to_toml_string()?),
    }
    Ok(())
}
