//! Command implementations behind the `eventspot` binary.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use eventspot::config::TrainConfig;
use eventspot::data_synth::{generate_dataset, load_dataset, save_dataset, Split};
use eventspot::metrics::EvalSpec;
use eventspot::pipeline::{evaluate_checkpoint, write_json, RunSummary, Trainer, BEST_CHECKPOINT, RUN_SUMMARY};
use eventspot::report::{comparison_table, write_per_class_plots, RunRow};
use eventspot::spotting::write_predictions;
use eventspot::{Error, Result};

pub const DEVICE_VAR: &str = "EVENTSPOT_DEVICE";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Parser, Debug)]
#[command(name = "eventspot", version, about = "Precise event spotting on synthetic videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from the `[dataset]` section of a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, then evaluate the best checkpoint on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run in `--out` from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// TOML file with an `[eval]` table overriding the checkpoint's.
        #[arg(long)]
        eval_config: Option<PathBuf>,
    },
    /// Compare the reports of several training runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(Error::config(
            DEVICE_VAR,
            format!("device `{v}` is not available; only `cpu` is supported"),
        )),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Generate { config, out } => generate(&config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            until_epoch,
        } => train(&config, &data, &out, resume, until_epoch),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            eval_config,
        } => {
            let spec = eval_config.as_deref().map(load_eval_spec).transpose()?;
            eval(&checkpoint, &data, &out, split.into(), spec.as_ref())
        }
        Command::Report { runs, out } => {
            let table = report(&runs, out.as_deref())?;
            print!("{table}");
            Ok(())
        }
    }
}

pub fn generate(config: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let videos = generate_dataset(&cfg.dataset)?;
    let manifest = save_dataset(out, &cfg.dataset, &videos)?;
    log::info!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path, resume: bool, until: Option<usize>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut trainer = if resume {
        Trainer::resume(&dataset, out)?
    } else {
        Trainer::new(&TrainConfig::load(config)?, &dataset, out)?
    };
    trainer.run(until)?;
    if trainer.state.epochs_completed == trainer.cfg.train.epochs {
        eval(&out.join(BEST_CHECKPOINT), data, out, Split::Test, None)?;
    }
    Ok(())
}

fn load_eval_spec(path: &Path) -> Result<EvalSpec> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct EvalOnly {
        eval: EvalSpec,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: EvalOnly = toml::from_str(&text).map_err(|e| Error::config("eval", e.message().to_string()))?;
    parsed.eval.validate()?;
    Ok(parsed.eval)
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, split: Split, spec: Option<&EvalSpec>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let result = evaluate_checkpoint(checkpoint, &dataset, split, spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    result.report.save(&out.join(REPORT_FILE))?;
    write_predictions(
        &out.join(PREDICTIONS_FILE),
        &result.predictions,
        &dataset.manifest.class_names,
    )?;
    write_per_class_plots(out, &result.report)?;
    log::info!(
        "mAP@{} = {:.4}, tight {:.4}, loose {:.4}",
        result.report.eval.primary_delta,
        result.report.primary_map,
        result.report.tight_map,
        result.report.loose_map
    );
    Ok(())
}

/// Build the comparison table of `runs`; with `out`, also write it with a
/// grouped per-class plot.
pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let mut rows = Vec::new();
    for dir in runs {
        let summary_path = dir.join(RUN_SUMMARY);
        let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|e| Error::format(&summary_path, e.to_string()))?;
        rows.push(RunRow {
            name: dir
                .file_name()
                .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            num_parameters: summary.num_parameters,
            report: eventspot::metrics::MetricsReport::load(&dir.join(REPORT_FILE))?,
        });
    }
    let table = comparison_table(&rows)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("comparison.md");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        let first = &rows[0].report;
        let classes: Vec<String> = first.classes.iter().map(|c| c.class_name.clone()).collect();
        let delta = first.eval.primary_delta;
        let series: Vec<(String, Vec<f64>)> = rows
            .iter()
            .map(|r| {
                let values = (0..classes.len())
                    .map(|c| r.report.class_ap_at(c, delta).unwrap_or(0.0))
                    .collect();
                (r.name.clone(), values)
            })
            .collect();
        let svg = eventspot::report::bar_chart_svg(&format!("Per-class AP at δ={delta}"), &classes, &series);
        let svg_path = out.join("comparison.svg");
        std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
        write_json(
            &out.join("comparison.json"),
            &rows
                .iter()
                .map(|r| (&r.name, r.num_parameters, &r.report))
                .collect::<Vec<_>>(),
        )?;
    }
    Ok(table)
}
