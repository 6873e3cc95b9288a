use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use embshift::downstream::{
    fold_assignments, l2_normalize, silhouette_score, targets_for, CrossValidation, LogRegConfig,
    Targets,
};
use embshift::features::{embed_dataset, FrameGrid, ReferenceEmbedder, DEFAULT_N_MELS};
use embshift::io::{
    default_sidecar, read_embeddings, read_manifest, read_report_csv, read_wav, render_report_csv,
    write_embeddings, write_failures_csv, write_report_csv, write_wav,
};
use embshift::metrics::{ShiftBaseline, ShiftSelection, CPCD_MAX_POINTS};
use embshift::model::{
    EmbeddingSet, FailureRow, MetricName, PerturbationKind, PerturbationSpec, ReportRow,
    ShiftReport,
};
use embshift::perturb::perturb;
use embshift::pipeline::{emit_plot_data, run_and_write, write_inflections, RunConfig};
use embshift::{Embedder, Error};

#[derive(Parser)]
#[command(
    name = "embshift",
    version,
    about = "Embedding shift under audio channel effects"
)]
struct Cli {
    /// Seed for reverb impulse responses, subsampling and fold splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// L2-normalize embeddings (`--normalize false` turns it off).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply one perturbation to a WAV file.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        kind: PerturbationKind,
        #[arg(long, default_value_t = 0.0)]
        value: f64,
    },
    /// Embed every clip of a manifest with the reference embedder.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        /// EMB1 output; ids go to `<output>.ids.json`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "identity")]
        kind: PerturbationKind,
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        #[arg(long, default_value_t = DEFAULT_N_MELS)]
        n_mels: usize,
    },
    /// Distances between an original and a perturbed EMB1 file.
    Shift {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        perturbed: PathBuf,
        #[arg(long, default_value = "dataset")]
        dataset: String,
        #[arg(long, default_value = "ingest")]
        embedder: String,
        #[arg(long, default_value = "identity")]
        kind: PerturbationKind,
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        #[arg(long, default_value_t = CPCD_MAX_POINTS)]
        cpcd_max_points: usize,
        /// Writes report.csv and failures.csv here instead of printing.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train on original embeddings, score on perturbed ones.
    Downstream {
        #[arg(long)]
        original: PathBuf,
        /// Defaults to the original set.
        #[arg(long)]
        perturbed: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "dataset")]
        dataset: String,
        #[arg(long, default_value = "ingest")]
        embedder: String,
        #[arg(long, default_value = "identity")]
        kind: PerturbationKind,
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full grid run from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Plot series and inflection points from a report CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
        {
            error!("worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            error!("{n} failure row(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}

fn load_set(path: &Path) -> Result<EmbeddingSet, Error> {
    Ok(read_embeddings(path, default_sidecar(path))?)
}

/// Write the report (or print it) and return the number of failure rows.
fn emit(report: &ShiftReport, out_dir: Option<&Path>) -> Result<usize, Error> {
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|source| embshift::IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            write_report_csv(report, dir.join("report.csv"))?;
            write_failures_csv(report, dir.join("failures.csv"))?;
        }
        None => {
            let _ = std::io::stdout().write_all(&render_report_csv(report));
            for f in &report.failures {
                error!(
                    "{} {} {}: {}",
                    f.kind,
                    f.value,
                    f.metric.as_str(),
                    f.message
                );
            }
        }
    }
    Ok(report.failures.len())
}

struct RowContext {
    dataset: String,
    embedder: String,
    kind: PerturbationKind,
    value: f64,
}

impl RowContext {
    fn push(&self, report: &mut ShiftReport, metric: MetricName, result: Result<f64, String>) {
        match result {
            Ok(score) => report.rows.push(ReportRow {
                dataset: self.dataset.clone(),
                embedder: self.embedder.clone(),
                kind: self.kind,
                value: self.value,
                metric,
                score,
            }),
            Err(message) => report.failures.push(FailureRow {
                dataset: self.dataset.clone(),
                embedder: self.embedder.clone(),
                kind: self.kind,
                value: self.value,
                metric,
                message,
            }),
        }
    }
}

fn execute(cli: Cli) -> Result<usize, Error> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Perturb {
            input,
            output,
            kind,
            value,
        } => {
            let clip = read_wav(&input)?;
            let spec = PerturbationSpec::new(kind, value, seed)?;
            write_wav(&perturb(&clip, &spec)?, &output)?;
            info!("wrote {}", output.display());
            Ok(0)
        }
        Command::Embed {
            manifest,
            output,
            kind,
            value,
            n_mels,
        } => {
            let manifest = read_manifest(&manifest)?;
            let spec = PerturbationSpec::new(kind, value, seed)?;
            let embedder = ReferenceEmbedder { n_mels };
            let set = embed_dataset(&manifest, &embedder, &FrameGrid::default(), &spec)?;
            write_embeddings(&set, &output, default_sidecar(&output))?;
            info!(
                "wrote {} {}-dimensional {} embeddings to {}",
                set.len(),
                set.dim(),
                embedder.name(),
                output.display()
            );
            Ok(0)
        }
        Command::Shift {
            original,
            perturbed,
            dataset,
            embedder,
            kind,
            value,
            cpcd_max_points,
            out_dir,
        } => {
            let mut original = load_set(&original)?;
            let mut perturbed = load_set(&perturbed)?;
            if cli.normalize.unwrap_or(false) {
                original = l2_normalize(&original)?;
                perturbed = l2_normalize(&perturbed)?;
            }
            let selection = ShiftSelection::default();
            let scores = ShiftBaseline::new(original, selection, cpcd_max_points, seed)
                .compare(&perturbed, selection);
            let ctx = RowContext {
                dataset,
                embedder,
                kind,
                value,
            };
            let mut report = ShiftReport::default();
            let s = |r: Result<f64, embshift::MetricError>| r.map_err(|e| e.to_string());
            ctx.push(&mut report, MetricName::CdMean, s(scores.cd_mean));
            ctx.push(&mut report, MetricName::Cpcd, s(scores.cpcd));
            ctx.push(&mut report, MetricName::FadRaw, s(scores.fad));
            emit(&report, out_dir.as_deref())
        }
        Command::Downstream {
            original,
            perturbed,
            manifest,
            dataset,
            embedder,
            kind,
            value,
            folds,
            out_dir,
        } => {
            let manifest = read_manifest(&manifest)?;
            let mut original = load_set(&original)?;
            let mut perturbed = match perturbed {
                Some(p) => load_set(&p)?,
                None => original.clone(),
            };
            if cli.normalize.unwrap_or(true) {
                original = l2_normalize(&original)?;
                perturbed = l2_normalize(&perturbed)?;
            }
            embshift::downstream::check_pair(&original, &perturbed)?;
            let assignment = fold_assignments(&original, &manifest, folds, seed)?;
            let cv =
                CrossValidation::train(&original, &manifest, &assignment, &LogRegConfig::default());
            let ctx = RowContext {
                dataset,
                embedder,
                kind,
                value,
            };
            let mut report = ShiftReport::default();
            let cv = cv.map_err(|e| e.to_string());
            match targets_for(&perturbed, &manifest)? {
                Targets::Single { labels, .. } => {
                    let acc = cv.and_then(|cv| cv.accuracy(&perturbed).map_err(|e| e.to_string()));
                    ctx.push(&mut report, MetricName::Accuracy, acc);
                    let sil = silhouette_score(&perturbed, &labels).map_err(|e| e.to_string());
                    ctx.push(&mut report, MetricName::Silhouette, sil);
                }
                Targets::Multi { .. } => {
                    let ap =
                        cv.and_then(|cv| cv.macro_auprc(&perturbed).map_err(|e| e.to_string()));
                    ctx.push(&mut report, MetricName::MacroAuprc, ap);
                }
            }
            emit(&report, out_dir.as_deref())
        }
        Command::Run { config, out_dir } => {
            let mut config = RunConfig::from_file(&config)?;
            if let Some(dir) = out_dir {
                config.output_dir = dir;
            }
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(j) = cli.jobs {
                config.jobs = Some(j);
            }
            if let Some(n) = cli.normalize {
                config.normalize = n;
            }
            let out = run_and_write(&config)?;
            info!(
                "{} report rows, {} failures, written to {}",
                out.report.rows.len(),
                out.report.failures.len(),
                config.output_dir.display()
            );
            Ok(out.report.failures.len())
        }
        Command::Report { input, out_dir } => {
            let report = read_report_csv(&input)?;
            let plots = emit_plot_data(&report, &out_dir.join("plots"))?;
            write_inflections(&report, &out_dir)?;
            info!("wrote {} plot series to {}", plots.len(), out_dir.display());
            Ok(0)
        }
    }
}
