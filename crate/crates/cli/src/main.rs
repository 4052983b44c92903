//! `c2f`: train coarse-to-fine networks, tabulate their exits, tune the
//! per-level thresholds and report energy/accuracy trade-offs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c2f_core::bo::optimize_shared_threshold;
use c2f_core::cascade::{cascade_predict, ThresholdVector};
use c2f_core::pipeline::{baseline_rows, lambda_rows, tune_lambda, tuned_row, CostSpec, Experiment, Splits, Tables};
use c2f_core::report::{load_report, pareto_columns, ReportRow, RowMode, REPORT_JSON};
use c2f_core::{Error, Precision, Result, Scalar, Tensor};

#[derive(Debug, Parser)]
#[command(name = "c2f", version, about = "Coarse-to-fine early-exit networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "c2f.json")]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// mac, latency or table:<csv>.
    #[arg(long, global = true)]
    cost: Option<CostSpec>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage: train, table, sweep, report.
    Run {
        /// Retrain and rebuild even if artifacts exist.
        #[arg(long)]
        fresh: bool,
    },
    /// Train the feature transformers, then the intermediate classifiers.
    Train {
        #[arg(long)]
        fresh: bool,
    },
    /// Build the validation and test evaluation tables.
    Table,
    /// Tune the per-level thresholds for one trade-off weight.
    Tune {
        #[arg(long)]
        lambda: f64,
    },
    /// Tune every weight in the list and write the report.
    Sweep {
        /// Comma-separated weights; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Accuracy and energy of each level used on its own.
    Baseline,
    /// Tune one threshold shared by every level.
    SingleThreshold {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Classify one image with early exit.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated thresholds, one per early exit.
        #[arg(long, value_delimiter = ',', conflicts_with = "lambda")]
        gamma: Option<Vec<f64>>,
        /// Use the tuned thresholds for this weight from the report.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Print the stored report as Pareto columns.
    Report,
}

fn experiment(g: &Global) -> Result<Experiment> {
    let text = std::fs::read_to_string(&g.config).map_err(|e| Error::InvalidArgument(format!("{}: {e}", g.config.display())))?;
    let mut cfg = c2f_core::pipeline::ExperimentConfig::from_json(&text)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    if let Some(c) = &g.cost {
        cfg.cost = c.clone();
    }
    let base = g.config.parent().map(Path::to_path_buf);
    if let Some(o) = &g.output_dir {
        let cwd = std::env::current_dir().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        cfg.output_dir = cwd.join(o).display().to_string();
    }
    Experiment::new(cfg, base).map_err(|e| e.in_stage("config"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |a| format!("{a:.4}"))
}

fn print_rows(rows: &[ReportRow]) {
    println!(
        "{:<17} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9}  {:<24} {:<16} gamma",
        "mode", "lambda", "level", "val_O", "val_acc", "test_acc", "energy", "test_exits", "test_level_acc"
    );
    for r in rows {
        let join = |v: Vec<String>| v.join("/");
        println!(
            "{:<17} {:>6} {:>5} {:>9.5} {:>9.4} {:>9.4} {:>9.4}  {:<24} {:<16} {}",
            r.mode.tag(),
            r.lambda.map_or("-".into(), |l| format!("{l}")),
            r.level.map_or("-".into(), |l| l.to_string()),
            r.val_objective,
            r.val_accuracy,
            r.test_accuracy,
            r.test_energy_norm,
            join(r.test_exit_histogram.iter().map(usize::to_string).collect()),
            join(r.test_level_accuracy.iter().map(|a| fmt_opt(*a)).collect()),
            join(r.gamma.iter().map(|g| format!("{g:.4}")).collect()),
        );
    }
}

fn train_typed<T: Scalar>(exp: &Experiment, resume: bool) -> Result<()> {
    let splits: Splits<T> = exp.load_splits()?;
    exp.train(&splits, resume)?;
    println!("weights written to {}", exp.out_dir.display());
    Ok(())
}

fn table_typed<T: Scalar>(exp: &Experiment) -> Result<Tables> {
    let splits: Splits<T> = exp.load_splits()?;
    let store = exp.load_trained::<T>()?;
    exp.tables(&store, &splits, false)
}

fn train_size<T: Scalar>(exp: &Experiment) -> Result<usize> {
    Ok(exp.load_splits::<T>()?.train.len())
}

fn infer_typed<T: Scalar>(exp: &Experiment, image: &Path, gamma: &ThresholdVector) -> Result<()> {
    let store = exp.load_trained::<T>()?;
    let input: Tensor<T> = load_image(image, exp.arch.input_shape).map_err(|e| e.in_stage("infer"))?;
    let trace = cascade_predict(&input, &exp.arch, &store, gamma, exp.config.confidence).map_err(|e| e.in_stage("infer"))?;
    for (i, obs) in trace.per_level.iter().enumerate() {
        println!("level {} predicted {} confidence {:.6}", i + 1, obs.predicted, obs.confidence);
    }
    println!("exit_level {}", trace.exit_level + 1);
    println!("class {}", trace.predicted);
    Ok(())
}

/// Reads an image, converts it to the network's channel count, shrinks it
/// to fit if needed, and zero-pads it centered to the input size.
fn load_image<T: Scalar>(path: &Path, shape: [usize; 3]) -> Result<Tensor<T>> {
    let [h, w, c] = shape;
    let img = image::open(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let img = if img.width() as usize > w || img.height() as usize > h {
        img.resize(w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<u8> = match c {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(Error::InvalidArgument(format!("cannot load images with {c} channels"))),
    };
    let (top, left) = ((h - ih) / 2, (w - iw) / 2);
    let mut data = vec![T::zero(); h * w * c];
    for y in 0..ih {
        for x in 0..iw {
            for k in 0..c {
                data[((y + top) * w + x + left) * c + k] = T::of(pixels[(y * iw + x) * c + k] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![h, w, c], data)
}

fn report_gamma(exp: &Experiment, lambda: f64) -> Result<ThresholdVector> {
    let report = load_report(&exp.out_dir).map_err(|e| e.in_stage("infer"))?;
    let row = report
        .rows_of(RowMode::MultiThreshold)
        .find(|r| r.lambda == Some(lambda))
        .ok_or_else(|| Error::InvalidArgument(format!("{REPORT_JSON} has no tuned row for lambda {lambda}")).in_stage("infer"))?;
    ThresholdVector::new(row.gamma.clone())
}

fn execute(cli: Cli) -> Result<()> {
    let exp = experiment(&cli.global)?;
    let precision = exp.config.precision;
    macro_rules! typed {
        ($f:ident($($arg:expr),*)) => {
            match precision {
                Precision::F64 => $f::<f64>($($arg),*),
                Precision::F32 => $f::<f32>($($arg),*),
            }
        };
    }
    match cli.command {
        Command::Run { fresh } => {
            let report = exp.run(!fresh)?;
            print_rows(&report.rows);
        }
        Command::Train { fresh } => typed!(train_typed(&exp, !fresh))?,
        Command::Table => {
            let t = typed!(table_typed(&exp))?;
            println!("tables: {} validation and {} test rows, {} levels", t.val.len(), t.test.len(), t.val.levels);
        }
        Command::Tune { lambda } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")).in_stage("tune"));
            }
            let tables = exp.load_tables()?;
            let o = tune_lambda(&tables, lambda, &exp.config.effective_bo(), false)?;
            exp.write_history(RowMode::MultiThreshold, lambda, &o.multi)?;
            print_rows(&lambda_rows(&tables, lambda, &o)?);
        }
        Command::Sweep { lambdas } => {
            let mut exp = exp;
            if let Some(l) = lambdas {
                exp.config.lambdas = l;
                exp.config.validate().map_err(|e| e.in_stage("config"))?;
            }
            let tables = exp.load_tables()?;
            let report = exp.sweep(&tables, typed!(train_size(&exp))?)?;
            print_rows(&report.rows);
        }
        Command::Baseline => {
            let tables = exp.load_tables()?;
            print_rows(&baseline_rows(&tables)?);
        }
        Command::SingleThreshold { lambdas } => {
            let tables = exp.load_tables()?;
            let bo = exp.config.effective_bo();
            let mut rows = Vec::new();
            for lambda in lambdas.unwrap_or_else(|| exp.config.lambdas.clone()) {
                let r = optimize_shared_threshold(&tables.val, lambda, &bo).map_err(|e| e.in_stage("tune"))?;
                exp.write_history(RowMode::SingleThreshold, lambda, &r)?;
                rows.push(tuned_row(RowMode::SingleThreshold, lambda, &r, &tables)?);
            }
            print_rows(&rows);
        }
        Command::Infer { image, gamma, lambda } => {
            let levels = exp.arch.num_levels();
            let gamma = match (gamma, lambda) {
                (Some(g), _) => ThresholdVector::new(g).map_err(|e| e.in_stage("infer"))?,
                (None, Some(l)) => report_gamma(&exp, l)?,
                (None, None) => ThresholdVector::never_exit(levels - 1),
            };
            typed!(infer_typed(&exp, &image, &gamma))?;
        }
        Command::Report => {
            let report = load_report(&exp.out_dir).map_err(|e| e.in_stage("report"))?;
            println!(
                "# config {} | provider {} | levels {} | finest test accuracy {:.4}",
                report.provenance.config_hash, report.provenance.cost_provider, report.levels, report.finest_test_accuracy
            );
            print!("{}", pareto_columns(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.ends_with(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
