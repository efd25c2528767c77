//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use leafwood_core::infer::SegmentOptions;
use leafwood_core::metrics::{evaluate, per_tree_path_lengths, TreePaths};
use leafwood_core::model::NetworkConfig;
use leafwood_core::preprocess::Sample;
use leafwood_core::spatial::DEFAULT_GRAPH_K;
use leafwood_core::synth::generate_plot;
use leafwood_core::train::{fit, EpochLog};

use crate::config::{digest, load_toml, save_toml, PipelineConfig};
use crate::error::{io_err, Error, Result};
use crate::manifest::{manifest_path, RunManifest};
use crate::parallel::{par_make_samples, par_segment_cloud, with_threads};
use crate::pcio::{read_point_file, write_point_file, WriteFormat};
use crate::report::{decile_svg, deciles_csv, deciles_text, parse_deciles_csv, report_csv, report_text};
use crate::store::{read_sample_store, write_sample_store};
use crate::weights::{load_model, save_weights};

#[derive(Debug, Parser)]
#[command(name = "leafwood", version, about = "Leaf/wood segmentation of terrestrial laser scanning point clouds")]
pub struct Cli {
    /// Worker threads for preprocessing and prediction (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic forest plot.
    Generate(GenerateArgs),
    /// Filter, normalise and tile a cloud into a sample store.
    Preprocess(PreprocessArgs),
    /// Train a network on sample stores.
    Train(TrainArgs),
    /// Segment a cloud with trained weights.
    Predict(PredictArgs),
    /// Score predictions against reference labels.
    Evaluate(EvaluateArgs),
    /// Tabulate and plot decile CSVs from `evaluate`.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output point file (.ply or .csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of trees [default: 4].
    #[arg(long)]
    pub trees: Option<usize>,
    /// Write ASCII rather than binary PLY.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub input: PathBuf,
    /// Output sample store directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points kept per sample [default: 16384].
    #[arg(long)]
    pub max_points: Option<usize>,
    /// Remove ground points with the cloth filter first.
    #[arg(long)]
    pub ground_removal: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Training sample store (repeatable).
    #[arg(long = "train", required = true)]
    pub train: Vec<PathBuf>,
    /// Validation sample store (repeatable).
    #[arg(long = "val", required = true)]
    pub val: Vec<PathBuf>,
    /// Output weights file; the network configuration goes beside it as `<out>.net.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// [default: 300]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak learning rate [default: 0.001].
    #[arg(long)]
    pub max_lr: Option<f64>,
    /// Use the reduced two-stage network instead of the configured one.
    #[arg(long)]
    pub reduced: bool,
    /// Epoch log CSV [default: <out>.log.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for per-improvement checkpoints and the `best` pointer [default: <out>.checkpoints].
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Network configuration [default: <weights>.net.toml].
    #[arg(long)]
    pub net_config: Option<PathBuf>,
    /// Output point file with `label` and `p_wood`.
    #[arg(long)]
    pub out: PathBuf,
    /// Sidecar file for filtered and ground points; dropped when absent.
    #[arg(long)]
    pub excluded: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Consolidation neighbourhood size [default: 32].
    #[arg(long)]
    pub k: Option<usize>,
    /// Wood probability threshold [default: 0.5].
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub ground_removal: bool,
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Predicted cloud (label column).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference cloud (label column, tree_id for path lengths).
    #[arg(long)]
    pub truth: PathBuf,
    /// Apply the preprocessing filters to the reference first, matching `predict` output.
    #[arg(long)]
    pub filter_truth: bool,
    /// Compute per-tree path lengths for BAP and decile rows.
    #[arg(long)]
    pub paths: bool,
    #[arg(long, default_value_t = DEFAULT_GRAPH_K)]
    pub graph_k: usize,
    /// Constant added to every path-length weight.
    #[arg(long, default_value_t = 0.0)]
    pub weight_floor: f64,
    /// Output directory for report.csv, report.txt and deciles.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Decile CSV files, one plotted line each.
    #[arg(required = true)]
    pub deciles: Vec<PathBuf>,
    /// Output directory for deciles.txt and deciles.svg.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    let threads = cli.threads;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, argv, threads),
        Command::Preprocess(a) => with_threads(threads, || cmd_preprocess(a, argv, threads))?,
        Command::Train(a) => cmd_train(a, argv, threads),
        Command::Predict(a) => with_threads(threads, || cmd_predict(a, argv, threads))?,
        Command::Evaluate(a) => cmd_evaluate(a, argv, threads),
        Command::Report(a) => cmd_report(a),
    }
}

fn write_format(path: &Path, ascii: bool) -> Result<WriteFormat> {
    let f = WriteFormat::from_path(path)?;
    Ok(if ascii && f == WriteFormat::PlyBinary { WriteFormat::PlyAscii } else { f })
}

fn cmd_generate(a: &GenerateArgs, argv: &[String], threads: usize) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.config.as_deref())?;
    if let Some(t) = a.trees {
        cfg.plot.trees = t;
    }
    let mut m = RunManifest::new("generate", argv, a.seed, threads, cfg.clone());
    m.digest("plot", digest(&cfg.plot)?);
    let plot = m.time("generate", || generate_plot(&cfg.plot, a.seed))?;
    m.time("write", || write_point_file(&plot.cloud, &a.out, write_format(&a.out, a.ascii)?))?;
    log::info!("wrote {} points ({} trees) to {}", plot.cloud.len(), plot.trees.len(), a.out.display());
    m.output(&a.out);
    m.write(&manifest_path(&a.out))
}

fn cmd_preprocess(a: &PreprocessArgs, argv: &[String], threads: usize) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.config.as_deref())?;
    if let Some(n) = a.max_points {
        cfg.preprocess.max_points = n;
    }
    cfg.preprocess.ground_removal |= a.ground_removal;
    let mut m = RunManifest::new("preprocess", argv, a.seed, threads, cfg.clone());
    let pre_digest = digest(&cfg.preprocess)?;
    m.digest("preprocess", pre_digest.clone());
    m.input(&a.input);
    let cloud = m.time("read", || read_point_file(&a.input))?.cloud;
    let (kept, excluded) = m.time("filter", || leafwood_core::infer::segmentation_split(&cloud, &cfg.preprocess))?;
    let work = cloud.subset(&kept);
    let samples = m.time("tile", || par_make_samples(&work, &cfg.preprocess, a.seed))?;
    let source = a.input.display().to_string();
    m.time("write", || write_sample_store(&a.out, &samples, &source, a.seed, &pre_digest))?;
    log::info!(
        "{} of {} points kept, {} samples written to {}",
        kept.len(),
        cloud.len(),
        samples.len(),
        a.out.display()
    );
    if !excluded.is_empty() {
        log::info!("{} points removed by filters", excluded.len());
    }
    m.output(&a.out);
    m.write(&manifest_path(&a.out))
}

fn load_stores(dirs: &[PathBuf], m: &mut RunManifest) -> Result<Vec<Sample>> {
    let mut all = Vec::new();
    for d in dirs {
        m.input(d);
        all.extend(read_sample_store(d)?.0);
    }
    Ok(all)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Network configuration stored beside a weights file.
pub fn net_config_path(weights: &Path) -> PathBuf {
    sibling(weights, ".net.toml")
}

fn cmd_train(a: &TrainArgs, argv: &[String], threads: usize) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.config.as_deref())?;
    if a.reduced {
        cfg.network = NetworkConfig::reduced();
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.max_lr {
        cfg.train.schedule.max_lr = v;
    }
    let mut m = RunManifest::new("train", argv, cfg.train.seed, threads, cfg.clone());
    for (k, d) in [
        ("network", digest(&cfg.network)?),
        ("train", digest(&cfg.train)?),
        ("loss", digest(&cfg.loss)?),
        ("augment", digest(&cfg.augment)?),
    ] {
        m.digest(k, d);
    }
    let train = load_stores(&a.train, &mut m)?;
    let val = load_stores(&a.val, &mut m)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.csv"));
    let ckpt_dir = a.checkpoints.clone().unwrap_or_else(|| sibling(&a.out, ".checkpoints"));
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log_file, "epoch,loss,lr,val_ba,val_f1,steps").map_err(io_err(&log_path))?;
    log::info!(
        "training on {} samples, validating on {}, {} epochs of {} steps",
        train.len(),
        val.len(),
        cfg.train.epochs,
        cfg.train.steps_per_epoch(train.len())
    );
    let mut side_error: Option<Error> = None;
    let net = cfg.network.clone();
    let on_epoch = |row: &EpochLog, best: Option<&leafwood_core::model::ModelWeights>| {
        let line = format!("{},{},{},{},{},{}", row.epoch, row.loss, row.lr, row.val_ba, row.val_f1, row.steps);
        log::info!(
            "epoch {:>4}  loss {:.5}  lr {:.2e}  val BA {:.4}  F1 {:.4}{}",
            row.epoch,
            row.loss,
            row.lr,
            row.val_ba,
            row.val_f1,
            if best.is_some() { "  *" } else { "" }
        );
        let mut step = || -> Result<()> {
            writeln!(log_file, "{line}").map_err(io_err(&log_path))?;
            if let Some(w) = best {
                let name = format!("epoch_{:04}.lwt", row.epoch);
                save_weights(&ckpt_dir.join(&name), &net, w)?;
                let pointer = ckpt_dir.join("best");
                fs::write(&pointer, format!("{name}\nepoch = {}\nval_ba = {}\n", row.epoch, row.val_ba))
                    .map_err(io_err(&pointer))?;
            }
            Ok(())
        };
        if side_error.is_none() {
            side_error = step().err();
        }
    };
    let result = m.time("fit", || fit(&train, &val, &cfg.network, &cfg.train, &cfg.loss, &cfg.augment, on_epoch))?;
    if let Some(e) = side_error {
        return Err(e);
    }
    save_weights(&a.out, &cfg.network, &result.best)?;
    save_toml(&net_config_path(&a.out), &cfg.network)?;
    log::info!("best validation BA at epoch {}; weights in {}", result.best_epoch, a.out.display());
    for p in [&a.out, &net_config_path(&a.out), &log_path, &ckpt_dir] {
        m.output(p);
    }
    m.write(&manifest_path(&a.out))
}

fn cmd_predict(a: &PredictArgs, argv: &[String], threads: usize) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.config.as_deref())?;
    let net_path = a.net_config.clone().unwrap_or_else(|| net_config_path(&a.weights));
    cfg.network = load_toml(&net_path)?;
    cfg.preprocess.ground_removal |= a.ground_removal;
    if let Some(k) = a.k {
        cfg.consolidation.k = k;
    }
    if let Some(t) = a.threshold {
        cfg.consolidation.wood_threshold = t;
    }
    let mut m = RunManifest::new("predict", argv, a.seed, threads, cfg.clone());
    m.digest("network", digest(&cfg.network)?);
    m.digest("preprocess", digest(&cfg.preprocess)?);
    m.digest("consolidation", digest(&cfg.consolidation)?);
    for p in [&a.input, &a.weights, &net_path] {
        m.input(p);
    }
    let model = load_model(&a.weights, &cfg.network)?;
    let cloud = m.time("read", || read_point_file(&a.input))?.cloud;
    let opts = SegmentOptions {
        seed: a.seed,
        batch_size: a.batch_size,
    };
    let seg = m.time("segment", || {
        par_segment_cloud(&cloud, &model, &cfg.preprocess, &cfg.consolidation, &opts)
    })?;
    let wood = seg.cloud.labels.as_ref().map_or(0, |l| l.iter().filter(|l| l.is_wood()).count());
    log::info!("{} points segmented, {wood} wood; {} excluded", seg.cloud.len(), seg.excluded.len());
    write_point_file(&seg.cloud, &a.out, write_format(&a.out, a.ascii)?)?;
    m.output(&a.out);
    if let Some(x) = &a.excluded {
        if seg.excluded.is_empty() {
            log::info!("no excluded points; {} not written", x.display());
        } else {
            write_point_file(&seg.excluded, x, write_format(x, a.ascii)?)?;
            m.output(x);
        }
    }
    m.write(&manifest_path(&a.out))
}

fn cmd_evaluate(a: &EvaluateArgs, argv: &[String], threads: usize) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.config.config.as_deref())?;
    let mut m = RunManifest::new("evaluate", argv, 0, threads, cfg.clone());
    m.input(&a.pred);
    m.input(&a.truth);
    let pred = read_point_file(&a.pred)?.cloud;
    let full_truth = read_point_file(&a.truth)?.cloud;
    let kept: Vec<usize> = if a.filter_truth {
        leafwood_core::infer::segmentation_split(&full_truth, &cfg.preprocess)?.0
    } else {
        (0..full_truth.len()).collect()
    };
    if pred.len() != kept.len() {
        return Err(leafwood_core::Error::Shape {
            op: "evaluate",
            detail: format!(
                "{} predicted points against {} reference points{}",
                pred.len(),
                kept.len(),
                if a.filter_truth { " after filtering" } else { "" }
            ),
        }
        .into());
    }
    let missing = |what: &str, p: &Path| {
        Error::Core(leafwood_core::Error::MissingData(format!("{} has no label column ({what})", p.display())))
    };
    let predicted = pred.labels.as_ref().ok_or_else(|| missing("predictions", &a.pred))?;
    let all_truth = full_truth.labels.as_ref().ok_or_else(|| missing("reference", &a.truth))?;
    let truth: Vec<_> = kept.iter().map(|&i| all_truth[i]).collect();
    let paths = if a.paths {
        let p = m.time("paths", || per_tree_path_lengths(&full_truth, a.graph_k))?;
        Some(TreePaths {
            lengths: kept.iter().map(|&i| p.lengths[i]).collect(),
            reachable: kept.iter().map(|&i| p.reachable[i]).collect(),
        })
    } else {
        None
    };
    let report = evaluate(predicted, &truth, paths.as_ref(), a.weight_floor)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let text = report_text(&report);
    print!("{text}");
    for (name, body) in [
        ("report.csv", report_csv(&report)),
        ("report.txt", text),
        ("deciles.csv", deciles_csv(&report.decile_rows)),
    ] {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        m.output(&p);
    }
    m.write(&manifest_path(&a.out))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut series = Vec::new();
    for p in &a.deciles {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let rows = parse_deciles_csv(&text).map_err(|msg| crate::error::format_err(p, msg))?;
        let name = p
            .parent()
            .and_then(|d| d.file_name())
            .or_else(|| p.file_stem())
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        series.push((name, rows));
    }
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut table = String::new();
    for (name, rows) in &series {
        table.push_str(&format!("{name}\n{}\n", deciles_text(rows)));
    }
    print!("{table}");
    let tp = a.out.join("deciles.txt");
    fs::write(&tp, table).map_err(io_err(&tp))?;
    let sp = a.out.join("deciles.svg");
    fs::write(&sp, decile_svg(&series)).map_err(io_err(&sp))
}
