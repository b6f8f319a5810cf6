//! Command-line front end: one verb per library capability.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use decomposeme::complexity::{comparison_to_csv, compare_specs, count_macs, report_to_csv};
use decomposeme::data::{load_cifar10_bin, load_mnist, synth_dataset, LabeledDataset, SynthKind};
use decomposeme::decompose::decompose_model_weights;
use decomposeme::error::Error;
use decomposeme::model::{
    fuse_consecutive, parse_model_spec, serialize_model_spec, ModelSpec,
};
use decomposeme::net::{instantiate, InitScheme};
use decomposeme::tensor::Tensor;
use decomposeme::train::{
    evaluate_top1, train_with_progress, AugmentConfig, PlateauConfig, TrainConfig,
};
use decomposeme::weights::{load_weights, save_weights};

#[derive(Parser)]
#[command(
    name = "decomposeme",
    about = "Train, convert and analyze small CNNs built on decomposed (1D-factorized) convolutions.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, weights and a run manifest.
    Train(TrainArgs),
    /// Evaluate saved weights on a dataset; prints top-1 accuracy.
    Eval(EvalArgs),
    /// Print a parameter/MAC cost report as CSV.
    Analyze(AnalyzeArgs),
    /// Convert 2D convolutions to decomposed layers (weights or spec).
    Decompose(DecomposeArgs),
    /// Fuse consecutive stride-1 convolutions into one decomposed layer.
    Fuse(FuseArgs),
    /// Generate a synthetic dataset as IDX files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataOpts {
    /// Dataset: mnist | cifar10 | synth:<blobs|bars>:<n>
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Directory holding the dataset files (default:
    /// $DECOMPOSEME_DATA/<dataset> or ./data/<dataset>).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Built-in model name or path to a model-spec JSON document.
    #[arg(long)]
    model: String,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Weight initialization: xavier | kaiming
    #[arg(long, default_value = "kaiming")]
    init: String,
    /// Override the spec's head style: full | compact | compact_avg
    #[arg(long)]
    head: Option<String>,
    /// Zero-pad-and-crop augmentation radius (0 disables).
    #[arg(long, default_value_t = 0)]
    crop_pad: usize,
    /// Horizontal flip probability.
    #[arg(long, default_value_t = 0.0)]
    flip_prob: f64,
    /// Output directory for manifest.json, metrics.csv, model.dmw1, model.json.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for batch-parallel kernels (results are identical
    /// for any value; 1 is the bit-exact reference mode).
    #[arg(long)]
    threads: Option<usize>,
    /// Report wall-clock time per epoch on stderr (non-normative).
    #[arg(long, default_value_t = false)]
    time: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: String,
    /// DMW1 weight file written by `train` or `decompose`.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: String,
    /// Override input shape as CxHxW, e.g. 1x28x28.
    #[arg(long)]
    input: Option<String>,
    /// Second model for a side-by-side comparison CSV.
    #[arg(long)]
    compare: Option<String>,
    /// Measure forward/backward wall time on random data and report it
    /// on stderr (non-normative; the CSV is the analytic cost model).
    #[arg(long, default_value_t = false)]
    time: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Model spec (built-in name or JSON path).
    #[arg(long, alias = "spec")]
    model: String,
    /// Weights to convert; omit to transform the spec structurally.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Components kept per filter when converting weights: an integer
    /// or `full` (exact reproduction).
    #[arg(long, default_value = "full")]
    rank: String,
    /// Intermediate width for the structural transform: an integer or
    /// `match` (L = output filter count).
    #[arg(long = "L", value_name = "L")]
    l: Option<String>,
    /// Layer indices to transform structurally (comma-separated;
    /// default: every conv2d layer).
    #[arg(long)]
    layers: Option<String>,
    /// Output path: <out>.dmw1 plus <out>.json for weight conversion,
    /// or a spec JSON path for the structural transform.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    model: String,
    /// Inclusive-exclusive layer index range to fuse, e.g. 0..4 or 0-4.
    #[arg(long)]
    layers: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// synth:<blobs|bars>:<n> (or just <blobs|bars>:<n>).
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the four IDX files (train + t10k pairs).
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to replay a training run exactly.
#[derive(Serialize)]
struct RunManifest {
    command_line: Vec<String>,
    model: String,
    spec_sha256: String,
    init: String,
    dataset: String,
    data_dir: Option<String>,
    threads: Option<usize>,
    config: ManifestConfig,
    outputs: ManifestOutputs,
}

#[derive(Serialize)]
struct ManifestConfig {
    lr0: f64,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    plateau_window: usize,
    plateau_min_delta: f64,
    plateau_factor: f64,
    crop_pad: usize,
    flip_prob: f64,
    seed: u64,
}

#[derive(Serialize)]
struct ManifestOutputs {
    manifest: String,
    metrics: String,
    weights: String,
    spec: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders rich usage text; route everything to stderr
            // and use exit code 1 for any argument problem.
            if err.use_stderr() {
                eprint!("{err}");
            } else {
                // --help / --version are not errors.
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format(_) | Error::Diverged { .. } => 2,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Decompose(args) => cmd_decompose(args),
        Cmd::Fuse(args) => cmd_fuse(args),
        Cmd::Synth(args) => cmd_synth(args),
    }
}

fn setup_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Results do not depend on the pool size; this is speed only.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn resolve_spec(arg: &str) -> Result<ModelSpec, Error> {
    let path = Path::new(arg);
    if path.exists() {
        parse_model_spec(&std::fs::read(path)?)
    } else {
        parse_model_spec(arg.as_bytes())
    }
}

fn parse_init(name: &str) -> Result<InitScheme, Error> {
    match name {
        "xavier" => Ok(InitScheme::Xavier),
        "kaiming" => Ok(InitScheme::Kaiming),
        other => Err(Error::Input(format!(
            "unknown init scheme '{other}' (expected xavier|kaiming)"
        ))),
    }
}

fn parse_head(name: &str) -> Result<decomposeme::model::HeadStyle, Error> {
    use decomposeme::model::HeadStyle;
    match name {
        "full" => Ok(HeadStyle::Full),
        "compact" => Ok(HeadStyle::Compact),
        "compact_avg" => Ok(HeadStyle::CompactAvg),
        other => Err(Error::Input(format!(
            "unknown head style '{other}' (expected full|compact|compact_avg)"
        ))),
    }
}

enum DatasetChoice {
    Mnist,
    Cifar10,
    Synth(SynthKind, usize),
}

fn parse_dataset(spec: &str) -> Result<DatasetChoice, Error> {
    match spec {
        "mnist" => Ok(DatasetChoice::Mnist),
        "cifar10" => Ok(DatasetChoice::Cifar10),
        other => {
            let parts: Vec<&str> = other.split(':').collect();
            let (kind, n) = match parts.as_slice() {
                ["synth", kind, n] => (*kind, *n),
                [kind, n] => (*kind, *n),
                _ => {
                    return Err(Error::Input(format!(
                        "unknown dataset '{other}' (expected mnist|cifar10|synth:<kind>:<n>)"
                    )))
                }
            };
            let kind = match kind {
                "blobs" => SynthKind::Blobs,
                "bars" | "separable_bars" => SynthKind::SeparableBars,
                _ => {
                    return Err(Error::Input(format!(
                        "unknown synthetic kind '{kind}' (expected blobs|bars)"
                    )))
                }
            };
            let n: usize = n
                .parse()
                .map_err(|_| Error::Input(format!("bad sample count '{n}'")))?;
            Ok(DatasetChoice::Synth(kind, n))
        }
    }
}

fn data_dir(opts: &DataOpts, dataset: &str) -> PathBuf {
    if let Some(dir) = &opts.data {
        return dir.clone();
    }
    let root = std::env::var("DECOMPOSEME_DATA").unwrap_or_else(|_| "data".into());
    Path::new(&root).join(dataset)
}

fn load_datasets(opts: &DataOpts, seed: u64) -> Result<(LabeledDataset, LabeledDataset), Error> {
    match parse_dataset(&opts.dataset)? {
        DatasetChoice::Mnist => load_mnist(&data_dir(opts, "mnist")),
        DatasetChoice::Cifar10 => load_cifar10_bin(&data_dir(opts, "cifar10")),
        DatasetChoice::Synth(kind, n) => {
            let train = synth_dataset(kind, n, seed)?;
            let val = synth_dataset(kind, (n / 5).max(2), seed.wrapping_add(1))?;
            Ok((train, val))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    setup_threads(args.threads);
    let mut spec = resolve_spec(&args.model)?;
    if let Some(head) = &args.head {
        spec.head = parse_head(head)?;
        spec.validate()?;
    }
    let init = parse_init(&args.init)?;
    let cfg = TrainConfig {
        lr0: args.lr,
        momentum: args.momentum,
        weight_decay: args.wd,
        batch_size: args.batch,
        epochs: args.epochs,
        plateau: PlateauConfig::default(),
        augment: AugmentConfig {
            crop_pad: args.crop_pad,
            flip_prob: args.flip_prob,
        },
        seed: args.seed,
    };

    std::fs::create_dir_all(&args.out)?;
    let canonical = serialize_model_spec(&spec);
    let manifest = RunManifest {
        command_line: std::env::args().collect(),
        model: args.model.clone(),
        spec_sha256: hex_digest(canonical.as_bytes()),
        init: args.init.clone(),
        dataset: args.data.dataset.clone(),
        data_dir: args.data.data.as_ref().map(|p| p.display().to_string()),
        threads: args.threads,
        config: ManifestConfig {
            lr0: cfg.lr0,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            plateau_window: cfg.plateau.window,
            plateau_min_delta: cfg.plateau.min_delta,
            plateau_factor: cfg.plateau.factor,
            crop_pad: cfg.augment.crop_pad,
            flip_prob: cfg.augment.flip_prob,
            seed: cfg.seed,
        },
        outputs: ManifestOutputs {
            manifest: "manifest.json".into(),
            metrics: "metrics.csv".into(),
            weights: "model.dmw1".into(),
            spec: "model.json".into(),
        },
    };
    // The manifest goes to disk before any training starts.
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    std::fs::write(args.out.join("model.json"), &canonical)?;

    let (train_set, val_set) = load_datasets(&args.data, args.seed)?;
    let mut model = instantiate(&spec, init, args.seed)?;
    let started = Instant::now();
    let mut last_epoch_end = Instant::now();
    let log = train_with_progress(&mut model, &train_set, &val_set, &cfg, |row| {
        if args.time {
            eprintln!(
                "epoch {:>3}  lr {:.6}  train_loss {:.6}  train_top1 {:.4}  val_top1 {:.4}  ({:.1}s)",
                row.epoch,
                row.lr,
                row.train_loss,
                row.train_top1,
                row.val_top1,
                last_epoch_end.elapsed().as_secs_f64()
            );
            last_epoch_end = Instant::now();
        } else {
            eprintln!(
                "epoch {:>3}  lr {:.6}  train_loss {:.6}  train_top1 {:.4}  val_top1 {:.4}",
                row.epoch, row.lr, row.train_loss, row.train_top1, row.val_top1
            );
        }
    })?;
    if args.time {
        eprintln!("total wall time {:.1}s (non-normative)", started.elapsed().as_secs_f64());
    }

    std::fs::write(args.out.join("metrics.csv"), log.to_csv())?;
    std::fs::write(args.out.join("model.dmw1"), save_weights(&model))?;
    if let Some(last) = log.rows.last() {
        println!("{:.6}", last.val_top1);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    setup_threads(args.threads);
    let spec = resolve_spec(&args.model)?;
    let bytes = std::fs::read(&args.weights)?;
    let model = load_weights(&bytes, &spec)?;
    let (_, val_set) = load_datasets(&args.data, 0)?;
    let acc = evaluate_top1(&model, &val_set)?;
    println!("{acc:.6}");
    Ok(())
}

fn parse_input_shape(text: &str) -> Result<[usize; 3], Error> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Input(format!("bad input shape '{text}' (expected CxHxW)")))?;
    if dims.len() != 3 {
        return Err(Error::Input(format!(
            "bad input shape '{text}' (expected CxHxW)"
        )));
    }
    Ok([dims[0], dims[1], dims[2]])
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    setup_threads(args.threads);
    let spec = resolve_spec(&args.model)?;
    let input = args.input.as_deref().map(parse_input_shape).transpose()?;
    match &args.compare {
        None => {
            let report = count_macs(&spec, input)?;
            print!("{}", report_to_csv(&report));
        }
        Some(other) => {
            let other = resolve_spec(other)?;
            let cmp = compare_specs(&spec, &other, input)?;
            print!("{}", comparison_to_csv(&cmp));
        }
    }
    if args.time {
        measure_wall_time(&spec, input)?;
    }
    Ok(())
}

/// Measured forward/backward wall time; a sanity probe, not the cost
/// model the analysis CSV reports.
fn measure_wall_time(spec: &ModelSpec, input: Option<[usize; 3]>) -> Result<(), Error> {
    let mut spec = spec.clone();
    if let Some(shape) = input {
        spec.input_shape = shape;
    }
    let mut model = instantiate(&spec, InitScheme::Kaiming, 0)?;
    let [c, h, w] = spec.input_shape;
    let batch = 8usize;
    let input = Tensor::full([batch, c, h, w], 0.1);
    let labels = vec![0usize; batch];
    // Warm-up pass, then timed passes.
    let _ = model.forward(&input)?;
    let started = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let (logits, inputs, caches) = model.forward_train(&input)?;
        let (_, grad) = decomposeme::ops::softmax_cross_entropy(&logits, &labels)?;
        let _ = model.backward(&inputs, &caches, &grad)?;
    }
    let per_pass = started.elapsed().as_secs_f64() / reps as f64;
    eprintln!(
        "measured forward+backward: {:.4}s per batch of {batch} (non-normative wall clock)",
        per_pass
    );
    Ok(())
}

fn cmd_decompose(args: DecomposeArgs) -> Result<(), Error> {
    let spec = resolve_spec(&args.model)?;
    match &args.weights {
        Some(weights_path) => {
            // Weight-preserving conversion at the requested rank.
            let rank = match args.rank.as_str() {
                "full" => None,
                other => Some(other.parse::<usize>().map_err(|_| {
                    Error::Input(format!("bad rank '{other}' (expected an integer or 'full')"))
                })?),
            };
            let bytes = std::fs::read(weights_path)?;
            let model = load_weights(&bytes, &spec)?;
            let converted = decompose_model_weights(&model, rank)?;
            let out_weights = &args.out;
            let out_spec = args.out.with_extension("json");
            if let Some(parent) = out_weights.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(out_weights, save_weights(&converted))?;
            std::fs::write(&out_spec, serialize_model_spec(converted.spec()))?;
            println!("{}", out_weights.display());
            println!("{}", out_spec.display());
        }
        None => {
            // Structural transform: rewrite conv2d layers in the spec.
            use decomposeme::model::{decompose_model, LPolicy};
            let indices: Vec<usize> = match &args.layers {
                Some(text) => text
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<usize>().map_err(|_| {
                            Error::Input(format!("bad layer index '{p}'"))
                        })
                    })
                    .collect::<Result<_, _>>()?,
                None => spec
                    .layers
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| matches!(l, decomposeme::layers::LayerSpec::Conv2d { .. }))
                    .map(|(i, _)| i)
                    .collect(),
            };
            let policy = match args.l.as_deref() {
                None | Some("match") => LPolicy::MatchOutput,
                Some(text) => {
                    let l: usize = text.parse().map_err(|_| {
                        Error::Input(format!("bad L '{text}' (expected an integer or 'match')"))
                    })?;
                    let map = indices.iter().map(|&i| (i, l)).collect();
                    LPolicy::Explicit(map)
                }
            };
            let out_spec = decompose_model(&spec, &indices, &policy)?;
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&args.out, serialize_model_spec(&out_spec))?;
            println!("{}", args.out.display());
        }
    }
    Ok(())
}

fn parse_range(text: &str) -> Result<std::ops::Range<usize>, Error> {
    let parts: Vec<&str> = if text.contains("..") {
        text.split("..").collect()
    } else {
        text.split('-').collect()
    };
    if parts.len() != 2 {
        return Err(Error::Input(format!(
            "bad layer range '{text}' (expected start..end)"
        )));
    }
    let start = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad range start '{}'", parts[0])))?;
    let end = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad range end '{}'", parts[1])))?;
    Ok(start..end)
}

fn cmd_fuse(args: FuseArgs) -> Result<(), Error> {
    let spec = resolve_spec(&args.model)?;
    let range = parse_range(&args.layers)?;
    let before = decomposeme::model::receptive_field(&spec, range.end - 1)?;
    let fused = fuse_consecutive(&spec, range.clone())?;
    let after = decomposeme::model::receptive_field(&fused, range.start)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serialize_model_spec(&fused))?;
    println!("receptive_field,{before},{after}");
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let DatasetChoice::Synth(kind, n) = parse_dataset(&args.dataset)? else {
        return Err(Error::Input(
            "synth expects --dataset synth:<blobs|bars>:<n>".into(),
        ));
    };
    let train = synth_dataset(kind, n, args.seed)?;
    let val = synth_dataset(kind, (n / 5).max(2), args.seed.wrapping_add(1))?;
    std::fs::create_dir_all(&args.out)?;
    write_idx_pair(&args.out, "train", &train)?;
    write_idx_pair(&args.out, "t10k", &val)?;
    println!("{}", args.out.display());
    Ok(())
}

/// Materialize a dataset as an IDX image/label pair. Pixels are written
/// by inverting the standardization back to the raw [0,1] range.
fn write_idx_pair(dir: &Path, stem: &str, set: &LabeledDataset) -> Result<(), Error> {
    let [n, _, h, w] = set.images.shape();
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend(0x0000_0803u32.to_be_bytes());
    images.extend((n as u32).to_be_bytes());
    images.extend((h as u32).to_be_bytes());
    images.extend((w as u32).to_be_bytes());
    let (m, s) = (set.normalization.mean[0], set.normalization.std[0]);
    for i in 0..n {
        for &v in set.images.sample(i) {
            let raw = (v * s + m).clamp(0.0, 1.0);
            images.push((raw * 255.0).round() as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend(0x0000_0801u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    labels.extend(set.labels.iter().map(|&l| l as u8));
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), images)?;
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), labels)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
