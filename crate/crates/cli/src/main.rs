#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use canids::can::{read_capture, write_capture, CanFrame, Label, ParseMode};
use canids::cqmlp::{CqmlpModel, Mode, DEFAULT_DIMS};
use canids::dataflow::{bench_blocks, bench_sliding, check_equivalence, streamline, BenchReport, ThresholdPipeline};
use canids::evalkit::{confusion, inference_cost_sparse, metrics, weight_density, ConfusionMatrix, CostReport};
use canids::feature::{build_blocks, read_blocks, split_dataset, write_blocks, DatasetSplit, FeatureBlock, DEFAULT_RATIOS, WINDOW};
use canids::sim::Scenario;
use canids::training::{export_loss_csv, predict, train_qat_with, LossKind, TrainConfig};

use config::{pick, FileConfig};
use manifest::{manifest_path_for, mark_start, ManifestBuilder};

#[derive(Parser)]
#[command(name = "canids", version, about = "Quantised-MLP intrusion detection for CAN bus traffic")]
struct Cli {
    /// TOML file with defaults for any subcommand; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic capture with one attack class in bursts.
    Simulate(SimulateArgs),
    /// Turn labelled captures into train/validation/test block files.
    Ingest(IngestArgs),
    /// Train a quantised model.
    Train(TrainArgs),
    /// Score a model or pipeline, or a stored confusion matrix.
    Eval(EvalArgs),
    /// Fold a trained model into an integer threshold pipeline.
    Streamline(StreamlineArgs),
    /// Measure pipeline latency and throughput.
    Bench(BenchArgs),
    /// Bit-operation and memory cost relative to a baseline bit width.
    Cost(CostArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    None,
    Dos,
    Fuzzing,
    Spoof,
}

impl AttackArg {
    fn label(self) -> Label {
        match self {
            AttackArg::None => Label::Benign,
            AttackArg::Dos => Label::DoS,
            AttackArg::Fuzzing => Label::Fuzzing,
            AttackArg::Spoof => Label::SpoofRpm,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    /// Capture length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Length of each attack burst and of the benign gaps, seconds.
    #[arg(long)]
    burst: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

/// A capture file and the attack class its `T` rows belong to, written
/// `CLASS=PATH`.
#[derive(Clone, Debug)]
struct LabelledPath {
    class: Label,
    path: PathBuf,
}

fn parse_labelled(s: &str) -> Result<LabelledPath, String> {
    let (class, path) = s.split_once('=').ok_or("expected CLASS=PATH, e.g. dos=DoS_dataset.csv")?;
    Ok(LabelledPath {
        class: class.parse().map_err(|e| format!("{e}"))?,
        path: PathBuf::from(path),
    })
}

#[derive(Args)]
struct CaptureInput {
    /// Capture to read as CLASS=PATH; repeatable.
    #[arg(long = "capture", value_parser = parse_labelled)]
    captures: Vec<LabelledPath>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: CaptureInput,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Train, validation and test percentages, e.g. 85,10,5.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    ratios: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Bce,
    Ce,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `ingest`.
    #[arg(long, conflicts_with = "captures")]
    data: Option<PathBuf>,
    #[command(flatten)]
    input: CaptureInput,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Layer widths, e.g. 40,256,128,64,32,4.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model checkpoint path.
    #[arg(short, long)]
    output: PathBuf,
    /// Loss-curve CSV; defaults to `<output>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with_all = ["pipeline", "from_confusion"])]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "from_confusion")]
    pipeline: Option<PathBuf>,
    /// Score a confusion-matrix CSV directly.
    #[arg(long)]
    from_confusion: Option<PathBuf>,
    /// Directory written by `ingest`; its test split is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Block file to score.
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[command(flatten)]
    input: CaptureInput,
    /// Directory for confusion.csv, metrics.csv and the manifest.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StreamlineArgs {
    #[arg(long)]
    model: PathBuf,
    /// Random blocks in the equivalence self-check.
    #[arg(long)]
    check_blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchModeArg {
    PerBlock,
    Sliding,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    pipeline: PathBuf,
    #[command(flatten)]
    input: CaptureInput,
    /// Simulated frames to use when no capture is given.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<BenchModeArg>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Append the report as CSV here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    baseline_bits: Option<u32>,
    #[arg(long)]
    input_bits: Option<u32>,
    /// Trained model: discount zero weights and take its layer widths.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() {
    mark_start();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Ingest(a) => cmd_ingest(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Eval(a) => cmd_eval(a),
        Command::Streamline(a) => cmd_streamline(a, &cfg),
        Command::Bench(a) => cmd_bench(a, &cfg),
        Command::Cost(a) => cmd_cost(a, &cfg),
    }
}

fn cmd_simulate(a: SimulateArgs, cfg: &FileConfig) -> Result<()> {
    let attack = match (a.attack, &cfg.simulate.attack) {
        (Some(f), _) => f,
        (None, Some(s)) => AttackArg::from_str(s, true).map_err(|e| anyhow::anyhow!("config simulate.attack: {e}"))?,
        (None, None) => AttackArg::None,
    };
    let duration = pick(a.duration, cfg.simulate.duration, 60.0);
    let burst = pick(a.burst, cfg.simulate.burst, 1.0);
    let seed = pick(a.seed, cfg.seed, 0);
    if !(duration > 0.0) || !(burst > 0.0) {
        bail!("duration and burst must be positive");
    }
    let frames = Scenario::bursty(attack.label(), duration, burst, seed).generate()?;
    let mut out = BufWriter::new(File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?);
    write_capture(&mut out, &frames)?;
    out.flush()?;
    let stats = canids::can::CaptureStats::from_frames(&frames);
    info!("wrote {}\n{stats}", a.output.display());

    let config = json!({"attack": format!("{attack:?}").to_lowercase(), "duration": duration, "burst": burst, "frames": frames.len()});
    let mut m = ManifestBuilder::new("simulate", Some(seed), config);
    m.output(&a.output);
    m.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn load_frames(input: &CaptureInput) -> Result<Vec<Vec<CanFrame>>> {
    let mode = if input.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    input
        .captures
        .iter()
        .map(|c| {
            let cap = read_capture(&c.path, c.class, mode)?;
            info!("{}: {}", c.path.display(), cap.stats);
            Ok(cap.frames)
        })
        .collect()
}

/// Blocks from each capture separately, so no window spans two files.
fn blocks_from(input: &CaptureInput, window: usize, stride: usize) -> Result<Vec<FeatureBlock>> {
    Ok(load_frames(input)?.iter().flat_map(|f| build_blocks(f, window, stride)).collect())
}

fn save_blocks(path: &Path, window: usize, blocks: &[FeatureBlock]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_blocks(&mut out, window, blocks)?;
    out.flush()?;
    Ok(())
}

fn load_blocks(path: &Path) -> Result<Vec<FeatureBlock>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (window, blocks) = read_blocks(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if window != WINDOW {
        bail!("{}: window {window}, the model expects {WINDOW}", path.display());
    }
    Ok(blocks)
}

const SPLIT_FILES: [&str; 3] = ["train.blk", "validation.blk", "test.blk"];

fn cmd_ingest(a: IngestArgs, cfg: &FileConfig) -> Result<()> {
    if a.input.captures.is_empty() {
        bail!("no --capture given");
    }
    let window = pick(a.window, cfg.ingest.window, WINDOW);
    let stride = pick(a.stride, cfg.ingest.stride, WINDOW);
    let ratios = match a.ratios {
        Some(r) => [r[0], r[1], r[2]],
        None => cfg.ingest.ratios.unwrap_or(DEFAULT_RATIOS),
    };
    let seed = pick(a.seed, cfg.seed, 0);
    if window == 0 || stride == 0 {
        bail!("window and stride must be positive");
    }
    let lenient = a.input.lenient || cfg.ingest.lenient.unwrap_or(false);
    let input = CaptureInput {
        captures: a.input.captures,
        lenient,
    };
    let blocks = blocks_from(&input, window, stride)?;
    let split = split_dataset(blocks, ratios, seed)?;
    std::fs::create_dir_all(&a.output)?;
    let mut m = ManifestBuilder::new(
        "ingest",
        Some(seed),
        json!({"window": window, "stride": stride, "ratios": ratios, "lenient": lenient, "sizes": split.sizes()}),
    );
    for c in &input.captures {
        m.input(&c.path);
    }
    for (name, part) in SPLIT_FILES.iter().zip([&split.train, &split.validation, &split.test]) {
        let path = a.output.join(name);
        save_blocks(&path, window, part)?;
        m.output(&path);
    }
    info!("split sizes (train, validation, test): {:?}", split.sizes());
    m.finish(&a.output.join("manifest.json"))?;
    Ok(())
}

fn cmd_train(a: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let t = &cfg.train;
    let seed = pick(a.seed, cfg.seed, 0);
    let loss = match (a.loss, t.loss.as_deref()) {
        (Some(LossArg::Ce), _) | (None, Some("ce" | "cross_entropy")) => LossKind::CrossEntropy,
        (Some(LossArg::Bce), _) | (None, Some("bce") | None) => LossKind::Bce,
        (None, Some(other)) => bail!("config train.loss: unknown loss `{other}`"),
    };
    let config = TrainConfig {
        learning_rate: pick(a.learning_rate, t.learning_rate, 1e-4),
        batch_size: pick(a.batch_size, t.batch_size, 128),
        epochs: pick(a.epochs, t.epochs, 50),
        bits: pick(a.bits, t.bits, 2),
        seed,
        loss,
        dims: pick(a.dims, t.dims.clone(), DEFAULT_DIMS.to_vec()),
        mode: Mode::FakeQuant,
        checkpoint: Some(a.output.clone()),
    };
    if !matches!(config.bits, 2 | 3 | 4 | 8) {
        bail!("unsupported bit width {}; use 2, 3, 4 or 8", config.bits);
    }
    let mut m = ManifestBuilder::new(
        "train",
        Some(seed),
        json!({
            "bits": config.bits, "epochs": config.epochs, "learning_rate": config.learning_rate,
            "batch_size": config.batch_size, "loss": format!("{:?}", config.loss), "dims": config.dims,
        }),
    );
    let split = match &a.data {
        Some(dir) => {
            let [train, validation, test] = SPLIT_FILES.map(|f| dir.join(f));
            for p in [&train, &validation, &test] {
                m.input(p);
            }
            DatasetSplit {
                train: load_blocks(&train)?,
                validation: load_blocks(&validation)?,
                test: load_blocks(&test)?,
                seed,
            }
        }
        None if !a.input.captures.is_empty() => {
            for c in &a.input.captures {
                m.input(&c.path);
            }
            split_dataset(blocks_from(&a.input, WINDOW, WINDOW)?, DEFAULT_RATIOS, seed)?
        }
        None => bail!("no training data: pass --data DIR or --capture CLASS=PATH"),
    };
    info!("training on {:?} (train, validation, test) blocks", split.sizes());

    let outcome = train_qat_with(&config, &split, |e, tl, vl| info!("epoch {e}: train {tl:.6}, validation {vl:.6}"))?;
    outcome.model.save(&a.output)?;
    let loss_csv = a.loss_csv.unwrap_or_else(|| {
        let mut name = a.output.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        a.output.with_file_name(name)
    });
    export_loss_csv(&outcome.curve, &loss_csv)?;
    if let Some((epoch, val)) = outcome.curve.best_epoch() {
        info!("best validation loss {val:.6} at epoch {epoch}");
    }
    m.output(&a.output);
    m.output(&loss_csv);
    m.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("eval", None, json!({}));
    let cm = if let Some(path) = &a.from_confusion {
        m.input(path);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ConfusionMatrix::from_csv(&text)?
    } else {
        let blocks = if let Some(dir) = &a.data {
            let p = dir.join("test.blk");
            m.input(&p);
            load_blocks(&p)?
        } else if let Some(p) = &a.blocks {
            m.input(p);
            load_blocks(p)?
        } else if !a.input.captures.is_empty() {
            for c in &a.input.captures {
                m.input(&c.path);
            }
            blocks_from(&a.input, WINDOW, WINDOW)?
        } else {
            bail!("nothing to evaluate: pass --data, --blocks or --capture");
        };
        let predicted: Vec<usize> = if let Some(p) = &a.model {
            m.input(p);
            let model = CqmlpModel::load(p).with_context(|| format!("loading model {}", p.display()))?;
            predict(&model, &blocks, Mode::FakeQuant)?
        } else if let Some(p) = &a.pipeline {
            m.input(p);
            let pipeline = ThresholdPipeline::load(p).with_context(|| format!("loading pipeline {}", p.display()))?;
            blocks.iter().map(|b| pipeline.run_int(b).class).collect()
        } else {
            bail!("pass --model or --pipeline (or --from-confusion)");
        };
        confusion(blocks.iter().zip(predicted).map(|(b, p)| (b.label, Label::ALL[p])))?
    };
    let report = metrics(&cm);
    println!("{cm}\n\n{report}");
    if report.any_undefined() {
        warn!("some classes are absent from the predictions or the ground truth; their metrics are reported as 0 and flagged undefined");
    }
    if let Some(dir) = &a.output {
        std::fs::create_dir_all(dir)?;
        let (cpath, mpath) = (dir.join("confusion.csv"), dir.join("metrics.csv"));
        std::fs::write(&cpath, cm.to_csv())?;
        std::fs::write(&mpath, report.to_csv())?;
        m.output(&cpath);
        m.output(&mpath);
        m.finish(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn cmd_streamline(a: StreamlineArgs, cfg: &FileConfig) -> Result<()> {
    let n = pick(a.check_blocks, cfg.streamline.check_blocks, 1000);
    let seed = pick(a.seed, cfg.seed, 0);
    let model = CqmlpModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let pipeline = streamline(&model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<FeatureBlock> = (0..n)
        .map(|_| FeatureBlock {
            data: (0..model.input_dim()).map(|_| rng.random::<i8>()).collect(),
            label: Label::Benign,
            window_start: 0,
        })
        .collect();
    let report = check_equivalence(&model, &pipeline, &blocks)?;
    if !report.passed() {
        let first = report.first.map(|f| f.to_string()).unwrap_or_default();
        bail!(
            "self-check failed: {} activation and {} class mismatches in {} blocks; pipeline not written\nfirst mismatch: {first}",
            report.activation_mismatches,
            report.class_mismatches,
            report.checked
        );
    }
    info!("self-check: {} random blocks, 0 mismatches", report.checked);
    pipeline.save(&a.output)?;
    let mut m = ManifestBuilder::new("streamline", Some(seed), json!({"check_blocks": n, "bits": pipeline.bits}));
    m.input(&a.model);
    m.output(&a.output);
    m.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn cmd_bench(a: BenchArgs, cfg: &FileConfig) -> Result<()> {
    let b = &cfg.bench;
    let mode = match (a.mode, b.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => BenchModeArg::from_str(s, true).map_err(|e| anyhow::anyhow!("config bench.mode: {e}"))?,
        (None, None) => BenchModeArg::PerBlock,
    };
    let workers = pick(a.workers, b.workers, 1);
    let seed = pick(a.seed, cfg.seed, 0);
    let n_frames = pick(a.frames, b.frames, 10_000);
    let pipeline = ThresholdPipeline::load(&a.pipeline).with_context(|| format!("loading pipeline {}", a.pipeline.display()))?;
    let mut m = ManifestBuilder::new(
        "bench",
        Some(seed),
        json!({"mode": format!("{mode:?}"), "workers": workers, "frames": n_frames}),
    );
    m.input(&a.pipeline);

    let frames: Vec<CanFrame> = if a.input.captures.is_empty() {
        // Mixed DoS traffic, long enough for the requested frame count.
        let duration = (n_frames as f64 / 1000.0).ceil() + 2.0;
        let mut f = Scenario::bursty(Label::DoS, duration, 1.0, seed).generate()?;
        f.truncate(n_frames);
        f
    } else {
        for c in &a.input.captures {
            m.input(&c.path);
        }
        load_frames(&a.input)?.concat()
    };
    let report: BenchReport = match mode {
        BenchModeArg::PerBlock => bench_blocks(&pipeline, &build_blocks(&frames, WINDOW, WINDOW), workers)?,
        BenchModeArg::Sliding => bench_sliding(&pipeline, &frames)?,
    };
    println!("{report}");
    if let Some(out) = &a.output {
        let fresh = !out.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out)?;
        if fresh {
            writeln!(f, "{}", BenchReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.csv_row())?;
        m.output(out);
        m.finish(&manifest_path_for(out))?;
    }
    Ok(())
}

fn cmd_cost(a: CostArgs, cfg: &FileConfig) -> Result<()> {
    let c = &cfg.cost;
    let baseline = pick(a.baseline_bits, c.baseline_bits, 4);
    let input_bits = pick(a.input_bits, c.input_bits, 8);
    let (dims, bits, density) = match &a.model {
        Some(p) => {
            let model = CqmlpModel::load(p).with_context(|| format!("loading model {}", p.display()))?;
            let bits = pick(a.bits, c.bits, model.bits as u32);
            (model.dims.clone(), bits, weight_density(&model)?)
        }
        None => (DEFAULT_DIMS.to_vec(), pick(a.bits, c.bits, 2), Vec::new()),
    };
    if bits == 0 || baseline == 0 || input_bits == 0 {
        bail!("bit widths must be positive");
    }
    let dense = inference_cost_sparse(&dims, bits, input_bits, baseline, &[]);
    println!("{dense}");
    let mut reports: Vec<(&str, CostReport)> = vec![("dense", dense)];
    if !density.is_empty() {
        let sparse = inference_cost_sparse(&dims, bits, input_bits, baseline, &density);
        println!("\nzero weights discounted:\n{sparse}");
        reports.push(("sparse", sparse));
    }
    if let Some(out) = &a.output {
        let text: String = reports.iter().map(|(name, r)| format!("# {name}\n{}", r.to_csv())).collect();
        std::fs::write(out, text)?;
        let mut m = ManifestBuilder::new(
            "cost",
            None,
            json!({"bits": bits, "baseline_bits": baseline, "input_bits": input_bits, "dims": dims}),
        );
        if let Some(p) = &a.model {
            m.input(p);
        }
        m.output(out);
        m.finish(&manifest_path_for(out))?;
    }
    Ok(())
}
