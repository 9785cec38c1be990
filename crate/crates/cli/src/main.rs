//! `usqz`: compress ultrasound frames to tissue contours, decompress them to
//! simulated B-mode frames, generate phantoms and evaluate the round trip.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use usqz_core::codec::RatioMode;
use usqz_core::grid::{rasterize_contours, ClassTable, LabelMap, PolarFrame};
use usqz_core::metrics::{evaluate_frame, EvalReport, EvalSettings, DEFAULT_ATTENUATION_WINDOW, DEFAULT_BINS};
use usqz_core::pgm::{self, GrayImage};
use usqz_core::phantom::{generate_dataset, Manifest, PhantomRanges, Role, DEFAULT_FREQUENCY_KHZ};
use usqz_core::pipeline::{compress_frame, compress_labels, Compressed};
use usqz_core::segmenter::{segment_frame, train_classifier, ClassifierModel, DEFAULT_FEATURE_WINDOW};
use usqz_core::speckle_stats::feature_map;
use usqz_core::synth::{decompress_polar, simulate_bmode, IdentityRefiner, SynthConfig};
use usqz_core::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_IO: u8 = 3;
const EXIT_TOPOLOGY: u8 = 4;
const EXIT_ENCODABILITY: u8 = 5;
const EXIT_FORMAT: u8 = 6;

#[derive(Parser)]
#[command(name = "usqz", version, about = "Contour chain-code ultrasound codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a polar frame (or take given labels) and write a compressed file.
    Compress(CompressArgs),
    /// Rebuild a B-mode frame from a compressed file by speckle simulation.
    Decompress(DecompressArgs),
    /// Simulate a polar B-mode frame from a label map.
    Simulate(SimulateArgs),
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom(PhantomArgs),
    /// Train the tissue classifier on the training entries of a manifest.
    Train(TrainArgs),
    /// Compare original and decompressed frames; writes per-frame CSV rows.
    Eval(EvalArgs),
    /// Print the mean(std) summary table of an evaluation CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis parameter file (key = value); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SynthArgs {
    fn load(&self) -> Result<SynthConfig> {
        match &self.config {
            Some(p) => SynthConfig::load(p).with_context(|| format!("reading config {}", p.display())),
            None => Ok(SynthConfig::default()),
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Polar frame PGM (rows are radii, columns scan lines).
    #[arg(long, required_unless_present = "from_labels", conflicts_with = "from_labels")]
    input: Option<PathBuf>,
    /// Label PGM to compress directly, bypassing the classifier.
    #[arg(long)]
    from_labels: Option<PathBuf>,
    /// Trained classifier model.
    #[arg(long, required_unless_present = "from_labels")]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FREQUENCY_KHZ)]
    frequency_khz: u32,
    /// Report only this ratio (paper or actual); both by default.
    #[arg(long)]
    ratio_mode: Option<RatioMode>,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    synth: SynthArgs,
    /// Write the polar frame instead of the Cartesian image.
    #[arg(long)]
    polar: bool,
    /// Also write a side-by-side polar comparison with this original frame.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Label PGM.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_FREQUENCY_KHZ)]
    frequency_khz: u32,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_FREQUENCY_KHZ)]
    frequency_khz: u32,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Feature window side in samples.
    #[arg(long, default_value_t = DEFAULT_FEATURE_WINDOW)]
    window: usize,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Batch mode: compress, decompress and evaluate every test entry.
    #[arg(long, conflicts_with_all = ["original", "decompressed"])]
    manifest: Option<PathBuf>,
    /// Evaluate every manifest entry, not only the test split.
    #[arg(long, requires = "manifest")]
    all: bool,
    #[arg(long, required_unless_present = "manifest", requires_all = ["decompressed", "labels"])]
    original: Option<PathBuf>,
    #[arg(long)]
    decompressed: Option<PathBuf>,
    /// Ground-truth label PGM delimiting the tissue regions.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Frame id used in the CSV rows.
    #[arg(long, default_value = "frame")]
    id: String,
    /// Classifier used to re-segment decompressed frames for overlap metrics.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Segmentation of the decompressed frame for overlap metrics.
    #[arg(long, conflicts_with_all = ["model", "manifest"])]
    predicted: Option<PathBuf>,
    /// Decompression seed of the first manifest entry; entry i uses seed + i.
    #[arg(long, required_unless_present = "original")]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_ATTENUATION_WINDOW)]
    attenuation_window: usize,
    #[command(flatten)]
    synth: SynthArgs,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation CSV.
    #[arg(long)]
    input: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_frame(path: &Path) -> Result<PolarFrame> {
    let img = pgm::read(path).with_context(|| format!("reading frame {}", path.display()))?;
    Ok(pgm::image_to_polar(&img)?)
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = pgm::read(path).with_context(|| format!("reading labels {}", path.display()))?;
    Ok(pgm::image_to_labels(&img)?)
}

fn read_model(path: &Path) -> Result<ClassifierModel> {
    ClassifierModel::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    pgm::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &pgm::encode(img))
}

fn side_by_side(left: &PolarFrame, right: &PolarFrame) -> Result<GrayImage> {
    let (a, b) = (pgm::polar_to_image(left), pgm::polar_to_image(right));
    if a.height != b.height || a.width != b.width {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} frame beside {}x{} frame",
            a.width, a.height, b.width, b.height
        ))
        .into());
    }
    let width = a.width + b.width;
    let mut pixels = Vec::with_capacity(width * a.height);
    for row in 0..a.height {
        pixels.extend_from_slice(&a.pixels[row * a.width..(row + 1) * a.width]);
        pixels.extend_from_slice(&b.pixels[row * b.width..(row + 1) * b.width]);
    }
    Ok(GrayImage {
        width,
        height: a.height,
        pixels,
    })
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let compressed: Compressed = match (&args.from_labels, &args.input) {
        (Some(labels), _) => compress_labels(&read_labels(labels)?, &ClassTable::ivus(), args.frequency_khz)?,
        (None, Some(input)) => {
            let model = read_model(args.model.as_deref().context("--model is required with --input")?)?;
            compress_frame(&read_frame(input)?, &model, args.frequency_khz)?
        }
        (None, None) => bail!("one of --input or --from-labels is required"),
    };
    write_bytes(&args.out, &compressed.bytes)?;
    println!(
        "wrote {} ({} bytes, {} contours)",
        args.out.display(),
        compressed.bytes.len(),
        compressed.file.header.num_contours
    );
    let modes = match args.ratio_mode {
        Some(m) => vec![m],
        None => vec![RatioMode::Paper, RatioMode::Actual],
    };
    for mode in modes {
        println!("ratio ({mode}): {:.4}", compressed.ratio(mode));
    }
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    let config = args.synth.load()?;
    let bytes = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let d = decompress_polar(&bytes, &config, args.seed, &IdentityRefiner)?;
    if let Some(original) = &args.compare {
        let img = side_by_side(&read_frame(original)?, &d.frame)?;
        let path = args.out.with_extension("compare.pgm");
        write_image(&path, &img)?;
        println!("wrote {}", path.display());
    }
    let img = if args.polar {
        pgm::polar_to_image(&d.frame)
    } else {
        let cart = usqz_core::grid::polar_to_cartesian(&d.frame);
        GrayImage {
            width: cart.width,
            height: cart.height,
            pixels: cart.pixels,
        }
    };
    write_image(&args.out, &img)?;
    println!("wrote {} ({}x{})", args.out.display(), img.width, img.height);
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = args.synth.load()?;
    let mut labels = read_labels(&args.labels)?;
    labels.geometry.radial_step = config.radial_step_mm;
    let frame = simulate_bmode(&labels, &config, args.frequency_khz as f64 / 1000.0, args.seed)?;
    write_image(&args.out, &pgm::polar_to_image(&frame))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let config = args.synth.load()?;
    let manifest = generate_dataset(
        args.count,
        &PhantomRanges::default(),
        &config,
        args.frequency_khz,
        args.seed,
        &args.out,
    )?;
    println!("wrote {} phantoms to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let manifest = Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.synth.load()?;
    let (manifest, base) = load_manifest(&args.manifest)?;
    let train: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.role == Role::Train.as_str())
        .collect();
    if train.is_empty() {
        bail!("manifest {} has no training entries", args.manifest.display());
    }
    let mut stacks = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for e in &train {
        stacks.push(feature_map(
            &read_frame(&base.join(&e.frame))?,
            args.window,
            config.log(),
        )?);
        labels.push(read_labels(&base.join(&e.labels))?);
    }
    let model = train_classifier(&stacks, &labels)?;
    model
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("trained on {} frames; wrote {}", train.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = args.synth.load()?;
    let table = ClassTable::ivus();
    let settings = EvalSettings {
        bins: args.bins,
        attenuation_window: args.attenuation_window,
        log: config.log(),
    };
    let model = args.model.as_deref().map(read_model).transpose()?;
    let resegment = |frame: &PolarFrame| -> Result<Option<LabelMap>> {
        match &model {
            Some(m) => {
                let seg = segment_frame(frame, m)?;
                Ok(Some(rasterize_contours(&seg.contours, &frame.geometry)?))
            }
            None => Ok(None),
        }
    };

    let mut report = EvalReport::default();
    if let Some(manifest_path) = &args.manifest {
        let model_ref = model.as_ref().context("--model is required with --manifest")?;
        let seed = args.seed.context("--seed is required with --manifest")?;
        let (manifest, base) = load_manifest(manifest_path)?;
        for (i, e) in manifest.entries.iter().enumerate() {
            if !args.all && e.role != Role::Test.as_str() {
                continue;
            }
            let original = read_frame(&base.join(&e.frame))?;
            let truth = read_labels(&base.join(&e.labels))?;
            let c = compress_frame(&original, model_ref, DEFAULT_FREQUENCY_KHZ)?;
            let d = decompress_polar(&c.bytes, &config, seed.wrapping_add(i as u64), &IdentityRefiner)?;
            let pred = resegment(&d.frame)?;
            report.extend(evaluate_frame(
                &e.id,
                &original,
                &d.frame,
                &truth,
                pred.as_ref(),
                &table,
                settings,
            )?);
        }
    } else {
        let (Some(o), Some(d), Some(l)) = (&args.original, &args.decompressed, &args.labels) else {
            bail!("--original, --decompressed and --labels are required without --manifest");
        };
        let original = read_frame(o)?;
        let decompressed = read_frame(d)?;
        let truth = read_labels(l)?;
        let pred = match &args.predicted {
            Some(p) => Some(read_labels(p)?),
            None => resegment(&decompressed)?,
        };
        report = evaluate_frame(
            &args.id,
            &original,
            &decompressed,
            &truth,
            pred.as_ref(),
            &table,
            settings,
        )?;
    }
    write_bytes(&args.out, report.to_csv().as_bytes())?;
    print!("{}", report.summary_table());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let table = EvalReport::from_csv(&text)?.summary_table();
    if let Some(out) = &args.out {
        write_bytes(out, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => EXIT_IO,
                Error::TopologyFailure { .. } => EXIT_TOPOLOGY,
                Error::UnencodableDelta { .. }
                | Error::RangeViolation { .. }
                | Error::ClosureViolation { .. }
                | Error::CrossingContours { .. } => EXIT_ENCODABILITY,
                Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::TruncatedFile { .. }
                | Error::InvalidField { .. }
                | Error::BadPadding { .. }
                | Error::ChecksumMismatch { .. }
                | Error::TrailingBytes { .. }
                | Error::Format { .. }
                | Error::Config { .. } => EXIT_FORMAT,
                _ => EXIT_OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
