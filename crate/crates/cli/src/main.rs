//! `evidex` — corpus generation, training, Med-CAM and Grad-CAM explanations,
//! batch evaluation and the engine self-test.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evidex::classifier::{train_classifier, Architecture, ClassifierModel, TrainConfig};
use evidex::evaluate::{evaluate, EvalConfig, EvalItem};
use evidex::explainer::{explain, BackgroundKind, BackgroundPool, ExplainerConfig, Preset};
use evidex::gradcam::{gradcam, threshold_heatmap, DEFAULT_LAYER};
use evidex::metrics::{self, EvidenceReport, Method};
use evidex::synth::{self, netpbm, GrayImage};
use evidex::tensor::Tensor;
use evidex::Error;

use config::FileConfig;

/// Exit code of `explain` when the binarized mask loses the decision.
const NOT_PRESERVED: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Dimension(_) | Error::Contract(_) | Error::Parameter(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) | Error::Csv(_) => 2,
            Error::Numeric { .. } | Error::Divergence { .. } => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type Outcome = Result<u8, Failure>;

#[derive(Parser)]
#[command(name = "evidex", version, about = "Minimal-evidence masks for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (PPM images, PGM truth masks, manifest.csv).
    GenData(GenDataArgs),
    /// Train the classifier on a corpus and write an EVDX model.
    Train(TrainArgs),
    /// Fit a Med-CAM mask for one image.
    Explain(ExplainArgs),
    /// Grad-CAM heatmap and thresholded mask for one image.
    Gradcam(GradcamArgs),
    /// Compare methods over held-out corpus images at matched area.
    Evaluate(EvaluateArgs),
    /// Gradient checks and operator oracles.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Objective and optimizer settings shared by `explain` and `evaluate`.
#[derive(Args)]
struct ObjectiveArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lambda_act: Option<f64>,
    #[arg(long)]
    lambda_ce: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_area: Option<f64>,
    #[arg(long)]
    lambda_bin: Option<f64>,
    #[arg(long)]
    lambda_tv: Option<f64>,
    #[arg(long)]
    lambda_rob: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// uniform, gaussian or corpus.
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

const OBJECTIVE_KEYS: [&str; 13] = [
    "preset",
    "lambda_act",
    "lambda_ce",
    "lambda_kl",
    "lambda_area",
    "lambda_bin",
    "lambda_tv",
    "lambda_rob",
    "steps",
    "lr",
    "seed",
    "background",
    "threshold",
];

impl ObjectiveArgs {
    fn resolve(self, file: &FileConfig) -> Result<ExplainerConfig, Failure> {
        let preset: Preset = file.pick(self.preset, "preset")?.unwrap_or_else(|| "default".into()).parse()?;
        let mut cfg = ExplainerConfig::preset(preset);
        let lambdas = [
            (self.lambda_act, "lambda_act", &mut cfg.lambda_act),
            (self.lambda_ce, "lambda_ce", &mut cfg.lambda_ce),
            (self.lambda_kl, "lambda_kl", &mut cfg.lambda_kl),
            (self.lambda_area, "lambda_area", &mut cfg.lambda_area),
            (self.lambda_bin, "lambda_bin", &mut cfg.lambda_bin),
            (self.lambda_tv, "lambda_tv", &mut cfg.lambda_tv),
            (self.lambda_rob, "lambda_rob", &mut cfg.lambda_rob),
        ];
        for (flag, key, slot) in lambdas {
            if let Some(v) = file.pick(flag, key)? {
                *slot = v;
            }
        }
        if let Some(v) = file.pick(self.steps, "steps")? {
            cfg.steps = v;
        }
        if let Some(v) = file.pick(self.lr, "lr")? {
            cfg.lr = v;
        }
        if let Some(v) = file.pick(self.seed, "seed")? {
            cfg.seed = v;
        }
        if let Some(v) = file.pick(self.background, "background")? {
            cfg.background = v.parse::<BackgroundKind>()?;
        }
        if let Some(v) = file.pick(self.threshold, "threshold")? {
            cfg.threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// P6 image to explain.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Optional P5 truth mask, scored by IoU.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Corpus directory supplying `--background corpus` replacements.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    objective: ObjectiveArgs,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Tap to explain; defaults to the deepest block.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Seeds the robustness backgrounds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated subset of medcam,gradcam,random.
    #[arg(long)]
    methods: Option<String>,
    /// Number of held-out images.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Per-image CSV; the summary goes next to it as `<stem>_summary.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    objective: ObjectiveArgs,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn required<T>(v: Option<T>, name: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::usage(format!("missing --{}", name.replace('_', "-"))))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

/// NetPBM bytes with `# comment` after the magic line.
fn with_comment(mut bytes: Vec<u8>, comment: &str) -> Vec<u8> {
    let at = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
    bytes.splice(at..at, format!("# {comment}\n").into_bytes());
    bytes
}

fn load_image(path: &Path) -> Result<Tensor, Failure> {
    let t = netpbm::read_ppm(path)?;
    let s = t.shape().to_vec();
    Ok(t.reshaped(vec![1, s[0], s[1], s[2]])?)
}

fn load_truth(path: Option<&Path>, image: &Tensor) -> Result<Option<Vec<bool>>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let g = netpbm::read_pgm(path)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if (g.height, g.width) != (h, w) {
        return Err(Failure::usage(format!(
            "truth mask is {}x{}, image is {w}x{h}",
            g.width, g.height
        )));
    }
    Ok(Some(g.values.iter().map(|&v| v >= 0.5).collect()))
}

fn report_csv(reports: &[EvidenceReport]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    metrics::write_reports(&mut buf, reports)?;
    Ok(buf)
}

fn gen_data(args: GenDataArgs) -> Outcome {
    let file = FileConfig::load(args.config.as_deref(), &["out", "n_per_class", "size", "seed"])?;
    let out: PathBuf = required(file.pick(args.out, "out")?, "out")?;
    let n = file.pick(args.n_per_class, "n_per_class")?.unwrap_or(250);
    let size = file.pick(args.size, "size")?.unwrap_or(synth::DEFAULT_IMAGE_SIZE);
    let seed = file.pick(args.seed, "seed")?.unwrap_or(42);
    let corpus = synth::generate_corpus(n, size, seed)?;
    let rows = synth::write_corpus(&out, &corpus)?;
    println!("wrote {} images to {} (seed {seed})", rows.len(), out.display());
    Ok(0)
}

fn train(args: TrainArgs) -> Outcome {
    let file = FileConfig::load(
        args.config.as_deref(),
        &["corpus", "out", "epochs", "lr", "batch_size", "seed"],
    )?;
    let corpus: PathBuf = required(file.pick(args.corpus, "corpus")?, "corpus")?;
    let out: PathBuf = required(file.pick(args.out, "out")?, "out")?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: file.pick(args.epochs, "epochs")?.unwrap_or(defaults.epochs),
        learning_rate: file.pick(args.lr, "lr")?.unwrap_or(defaults.learning_rate),
        batch_size: file.pick(args.batch_size, "batch_size")?.unwrap_or(defaults.batch_size),
        seed: file.pick(args.seed, "seed")?.unwrap_or(defaults.seed),
        ..defaults
    };
    let images = synth::load_corpus(&corpus)?;
    let size = images.first().map_or(synth::DEFAULT_IMAGE_SIZE, |i| i.pixels.shape()[1]);
    let (mut train_set, mut test_set) = (Vec::new(), Vec::new());
    for (i, img) in images.into_iter().enumerate() {
        if synth::is_held_out(i) {
            test_set.push(img);
        } else {
            train_set.push(img);
        }
    }
    let arch = Architecture { input_size: size, ..Architecture::default() };
    let (model, report) = train_classifier(arch, &train_set, &test_set, &cfg)?;
    model.save(&out)?;
    println!(
        "train_accuracy={:.4} test_accuracy={} epochs={} seconds={:.1} seed={} digest={}",
        report.train_accuracy,
        report.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        cfg.epochs,
        report.seconds,
        cfg.seed,
        model.weight_digest()
    );
    Ok(0)
}

fn explain_cmd(args: ExplainArgs) -> Outcome {
    let mut keys = vec!["model", "image", "truth", "pool", "out"];
    keys.extend(OBJECTIVE_KEYS);
    let file = FileConfig::load(args.config.as_deref(), &keys)?;
    let model_path: PathBuf = required(file.pick(args.model, "model")?, "model")?;
    let image_path: PathBuf = required(file.pick(args.image, "image")?, "image")?;
    let truth_path: Option<PathBuf> = file.pick(args.truth, "truth")?;
    let pool_dir: Option<PathBuf> = file.pick(args.pool, "pool")?;
    let out: PathBuf = required(file.pick(args.out, "out")?, "out")?;
    let cfg = args.objective.resolve(&file)?;

    let model = ClassifierModel::load(&model_path)?;
    let image = load_image(&image_path)?;
    model.check_input(image.shape())?;
    let truth = load_truth(truth_path.as_deref(), &image)?;
    let pool_images: Vec<Tensor> = match &pool_dir {
        Some(dir) => synth::load_corpus(dir)?
            .into_iter()
            .map(|i| {
                let s = i.pixels.shape().to_vec();
                i.pixels.reshaped(vec![1, s[0], s[1], s[2]])
            })
            .collect::<evidex::Result<_>>()?,
        None => Vec::new(),
    };
    let exclude = pool_images.iter().position(|p| p == &image);
    let pool = BackgroundPool::new(&pool_images, exclude);

    let ex = explain(&image, &model, &cfg, pool_dir.as_ref().map(|_| &pool))?;
    let mut report = ex.report.clone();
    report.image_id = image_path
        .file_stem()
        .map_or_else(|| image_path.display().to_string(), |s| s.to_string_lossy().into_owned());
    if let Some(t) = &truth {
        report.truth_iou = metrics::truth_iou(ex.binary_mask(), t)?;
    }

    create_dir(&out)?;
    let (h, w) = (ex.mask.height, ex.mask.width);
    let tag = format!("evidex medcam seed {}", cfg.seed);
    let soft = GrayImage::new(w, h, ex.mask.values.clone())?;
    let hard = GrayImage::from_bools(w, h, ex.binary_mask())?;
    write_bytes(&out.join("mask.pgm"), &with_comment(netpbm::encode_pgm(&soft), &tag))?;
    write_bytes(&out.join("mask_binary.pgm"), &with_comment(netpbm::encode_pgm(&hard), &tag))?;
    write_bytes(&out.join("masked.ppm"), &with_comment(netpbm::encode_ppm(&ex.masked)?, &tag))?;
    let csv = report_csv(std::slice::from_ref(&report))?;
    write_bytes(&out.join("report.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(if report.decision_preserved { 0 } else { NOT_PRESERVED })
}

fn gradcam_cmd(args: GradcamArgs) -> Outcome {
    let file = FileConfig::load(
        args.config.as_deref(),
        &["model", "image", "truth", "layer", "keep_fraction", "seed", "background", "out"],
    )?;
    let model_path: PathBuf = required(file.pick(args.model, "model")?, "model")?;
    let image_path: PathBuf = required(file.pick(args.image, "image")?, "image")?;
    let truth_path: Option<PathBuf> = file.pick(args.truth, "truth")?;
    let layer = file.pick(args.layer, "layer")?.unwrap_or_else(|| DEFAULT_LAYER.to_string());
    let keep = file.pick(args.keep_fraction, "keep_fraction")?.unwrap_or(0.1);
    let seed = file.pick(args.seed, "seed")?.unwrap_or(0);
    let background: BackgroundKind = file
        .pick(args.background, "background")?
        .map_or(Ok(BackgroundKind::default()), |b: String| b.parse())?;
    let out: PathBuf = required(file.pick(args.out, "out")?, "out")?;
    if background == BackgroundKind::CorpusShuffle {
        return Err(Failure::usage("gradcam supports uniform or gaussian backgrounds"));
    }

    let started = std::time::Instant::now();
    let model = ClassifierModel::load(&model_path)?;
    let image = load_image(&image_path)?;
    model.check_input(image.shape())?;
    let truth = load_truth(truth_path.as_deref(), &image)?;
    let y = model.logits(&image)?.argmax();
    let heat = gradcam(&model, &image, y, &layer)?;
    let mask = threshold_heatmap(&heat, keep)?;

    let explainer = ExplainerConfig { seed, background, ..ExplainerConfig::default() };
    let eval = EvalConfig { explainer, ..EvalConfig::default() };
    let mut report = evidex::evaluate::binary_report(
        &model,
        &image,
        &mask,
        Method::GradCam,
        &eval,
        &BackgroundPool::default(),
        started,
    )?;
    report.image_id = image_path
        .file_stem()
        .map_or_else(|| image_path.display().to_string(), |s| s.to_string_lossy().into_owned());
    if let Some(t) = &truth {
        report.truth_iou = metrics::truth_iou(&mask, t)?;
    }

    create_dir(&out)?;
    let tag = format!("evidex gradcam layer {layer} seed {seed}{}", if heat.degenerate { " degenerate" } else { "" });
    let hm = GrayImage::new(heat.width, heat.height, heat.values.clone())?;
    let bin = GrayImage::from_bools(heat.width, heat.height, &mask)?;
    write_bytes(&out.join("heatmap.pgm"), &with_comment(netpbm::encode_pgm(&hm), &tag))?;
    write_bytes(&out.join("mask_binary.pgm"), &with_comment(netpbm::encode_pgm(&bin), &tag))?;
    let csv = report_csv(std::slice::from_ref(&report))?;
    write_bytes(&out.join("report.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(0)
}

fn evaluate_cmd(args: EvaluateArgs) -> Outcome {
    let mut keys = vec!["model", "corpus", "methods", "n", "workers", "out"];
    keys.extend(OBJECTIVE_KEYS);
    let file = FileConfig::load(args.config.as_deref(), &keys)?;
    let model_path: PathBuf = required(file.pick(args.model, "model")?, "model")?;
    let corpus: PathBuf = required(file.pick(args.corpus, "corpus")?, "corpus")?;
    let methods: String = file.pick(args.methods, "methods")?.unwrap_or_else(|| "medcam,gradcam,random".into());
    let n = file.pick(args.n, "n")?.unwrap_or(100);
    let workers = file.pick(args.workers, "workers")?.unwrap_or(1);
    let out: PathBuf = required(file.pick(args.out, "out")?, "out")?;
    let explainer = args.objective.resolve(&file)?;
    let methods = methods
        .split(',')
        .map(|m| m.trim().parse::<Method>())
        .collect::<evidex::Result<Vec<_>>>()?;

    let model = ClassifierModel::load(&model_path)?;
    let items = synth::load_corpus(&corpus)?
        .into_iter()
        .enumerate()
        .filter(|(i, _)| synth::is_held_out(*i))
        .map(|(_, img)| img)
        .take(n)
        .map(|img| {
            let s = img.pixels.shape().to_vec();
            Ok(EvalItem {
                id: img.id,
                image: img.pixels.reshaped(vec![1, s[0], s[1], s[2]])?,
                truth: Some(img.truth_mask),
            })
        })
        .collect::<evidex::Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Failure::io(format!("no held-out images in {}", corpus.display())));
    }

    let config = EvalConfig { explainer, methods, workers, ..EvalConfig::default() };
    let reports = evaluate(&model, &items, &config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_bytes(&out, &report_csv(&reports)?)?;
    let summary = metrics::aggregate(&reports)?;
    let mut buf = Vec::new();
    metrics::write_summary(&mut buf, &summary)?;
    let stem = out.file_stem().map_or("evaluation".into(), |s| s.to_string_lossy().into_owned());
    let summary_path = out.with_file_name(format!("{stem}_summary.csv"));
    write_bytes(&summary_path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(0)
}

fn selftest(args: SelftestArgs) -> Outcome {
    let report = evidex::selftest::run(args.seed);
    println!("{report}");
    Ok(if report.all_passed() { 0 } else { 4 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Selftest(a) => selftest(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("evidex: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
