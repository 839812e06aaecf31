//! `gramnet` command-line tool.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gramnet::dataset::{self, Label};
use gramnet::metrics::{self, ScoreRecord, ScoreSet, DEFAULT_THRESHOLD};
use gramnet::train::{self, FitOptions, TrainConfig};
use gramnet::{synth, GramNet32};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable capping kernel threads.
const THREADS_ENV: &str = "GRAMNET_THREADS";
const CONFIG_ECHO: &str = "config_used.txt";

#[derive(Parser)]
#[command(name = "gramnet", version, about = "Fingerprint liveness detection with gram and fire modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write checkpoints into --out.
    Train(TrainArgs),
    /// Score the test split and report Ferrlive, Ferrfake, ACE and per-material detection rates.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Print the per-layer parameter table.
    Inspect(InspectArgs),
    /// Write a DET curve (csv and svg) from a score file.
    Det(DetArgs),
    /// Generate a synthetic two-texture dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file applied before command-line overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adamax_eps: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    augment_hflip: Option<bool>,
    #[arg(long)]
    augment_vflip: Option<bool>,
    #[arg(long)]
    gram_normalize: Option<bool>,
    #[arg(long)]
    bn_momentum: Option<f64>,
    #[arg(long)]
    bn_eps: Option<f64>,
    /// Write 0 in the seconds column of the training log.
    #[arg(long)]
    no_timing: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        }
        let overrides: [(&str, Option<String>); 15] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("plateau_patience", self.plateau_patience.map(|v| v.to_string())),
            ("lr_factor", self.lr_factor.map(|v| v.to_string())),
            ("beta1", self.beta1.map(|v| v.to_string())),
            ("beta2", self.beta2.map(|v| v.to_string())),
            ("adamax_eps", self.adamax_eps.map(|v| v.to_string())),
            ("val_fraction", self.val_fraction.map(|v| v.to_string())),
            ("augment_hflip", self.augment_hflip.map(|v| v.to_string())),
            ("augment_vflip", self.augment_vflip.map(|v| v.to_string())),
            ("gram_normalize", self.gram_normalize.map(|v| v.to_string())),
            ("bn_momentum", self.bn_momentum.map(|v| v.to_string())),
            ("bn_eps", self.bn_eps.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Comma-separated fake materials for the detection-rate line.
    #[arg(long, value_delimiter = ',')]
    materials: Vec<String>,
    /// Directory for scores.csv and det.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct DetArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Output prefix; writes PREFIX.csv and PREFIX.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training images per class.
    #[arg(long)]
    n: usize,
    /// Test images per class; defaults to half of --n.
    #[arg(long)]
    test_n: Option<usize>,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X', '×']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad extent {v:?} in {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let manifest = dataset::load_dataset(&args.data)?;
    let (train_entries, val_entries) = dataset::split_validation(&manifest, cfg.val_fraction, cfg.seed)?;
    let (tl, tf) = dataset::DatasetManifest::counts(&train_entries);
    let (vl, vf) = dataset::DatasetManifest::counts(&val_entries);
    log::info!("training on {tl} live / {tf} fake, validating on {vl} live / {vf} fake");
    let train_set = dataset::load_samples::<f32>(&train_entries)?;
    let val_set = dataset::load_samples::<f32>(&val_entries)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join(CONFIG_ECHO), cfg.to_text())?;
    let mut net = GramNet32::build(cfg.seed, cfg.net_config())?;
    let opts = FitOptions { out_dir: Some(args.out.clone()), record_timing: !args.no_timing };
    let outcome = train::fit(&mut net, &train_set, &val_set, &cfg, &opts, &mut |_| ControlFlow::Continue(()))?;
    println!(
        "best epoch {} val loss {:.6}; wrote {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        args.out.join(train::BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<GramNet32> {
    GramNet32::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let net = load_net(&args.ckpt)?;
    let manifest = dataset::load_dataset(&args.data)?;
    if manifest.test.is_empty() {
        bail!("{} has no test split (expected test/live and test/fake)", args.data.display());
    }
    let samples = dataset::load_samples::<f32>(&manifest.test)?;
    for (i, s) in samples.iter().enumerate() {
        net.check_input_size(s.height(), s.width()).with_context(|| s.describe(i))?;
    }
    let scores = train::score_samples(&net, &samples, args.batch_size)?;
    let set = ScoreSet::new(
        samples
            .iter()
            .zip(&scores)
            .map(|(s, &score)| ScoreRecord {
                path: s.source.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                label: s.label,
                material: s.material.clone(),
                score,
            })
            .collect(),
    );
    let materials = if args.materials.is_empty() { set.fake_materials() } else { args.materials.clone() };
    let mut rates = Vec::new();
    for m in &materials {
        let rate = metrics::detection_rate(&set, std::slice::from_ref(m), args.threshold)
            .map_err(|_| anyhow!("material filter {m:?} matches no fake test images"))?;
        rates.push((m, rate));
    }
    let (ferrlive, ferrfake) = metrics::error_rates(&set, args.threshold)?;
    let curve = metrics::det_curve(&set)?;
    fs::create_dir_all(&args.out)?;
    set.write(args.out.join("scores.csv"))?;
    fs::write(args.out.join("det.csv"), curve.to_csv())?;

    println!("threshold {}", args.threshold);
    println!("Ferrlive {ferrlive:.2}%");
    println!("Ferrfake {ferrfake:.2}%");
    println!("ACE {:.2}%", metrics::ace(ferrlive, ferrfake));
    for (m, rate) in rates {
        println!("detection rate [{m}] {rate:.2}%");
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let net = load_net(&args.ckpt)?;
    let image = dataset::load_image::<f32>(&args.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    net.check_input_size(h, w).with_context(|| args.image.display().to_string())?;
    let x = image.reshape(&[1, 1, h, w])?;
    let p = net.p_fake(&x)?[0] as f64;
    let label = if p >= DEFAULT_THRESHOLD { Label::Fake } else { Label::Live };
    println!("label={label} p_fake={p:.6}");
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let net = match &args.ckpt {
        Some(path) => load_net(path)?,
        None => GramNet32::build(0, Default::default())?,
    };
    println!("architecture hash {:016x}", net.architecture_hash());
    print!("{}", net.count_params().render());
    Ok(())
}

fn cmd_det(args: &DetArgs) -> Result<()> {
    let set = ScoreSet::read(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let curve = metrics::det_curve(&set)?;
    let with_ext = |ext: &str| {
        let mut p = args.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    fs::write(with_ext(".csv"), curve.to_csv())?;
    fs::write(with_ext(".svg"), curve.to_svg())?;
    let (ferrlive, ferrfake) = metrics::error_rates(&set, DEFAULT_THRESHOLD)?;
    let (t, best) = curve.min_ace();
    println!("{} curve points", curve.points.len());
    println!("ACE at {DEFAULT_THRESHOLD}: {:.2}%", metrics::ace(ferrlive, ferrfake));
    println!("lowest ACE on the sweep: {best:.2}% at threshold {t}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let test_n = args.test_n.unwrap_or(args.n.div_ceil(2));
    let samples = synth::synth_textures::<f32>(args.n + test_n, args.size, args.seed)?;
    let mut counters = [[0usize; 2]; 2];
    for (pair, chunk) in samples.chunks_exact(2).enumerate() {
        let split = usize::from(pair >= args.n);
        for s in chunk {
            let dir = args.out.join(["train", "test"][split]).join(s.label.as_str());
            fs::create_dir_all(&dir)?;
            let count = &mut counters[split][s.label.index()];
            *count += 1;
            let name = match s.label {
                Label::Live => format!("live{count:04}.png"),
                Label::Fake => format!("fake{count:04}__{}.png", s.material),
            };
            dataset::save_png(&s.image, dir.join(name))?;
        }
    }
    println!("wrote {} train and {} test images per class to {}", args.n, test_n, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(threads) = std::env::var(THREADS_ENV) {
        std::env::set_var("MATMUL_NUM_THREADS", threads);
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Det(a) => cmd_det(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
