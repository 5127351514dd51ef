//! `cinemotion` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cinemotion::applications::{
    baseline_deformations, compensate, evaluate, reconstruct, simulate, track, transport, volume_curve,
    Interpolation, ReconMode, TrackingResult,
};
use cinemotion::image::{ImageSequence, LabelMask};
use cinemotion::networks::{ModelConfig, MotionModel};
use cinemotion::seqio::{self, FigureSet};
use cinemotion::training::{load_model, AugmentRanges, TrainConfig, Trainer};
use cinemotion::{selftest, synthetic, Error};

#[derive(Parser, Debug)]
#[command(name = "cinemotion", version, about = "Probabilistic temporal motion model for 2-D image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test dataset.
    GenData(GenData),
    /// Train a model on a directory of sequences.
    Train(Train),
    /// Track every frame of a sequence against its first frame.
    Track(Apply),
    /// Write the motion-compensated sequence.
    Compensate(Apply),
    /// Reconstruct the full motion from a subset of frames.
    Reconstruct(Reconstruct),
    /// Simulate motion from the first frame only.
    Simulate(Simulate),
    /// Apply the motion of one sequence to the first frame of another.
    Transport(Transport),
    /// Track and report metrics (Dice/HD95 when a mask file exists).
    Eval(Apply),
    /// Run the built-in oracle suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Key=value file (d, delta, lambda, sigma_g_mm, sigma_t, lr, epochs, exp_steps, ...).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    t_min: usize,
    #[arg(long, default_value_t = 16)]
    t_max: usize,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (uses `train/` when present).
    #[arg(long = "in")]
    input: PathBuf,
    /// Checkpoint directory (receives `best/`, `last/` and `train_log.csv`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    allow_untrained: bool,
}

#[derive(Args, Debug)]
struct Apply {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Reconstruct {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Observed frame indices, e.g. `0,5,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    observed: Vec<usize>,
    #[arg(long, default_value = "mean")]
    mode: String,
    /// Also write an interpolation baseline (`linear` or `cubic`).
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args, Debug)]
struct Simulate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Sequence whose first frame is used.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of frames to simulate (defaults to the input's T).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value = "stochastic")]
    mode: String,
}

#[derive(Args, Debug)]
struct Transport {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Source sequence providing the motion.
    #[arg(long = "in")]
    input: PathBuf,
    /// Target sequence providing the first frame.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[command(flatten)]
    common: Common,
}

/// Exit codes.
const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) | Error::NonFinite(_) => NUMERICAL,
                _ => DATA,
            })
        }
    }
}

/// Parsed `--config` file.
#[derive(Debug, Default)]
struct ConfigFile(BTreeMap<String, String>);

const CONFIG_KEYS: &[&str] = &[
    "d",
    "delta",
    "lambda",
    "sigma_g_mm",
    "sigma_t",
    "lr",
    "epochs",
    "exp_steps",
    "steps_per_epoch",
    "lr_final",
    "augment",
];

impl ConfigFile {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }))?;
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            let k = k.trim();
            if !CONFIG_KEYS.contains(&k) {
                return Err(Failure::Usage(format!("{}:{}: unknown key {k:?}", path.display(), n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|_| Failure::Usage(format!("bad value for {key}: {v:?}"))))
            .transpose()
    }

    fn model_config(&self, h: usize, w: usize) -> CliResult<ModelConfig> {
        let mut c = ModelConfig {
            height: h,
            width: w,
            ..ModelConfig::default()
        };
        if let Some(v) = self.get("d")? {
            c.d = v;
        }
        if let Some(v) = self.get("sigma_g_mm")? {
            c.sigma_g_mm = v;
        }
        if let Some(v) = self.get("sigma_t")? {
            c.sigma_t = v;
        }
        if let Some(v) = self.get("exp_steps")? {
            c.exp_steps = v;
        }
        Ok(c)
    }

    fn train_config(&self, seed: u64) -> CliResult<TrainConfig> {
        let mut c = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.get("delta")? {
            c.delta = v;
        }
        if let Some(v) = self.get("lambda")? {
            c.lambda = v;
        }
        if let Some(v) = self.get("lr")? {
            c.lr = v;
        }
        if let Some(v) = self.get("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = self.get("steps_per_epoch")? {
            c.steps_per_epoch = Some(v);
        }
        if let Some(v) = self.get::<String>("augment")? {
            c.augment = match v.as_str() {
                "on" | "true" | "1" => Some(AugmentRanges::default()),
                "off" | "false" | "0" => None,
                _ => return Err(Failure::Usage(format!("augment must be on/off, got {v:?}"))),
            };
        }
        Ok(c)
    }
}

fn load_sequence(path: &Path) -> CliResult<(ImageSequence<f32>, Option<Vec<LabelMask>>)> {
    let seq = seqio::read_mseq(path)?;
    let mp = seqio::mask_path(path);
    let masks = if mp.exists() { Some(seqio::read_masks(&mp)?) } else { None };
    Ok((seq, masks))
}

fn load(args: &ModelArgs) -> CliResult<MotionModel<f32>> {
    let mut m = load_model(&args.model)?;
    m.allow_untrained = args.allow_untrained;
    Ok(m)
}

fn mseq_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let dir = if dir.join("train").is_dir() { dir.join("train") } else { dir.to_path_buf() };
    let rd = fs::read_dir(&dir).map_err(|e| Failure::Lib(Error::Io { path: dir.clone(), source: e }))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mseq"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Lib(Error::InvalidArgument(format!("no .mseq files in {}", dir.display()))));
    }
    Ok(files)
}

fn motion_csv(tr: &TrackingResult) -> String {
    let m = &tr.motion;
    let mut s = String::new();
    for i in 0..m.d {
        let row: Vec<String> = (0..m.t).map(|t| m.data[i * m.t + t].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn write(path: PathBuf, text: String) -> CliResult {
    fs::write(&path, text).map_err(|e| Failure::Lib(Error::Io { path, source: e }))
}

/// Figures, motion matrix, volume curve and a short summary for one result.
fn write_result(
    out: &Path,
    seq: &ImageSequence<f32>,
    tr: &TrackingResult,
    mask0: Option<&LabelMask>,
    metrics: Option<&seqio::MetricsTable>,
) -> CliResult {
    let curve = mask0.map(|m| volume_curve(m, &tr.deformations, seq.spacing_mm)).transpose()?;
    seqio::export_figures(
        &FigureSet {
            sequence: seq,
            deformations: &tr.deformations,
            volume_curve: curve.as_ref().map(|c| c.areas_mm2.as_slice()),
            metrics,
        },
        out,
    )?;
    write(out.join("motion.csv"), motion_csv(tr))?;
    let min_det = tr.min_det.iter().copied().fold(f64::INFINITY, f64::min);
    let mut summary = format!("frames = {}\nmin_det_j = {min_det}\ndiffeomorphic = {}\n", tr.len_t(), tr.is_diffeomorphic());
    for w in &tr.warnings {
        summary.push_str(&format!("warning = {w}\n"));
    }
    write(out.join("summary.txt"), summary)
}

fn mode(s: &str) -> CliResult<ReconMode> {
    s.parse().map_err(|_| Failure::Usage(format!("--mode must be mean or stochastic, got {s:?}")))
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(a) => {
            let m = synthetic::generate_dataset(
                a.n_train,
                a.n_test,
                a.size,
                a.size,
                (a.t_min, a.t_max),
                a.common.seed,
                &a.out,
            )?;
            println!("wrote {} train and {} test sequences; manifest {}", m.train.len(), m.test.len(), m.path.display());
        }
        Command::Train(a) => {
            let cf = ConfigFile::load(a.common.config.as_deref())?;
            let files = mseq_files(&a.input)?;
            let data = files
                .iter()
                .map(|p| seqio::read_mseq(p))
                .collect::<cinemotion::Result<Vec<_>>>()?;
            let (h, w) = data[0].extent();
            let mut tc = cf.train_config(a.common.seed)?;
            if let Some(v) = a.epochs {
                tc.epochs = v;
            }
            if let Some(v) = a.delta {
                tc.delta = v;
            }
            if let Some(v) = a.lr {
                tc.lr = v;
            }
            if let Some(end) = cf.get::<f64>("lr_final")? {
                let per = tc.steps_per_epoch.unwrap_or(data.len()) as u64;
                tc.lr_decay = Some((end, per * tc.epochs as u64));
            }
            fs::create_dir_all(&a.out).map_err(|e| Failure::Lib(Error::Io { path: a.out.clone(), source: e }))?;
            tc.log_path = Some(a.out.join("train_log.csv"));
            tc.checkpoint_dir = Some(a.out.clone());
            let mut trainer = match &a.resume {
                Some(dir) => Trainer::resume(dir, tc)?,
                None => Trainer::new(cf.model_config(h, w)?, tc)?,
            };
            let log = trainer.run(&data)?;
            if let Some(last) = log.epochs.last() {
                println!("trained {} steps; final epoch loss {:.4}", last.step, last.loss);
            }
            let hash = cinemotion::autodiff::checkpoint::blob_hash(&a.out.join("last"))?;
            println!("checkpoint {} sha256 {hash}", a.out.join("last").display());
        }
        Command::Track(a) => {
            let model = load(&a.model)?;
            let (seq, masks) = load_sequence(&a.input)?;
            let tr = track(&seq, &model)?;
            write_result(&a.out, &seq, &tr, masks.as_ref().map(|m| &m[0]), None)?;
        }
        Command::Eval(a) => {
            let model = load(&a.model)?;
            let (seq, masks) = load_sequence(&a.input)?;
            let tr = track(&seq, &model)?;
            let report = evaluate(&tr, &seq, masks.as_deref())?;
            let table = report.to_table();
            write_result(&a.out, &seq, &tr, masks.as_ref().map(|m| &m[0]), Some(&table))?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            println!("rmse {:.5}", mean(&report.rmse));
            println!("spatial_grad {:.5}", report.spatial_gradient);
            println!("temporal_grad {:.5}", report.temporal_gradient);
            if let (Some(d), Some(h)) = (&report.dice, &report.hd95_mm) {
                println!("dice {:.4}", mean(d));
                println!("hd95_mm {:.3}", mean(h));
            }
            for w in &report.warnings {
                println!("warning {w}");
            }
        }
        Command::Compensate(a) => {
            let model = load(&a.model)?;
            let (seq, _) = load_sequence(&a.input)?;
            let tr = track(&seq, &model)?;
            let out = compensate(&seq, &tr, model.config.exp_steps)?;
            seqio::write_mseq(&out, &a.out)?;
        }
        Command::Reconstruct(a) => {
            let model = load(&a.model)?;
            let (seq, masks) = load_sequence(&a.input)?;
            let m = mode(&a.mode)?;
            if !a.observed.contains(&0) {
                return Err(Failure::Usage("--observed must include frame 0".into()));
            }
            let tr = reconstruct(&seq, &a.observed, &model, m, a.common.seed)?;
            write_result(&a.out, &seq, &tr, masks.as_ref().map(|m| &m[0]), None)?;
            if let Some(b) = &a.baseline {
                let method: Interpolation = b
                    .parse()
                    .map_err(|_| Failure::Usage(format!("--baseline must be linear or cubic, got {b:?}")))?;
                // knots come from the reconstruction itself so unobserved frames stay unread
                let known: Vec<_> = a
                    .observed
                    .iter()
                    .filter(|&&i| i > 0)
                    .map(|&i| (i, tr.velocities[i - 1].clone()))
                    .collect();
                let defs = baseline_deformations(&known, seq.len_t(), method, model.config.exp_steps)?;
                if let Some(masks) = &masks {
                    let c = volume_curve(&masks[0], &defs, seq.spacing_mm)?;
                    write(a.out.join("baseline_volume.csv"), seqio::volume_csv(&c.areas_mm2))?;
                }
            }
        }
        Command::Simulate(a) => {
            let model = load(&a.model)?;
            let (seq, masks) = load_sequence(&a.input)?;
            let t = a.frames.unwrap_or(seq.len_t());
            let tr = simulate(seq.moving(), t, &model, mode(&a.mode)?, a.common.seed, seq.spacing_mm)?;
            let shown = ImageSequence::new(seq.frames[..=t.min(seq.len_t())].to_vec(), seq.spacing_mm)?;
            write_result(&a.out, &shown, &tr, masks.as_ref().map(|m| &m[0]), None)?;
        }
        Command::Transport(a) => {
            let model = load(&a.model)?;
            let (src, _) = load_sequence(&a.input)?;
            let (dst, masks) = load_sequence(&a.target)?;
            let tracked = track(&src, &model)?;
            let tr = transport(&tracked.motion, dst.moving(), &model, dst.spacing_mm)?;
            let shown = ImageSequence::new(vec![dst.moving().clone()], dst.spacing_mm)?;
            write_result(&a.out, &shown, &tr, masks.as_ref().map(|m| &m[0]), None)?;
        }
        Command::Selftest(a) => {
            let results = selftest::run_all(a.common.seed)?;
            let mut failed = 0;
            for r in &results {
                println!("{r}");
                failed += usize::from(!r.passed);
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Err(Failure::Lib(Error::Numerical(format!("{failed} self-test checks failed"))));
            }
        }
    }
    Ok(())
}
