mod config;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use ndarray::{s, Array3, Axis};
use spikedrive::model::checkpoint::load_checkpoint;
use spikedrive::model::{build_model, repeat_over_time, Model, PassOptions, Probe};
use spikedrive::profiler::{attention_maps, energy_spike_model_with, sfr_trace, FiringRateTrace};
use spikedrive::train::{evaluate, grad_check, synth_dataset, Trainer};

use config::ConfigFile;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Core(spikedrive::Error),
    /// A numeric check did not hold.
    Check(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<spikedrive::Error> for CliError {
    fn from(e: spikedrive::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Check(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "spikedrive", version, about = "Spike-driven transformer: parameters, training, energy profiling, attention maps")]
struct Cli {
    /// TOML config with [model], [train], [profile] and [io] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to load (train: resume from it).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides model.timesteps.
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    /// Overrides io.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Leave generation timestamps out of report headers.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the parameter count and a per-module breakdown.
    Params,
    /// Train on the configured synthetic dataset; writes a checkpoint and a CSV log.
    Train,
    /// Trace firing rates and write energy and firing-rate reports.
    Profile {
        /// Overrides profile.samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Use an all-zero firing-rate trace instead of running the model.
        #[arg(long)]
        zero_rates: bool,
    },
    /// Write V_S and attention-output firing maps for one PPM/PGM image.
    Attn {
        #[arg(long)]
        image: PathBuf,
    },
    /// Compare backpropagated and finite-difference gradients on one sample.
    Gradcheck {
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
    },
    /// Print the default config.
    Defaults,
}

struct Ctx {
    file: ConfigFile,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
    timestamps: bool,
}

impl Ctx {
    fn header(&self, what: &str) -> Vec<String> {
        let mut h = vec![format!("spikedrive {} {what}", env!("CARGO_PKG_VERSION"))];
        if self.timestamps {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            h.push(format!("generated_unix={secs}"));
        }
        h
    }

    /// The configured model, or the checkpoint's when one is given.
    fn model(&self) -> Result<(Model, String)> {
        let config = self.file.model_config()?;
        match &self.checkpoint {
            None => Ok((build_model(&config, self.file.train.seed)?, format!("weights: random, seed {}", self.file.train.seed))),
            Some(path) => {
                let (mut model, _) = load_checkpoint(path)?;
                if !model.config().same_architecture(&config) {
                    return Err(CliError::Config(format!(
                        "checkpoint {} was built for {:?}, config describes {:?}",
                        path.display(),
                        model.config(),
                        config
                    )));
                }
                model.set_timesteps(config.timesteps)?;
                Ok((model, format!("weights: checkpoint {}", path.display())))
            }
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut file = ConfigFile::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        file.train.seed = seed;
    }
    if let Some(t) = cli.timesteps {
        if t == 0 {
            return Err(CliError::Usage("--timesteps must be positive".into()));
        }
        file.model.timesteps = t;
    }
    let out = cli.out.clone().unwrap_or_else(|| file.io.out.clone());
    let ctx = Ctx { file, checkpoint: cli.checkpoint, out, timestamps: !cli.no_timestamps };
    match cli.command {
        Command::Params => params(&ctx),
        Command::Train => train(&ctx),
        Command::Profile { samples, zero_rates } => profile(&ctx, samples, zero_rates),
        Command::Attn { image } => attn(&ctx, &image),
        Command::Gradcheck { tolerance } => gradcheck(&ctx, tolerance),
        Command::Defaults => {
            print!("{}", ConfigFile::default().to_toml());
            Ok(())
        }
    }
}

fn params(ctx: &Ctx) -> Result<()> {
    let config = ctx.file.model_config()?;
    let model = build_model(&config, 0)?;
    let total = model.count_params();
    println!("model {}-{} ({}x{}, {} classes)", config.blocks, config.channels, config.height, config.width, config.num_classes);
    println!("parameters {total} ({:.2}M)", total as f64 / 1e6);
    for (module, n) in model.param_breakdown() {
        println!("  {module:<20} {n}");
    }
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let tc = ctx.file.train_config()?;
    let data = synth_dataset(ctx.file.dataset_kind()?, ctx.file.train.n_per_class, ctx.file.geometry(), ctx.file.train.data_seed)?;
    let config = ctx.file.model_config()?;
    if data.num_classes != config.num_classes {
        return Err(CliError::Config(format!(
            "dataset `{}` has {} classes, model.num_classes is {}",
            ctx.file.train.dataset, data.num_classes, config.num_classes
        )));
    }
    if data.is_empty() {
        return Err(CliError::Config("train.n_per_class is 0: nothing to train on".into()));
    }
    let mut trainer = match &ctx.checkpoint {
        Some(path) => {
            let t = Trainer::resume(path, tc)?;
            if !t.model.config().same_architecture(&config) {
                return Err(CliError::Config(format!("checkpoint {} does not match [model]", path.display())));
            }
            t
        }
        None => Trainer::new(build_model(&config, tc.seed)?, tc)?,
    };
    let dir = ctx.out_dir()?;
    let ckpt = dir.join(&ctx.file.io.checkpoint_name);
    let log_path = dir.join(&ctx.file.io.log_name);
    let resuming = ctx.checkpoint.is_some() && log_path.exists();
    let file = OpenOptions::new().create(true).append(resuming).write(true).truncate(!resuming).open(&log_path)?;
    let mut log = BufWriter::new(file);
    if !resuming {
        writeln!(log, "step,epoch,loss,lr,accuracy")?;
    }
    while trainer.epoch() < trainer.config.epochs {
        let s = trainer.train_epoch(&data, Some(&mut log))?;
        log.flush()?;
        trainer.save(&ckpt)?;
        println!("epoch {:>3}  loss {:.5}  train-batch accuracy {:.4}", s.epoch, s.mean_loss, s.train_accuracy);
    }
    let acc = evaluate(&trainer.model, &data)?;
    println!("training-set accuracy {acc:.4}");
    let dead = trainer.dead_attention_blocks();
    if !dead.is_empty() {
        eprintln!("warning: blocks {dead:?} never received gradient on all of Q, K and V");
    }
    println!("checkpoint {}", ckpt.display());
    println!("log {}", log_path.display());
    Ok(())
}

fn profile(ctx: &Ctx, samples: Option<usize>, zero_rates: bool) -> Result<()> {
    let (model, weights) = ctx.model()?;
    let config = model.config().clone();
    let trace = if zero_rates {
        FiringRateTrace::uniform(&config, 0.0)
    } else {
        let n = samples.unwrap_or(ctx.file.profile.samples);
        if n == 0 {
            return Err(CliError::Usage("--samples must be positive".into()));
        }
        let kind = ctx.file.dataset_kind()?;
        let per_class = n.div_ceil(kind.num_classes());
        let data = synth_dataset(kind, per_class, ctx.file.geometry(), ctx.file.train.data_seed)?;
        sfr_trace(&model, data.images.slice(s![..n, .., .., ..]))?
    };
    let report = energy_spike_model_with(&config, &trace, &ctx.file.constants()?, ctx.file.accounting()?)?;
    let mut header = ctx.header("energy report");
    header.push(weights);
    header.push(format!("model {}-{} T={} N={}", config.blocks, config.channels, config.timesteps, config.tokens()));
    if zero_rates {
        header.push("rates: injected all-zero trace".into());
    }
    let dir = ctx.out_dir()?;
    fs::write(dir.join("energy.csv"), report.to_csv(&header))?;
    fs::write(dir.join("energy_ann.csv"), report.ann_csv(&header))?;
    let mut sfr_header = header.clone();
    sfr_header[0] = format!("spikedrive {} firing-rate trace", env!("CARGO_PKG_VERSION"));
    fs::write(dir.join("sfr.csv"), trace.to_csv(&sfr_header))?;
    println!("E1 (vanilla self-attention, one layer, {}) {:.4e} pJ", report.accounting.name(), report.vsa_layer_pj);
    if config.blocks > 0 {
        println!("E2 (spike-driven self-attention, block 1) {:.4e} pJ", report.sdsa_layer_pj(0));
    }
    println!("spike-driven model total {:.4e} pJ", report.total_pj());
    println!("ANN counterpart total {:.4e} pJ", report.ann_total_pj());
    println!("ratio ANN/spike {:.3}", report.ratio());
    println!("reports {}", dir.display());
    Ok(())
}

fn read_image(path: &Path, channels: usize) -> Result<Array3<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::Core(spikedrive::Error::Image(format!("{}: {e}", path.display()))))?
        .with_guessed_format()?
        .decode()
        .map_err(|e| CliError::Core(spikedrive::Error::Image(format!("{}: {e}", path.display()))))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Ok(Array3::from_shape_fn((1, h, w), |(_, y, x)| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
        }
        3 => {
            let rgb = img.to_rgb8();
            Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
        }
        n => Err(CliError::Config(format!("attn reads 1- or 3-channel images; model.in_channels is {n}"))),
    }
}

fn attn(ctx: &Ctx, image: &Path) -> Result<()> {
    let (model, weights) = ctx.model()?;
    let config = model.config().clone();
    let img = read_image(image, config.in_channels)?;
    let (_, h, w) = img.dim();
    if (h, w) != (config.height, config.width) {
        return Err(CliError::Core(spikedrive::Error::Geometry(format!(
            "image {} is {w}x{h}, model expects {}x{}",
            image.display(),
            config.width,
            config.height
        ))));
    }
    let batch = img.insert_axis(Axis(0));
    let mut probe = Probe::capturing_attention();
    model.forward(repeat_over_time(batch.view(), config.timesteps).view(), PassOptions::inference(), Some(&mut probe))?;
    let maps = attention_maps(&probe, config.timesteps, 1, config.grid())?;
    let dir = ctx.out_dir()?;
    println!("{weights}");
    for m in &maps {
        m.write(dir)?;
        let (vs, vh) = (m.v_s.mean().unwrap_or(0.0), m.v_hat.mean().unwrap_or(0.0));
        println!("block {}: {}x{} map, mean V_S rate {vs:.4}, mean output rate {vh:.4}", m.block + 1, m.v_s.nrows(), m.v_s.ncols());
    }
    println!("maps {}", dir.display());
    Ok(())
}

fn gradcheck(ctx: &Ctx, tolerance: f64) -> Result<()> {
    let (model, weights) = ctx.model()?;
    let kind = ctx.file.dataset_kind()?;
    let data = synth_dataset(kind, 1, ctx.file.geometry(), ctx.file.train.data_seed)?;
    if data.num_classes != model.config().num_classes {
        return Err(CliError::Config(format!(
            "dataset `{}` has {} classes, model has {}",
            ctx.file.train.dataset,
            data.num_classes,
            model.config().num_classes
        )));
    }
    let (images, labels) = data.batch(&[0]);
    let report = grad_check(&model, images.view(), &labels, tolerance)?;
    println!("{weights}");
    println!("{:<32} {:>8} {:>8} {:>12}  result", "group", "checked", "excluded", "rel_error");
    for g in &report.groups {
        println!(
            "{:<32} {:>8} {:>8} {:>12.3e}  {}",
            g.name,
            g.checked,
            g.excluded,
            g.rel_error,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    println!("cosine similarity {:.6}", report.cosine);
    if report.passed() {
        println!("gradient check passed at tolerance {tolerance}");
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed at tolerance {tolerance}")))
    }
}
