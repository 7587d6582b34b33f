use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchgan::config::RunConfig;
use branchgan::data::{build_dataset, Convention, DatasetRequest, SynthParams};
use branchgan::eval::{
    ablate, eval_latents, evaluate_checkpoint, infer, AblationVariant, EvalOutputs, EvalReport,
};
use branchgan::imaging::{load_image, save_image, save_raw_f32, save_signed_map};
use branchgan::losses::Reduction;
use branchgan::train::{latest_checkpoint, train, TrainRunOptions, TrainState};
use branchgan::{Error, Result};
use clap::{Args, Parser, Subcommand};

const RUN_ROOT_ENV: &str = "BRANCHGAN_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "branchgan", version, about = "Branched additive generators for class-distinction maps")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-class dataset with ground-truth masks.
    GenData(GenDataArgs),
    /// Train a model; writes <run-root>/<name>/.
    Train(TrainArgs),
    /// Decompose images with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate several branch counts over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// 1: bright rectangle present; 2: dark disc.
    #[arg(long, default_value_t = 1)]
    set: u8,
    /// Training images per class.
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    /// Test images per class.
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    /// Replace an existing non-empty directory.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise_low: Option<f64>,
    #[arg(long)]
    noise_high: Option<f64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    shape_intensity: Option<f64>,
    #[arg(long)]
    rect_intensity: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    shape_size: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    rect_size: Option<Vec<f64>>,
    #[arg(long)]
    margin: Option<usize>,
}

/// Flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args, Debug)]
struct RunOverrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    set: Option<u8>,
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// mean or sum.
    #[arg(long)]
    reduction: Option<Reduction>,
    #[arg(long)]
    lr_gen: Option<f64>,
    #[arg(long)]
    lr_map: Option<f64>,
    #[arg(long)]
    lr_disc: Option<f64>,
    /// Fix the mapping latent to zero.
    #[arg(long)]
    deterministic_style: bool,
    /// One blend vector per sample instead of per batch.
    #[arg(long)]
    per_sample_alpha: bool,
    /// Apply the specialisation terms to the style-transferred outputs too.
    #[arg(long)]
    sqr_on_transfer: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Run directory parent.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "run")]
    run_root: PathBuf,
    /// Run name; defaults to the config hash.
    #[arg(long)]
    name: Option<String>,
}

impl RunOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            c.data.root = v.clone();
        }
        if let Some(v) = self.set {
            c.data.set = v;
        }
        if let Some(v) = self.branches {
            c.net.num_branches = v;
        }
        if let Some(v) = self.base_width {
            c.net.base_width = v;
        }
        if let Some(v) = self.iters {
            c.train.total_iters = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.reduction {
            c.train.reduction = v;
        }
        if let Some(v) = self.lr_gen {
            c.optim.lr_gen = v;
        }
        if let Some(v) = self.lr_map {
            c.optim.lr_map = v;
        }
        if let Some(v) = self.lr_disc {
            c.optim.lr_disc = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.train.checkpoint_every = v;
        }
        if let Some(v) = self.eval_every {
            c.train.eval_every = v;
        }
        c.train.deterministic_style |= self.deterministic_style;
        c.train.per_sample_alpha |= self.per_sample_alpha;
        c.train.sqr_on_transfer |= self.sqr_on_transfer;
        c.train_config()?;
        Ok(c)
    }

    fn run_dir(&self, c: &RunConfig) -> Result<PathBuf> {
        let name = match &self.name {
            Some(n) => n.clone(),
            None => c.train_config()?.hash(),
        };
        Ok(self.run_root.join(name))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from a checkpoint; without a value, from the latest in the run directory.
    #[arg(long, num_args = 0..=1)]
    resume: Option<Option<PathBuf>>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PNG file or directory of PNGs.
    #[arg(long)]
    image: PathBuf,
    /// Class whose style is used (normally the image's own class).
    #[arg(long = "class")]
    class: usize,
    #[arg(long, default_value = "infer_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    style_seed: u64,
    #[arg(long)]
    deterministic_style: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root; the test split is used.
    #[arg(long)]
    data: PathBuf,
    /// Append the result row to this CSV instead of printing it.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for per-image PNG panels.
    #[arg(long)]
    panels_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    panels: usize,
    #[arg(long, default_value_t = 0)]
    style_seed: u64,
    #[arg(long)]
    deterministic_style: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Branch counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "5,1")]
    variants: Vec<usize>,
    /// Add a single-branch variant widened to the parameter count of the base config.
    #[arg(long)]
    matched: bool,
    /// Relative tolerance for the parameter match.
    #[arg(long, default_value_t = 0.05)]
    match_tol: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut p = SynthParams::default();
    if let Some(v) = a.image_size {
        p.image_size = v;
    }
    if let Some(v) = a.noise_low {
        p.noise_low = v;
    }
    if let Some(v) = a.noise_high {
        p.noise_high = v;
    }
    if let Some(v) = a.blur_sigma {
        p.blur_sigma = v;
    }
    if let Some(v) = a.shape_intensity {
        p.shape_intensity = v;
    }
    if let Some(v) = a.rect_intensity {
        p.rect_intensity = v;
    }
    if let Some(v) = &a.shape_size {
        p.shape_size_range = (v[0], v[1]);
    }
    if let Some(v) = &a.rect_size {
        p.rect_size_range = (v[0], v[1]);
    }
    if let Some(v) = a.margin {
        p.margin = v;
    }
    let m = build_dataset(&DatasetRequest {
        root: a.root.clone(),
        seed: a.seed,
        convention: Convention::from_set_number(a.set)?,
        n_train_per_class: a.n_train,
        n_test_per_class: a.n_test,
        params: p,
        overwrite: a.overwrite,
    })?;
    println!("wrote {} images to {}", m.files.len(), a.root.display());
    Ok(())
}

fn run_train(a: &TrainArgs, verbose: bool) -> Result<()> {
    let run = a.run.resolve()?;
    let dir = a.run.run_dir(&run)?;
    let resume = match &a.resume {
        None => None,
        Some(None) => Some(latest_checkpoint(&dir)?.ok_or_else(|| {
            Error::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint to resume from"))
        })?),
        Some(Some(p)) => Some(p.clone()),
    };
    let out = train::<f32>(
        &run,
        &dir,
        &TrainRunOptions {
            resume,
            stop_at: None,
            verbose,
        },
    )?;
    println!("run directory {}", dir.display());
    println!("final checkpoint {}", out.final_checkpoint.display());
    if let Some(p) = out.last_test_psnr {
        println!("test psnr {p:.3} dB");
    }
    Ok(())
}

fn png_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files")));
    }
    Ok(files)
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let (state, _) = TrainState::<f32>::load(&a.ckpt, None)?;
    let models = &state.models;
    let cfg = models.config();
    if a.class >= cfg.num_classes {
        return Err(Error::config(format!("class must be below {}", cfg.num_classes)));
    }
    let inputs = png_inputs(&a.image)?;
    let images = inputs
        .iter()
        .map(|p| {
            let img = load_image::<f32>(p)?;
            if img.shape() != [cfg.in_channels, cfg.image_size, cfg.image_size] {
                return Err(Error::ConfigMismatch(format!(
                    "{}: image is {:?}, model expects {}x{}",
                    p.display(),
                    img.shape(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = eval_latents(images.len(), cfg.latent_dim, a.style_seed, a.deterministic_style);
    let results = infer(models, &images, &vec![a.class; images.len()], &z)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (path, inf) in inputs.iter().zip(&results) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for (i, psi) in inf.branches.psis.iter().enumerate() {
            save_signed_map(&a.out.join(format!("{stem}_branch{}.png", i + 1)), psi)?;
        }
        save_image(&a.out.join(format!("{stem}_composed.png")), &inf.composed)?;
        save_signed_map(&a.out.join(format!("{stem}_distinction_diverging.png")), &inf.distinction)?;
        save_raw_f32(&a.out.join(format!("{stem}_distinction.f32")), &inf.distinction)?;
    }
    println!("wrote {} decompositions to {}", results.len(), a.out.display());
    Ok(())
}

const EVAL_HEADER: &str = "ckpt,N,params,images,psnr_mean,psnr_std,iou_mean,auroc_mean";

fn eval_row(ckpt: &Path, r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        ckpt.display().to_string().replace(',', "_"),
        r.num_branches,
        r.params,
        r.images.len(),
        r.psnr_mean,
        r.psnr_std,
        r.iou_mean,
        r.auroc_mean
    )
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let outputs = EvalOutputs {
        panels: if a.panels_dir.is_some() { a.panels } else { 0 },
        dir: a.panels_dir.clone(),
    };
    let report = evaluate_checkpoint(&a.ckpt, &a.data, a.style_seed, a.deterministic_style, &outputs)?;
    let row = eval_row(&a.ckpt, &report);
    match &a.csv {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let text = if fresh { format!("{EVAL_HEADER}\n{row}\n") } else { format!("{row}\n") };
            f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        None => println!("{EVAL_HEADER}\n{row}"),
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.run.resolve()?;
    let mut variants: Vec<AblationVariant> = a
        .variants
        .iter()
        .map(|&n| AblationVariant {
            num_branches: n,
            base_width: None,
        })
        .collect();
    if a.matched {
        variants.push(AblationVariant::matched_single_branch(&base.net, a.match_tol)?);
    }
    let dir = match &a.run.name {
        Some(n) => a.run.run_root.join(n),
        None => a.run.run_root.join(format!("ablate_{}", base.train_config()?.hash())),
    };
    let rows = ablate(&base, &variants, &a.seeds, &dir)?;
    for r in &rows {
        println!(
            "N={} params={} seed={} psnr={:.3} auroc={:.3} {}",
            r.n, r.params, r.seed, r.psnr_mean, r.auroc_mean, r.status
        );
    }
    println!("results in {}", dir.join("ablation.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, cli.verbose),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
