use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mixseg::data::{load_dataset, save_dataset, write_ppm_bytes, BenchmarkSpec, DatasetSplit, LabelMap, SaveOptions, CLASS_NAMES};
use mixseg::model::load_checkpoint;
use mixseg::numerics::Tensor;
use mixseg::selfcheck::run_selfcheck;
use mixseg::trainer::grid::{run_grid, GridKind};
use mixseg::trainer::{evaluate, format_report, kv_pairs, run_any, stack_images, RunOptions, TrainConfig};
use mixseg::Error;

mod panel;

#[derive(Parser)]
#[command(name = "mixseg", version, about = "Semi-supervised domain adaptation with inter- and intra-domain mixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired two-domain shapes benchmark.
    GenData(GenData),
    /// Train one configuration.
    Train(Train),
    /// Score a checkpoint on the target evaluation pool.
    Eval(Eval),
    /// Run an ablation grid over several seeds.
    Ablate(Ablate),
    /// Write image | truth | prediction panels for the evaluation pool.
    Panel(Panel),
    /// Gradient checks and exact oracles.
    Selfcheck,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n_source: usize,
    #[arg(long, default_value_t = 500)]
    n_target: usize,
    #[arg(long, default_value_t = 100)]
    n_eval: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    /// Labeled images taken from the target pool.
    #[arg(long, default_value_t = 8)]
    n_labeled: usize,
    /// Also write ground truth for the unlabeled pool (never read by training).
    #[arg(long)]
    with_hidden_labels: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// One flag per config key; values given here override the config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    n_src: Option<String>,
    #[arg(long)]
    n_lbl_tgt: Option<String>,
    #[arg(long)]
    n_unl_tgt: Option<String>,
    #[arg(long)]
    lr_encoder: Option<String>,
    #[arg(long)]
    lr_head: Option<String>,
    #[arg(long)]
    warmup_iters: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    use_ls: Option<String>,
    #[arg(long)]
    use_lt: Option<String>,
    #[arg(long)]
    use_inter: Option<String>,
    #[arg(long)]
    use_intra: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    class_balanced: Option<String>,
    #[arg(long)]
    precision: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("iters", &self.iters),
            ("n_src", &self.n_src),
            ("n_lbl_tgt", &self.n_lbl_tgt),
            ("n_unl_tgt", &self.n_unl_tgt),
            ("lr_encoder", &self.lr_encoder),
            ("lr_head", &self.lr_head),
            ("warmup_iters", &self.warmup_iters),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("adam_eps", &self.adam_eps),
            ("weight_decay", &self.weight_decay),
            ("alpha", &self.alpha),
            ("tau", &self.tau),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("strategy", &self.strategy),
            ("use_ls", &self.use_ls),
            ("use_lt", &self.use_lt),
            ("use_inter", &self.use_inter),
            ("use_intra", &self.use_intra),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("widths", &self.widths),
            ("class_balanced", &self.class_balanced),
            ("precision", &self.precision),
        ]
    }
}

#[derive(Args)]
struct Train {
    /// `key = value` file; may also set `dataset` and `out`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every mixed sample to this directory.
    #[arg(long)]
    dump_mixed: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct Ablate {
    /// losses, strategies or weights.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Concurrent runs; defaults to MIXSEG_THREADS or the number of cores.
    #[arg(long, env = "MIXSEG_THREADS")]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for summary.csv and summary.md.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Panel {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only the first N evaluation images.
    #[arg(long)]
    limit: Option<usize>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn user_error(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Panel(a) => panel_cmd(a),
        Command::Selfcheck => selfcheck(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    if a.out.is_dir() && fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some() {
        if !a.force {
            return Err(user_error(format!("{} is not empty; pass --force to overwrite", a.out.display())));
        }
        fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    let spec = BenchmarkSpec {
        seed: a.seed,
        size: a.size,
        n_source: a.n_source,
        n_target: a.n_target,
        n_eval: a.n_eval,
        n_labeled: a.n_labeled,
        split_seed: a.seed,
        ..BenchmarkSpec::default()
    };
    let split = spec.build()?;
    save_dataset(&split, &spec, &a.out, SaveOptions { with_hidden_labels: a.with_hidden_labels })?;
    println!(
        "wrote {} source, {} labeled target, {} unlabeled target and {} evaluation images to {}",
        split.source.len(),
        split.labeled_target.len(),
        split.unlabeled_target.len(),
        split.eval_target.len(),
        a.out.display()
    );
    Ok(())
}

/// Config file plus overrides, and the `dataset` / `out` paths.
fn resolve(config: &Option<PathBuf>, overrides: &Overrides) -> Result<(TrainConfig, Option<PathBuf>, Option<PathBuf>), Failure> {
    let mut cfg = TrainConfig::default();
    let (mut dataset, mut out) = (None, None);
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in kv_pairs(&text)? {
            match key.as_str() {
                "dataset" => dataset = Some(PathBuf::from(value)),
                "out" => out = Some(PathBuf::from(value)),
                _ => cfg.set(&key, &value)?,
            }
        }
    }
    for (key, value) in overrides.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok((cfg, dataset, out))
}

fn load(path: Option<PathBuf>) -> Result<DatasetSplit, Failure> {
    let path = path.ok_or_else(|| user_error("no dataset given; pass --dataset DIR or set dataset in the config"))?;
    if !path.is_dir() {
        return Err(user_error(format!("dataset directory {} does not exist", path.display())));
    }
    Ok(load_dataset(&path)?)
}

fn train(a: Train) -> Result<(), Failure> {
    let (config, dataset, out) = resolve(&a.config, &a.overrides)?;
    let data = load(a.dataset.or(dataset))?;
    let out = a.out.or(out).unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", config.seed)));
    let options = RunOptions { out_dir: Some(out.clone()), dump_mixed: a.dump_mixed, progress: true };
    let report = run_any(&config, &data, &options)?;
    print!("{}", format_report(&report));
    println!("run directory: {}", out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<(), Failure> {
    let data = load(Some(a.dataset))?;
    let (params, role) = load_checkpoint::<f32>(&a.checkpoint)?;
    check_classes(params.arch.num_classes)?;
    let (cm, report) = evaluate(&params, &data.eval_target)?;
    println!("{role:?} checkpoint, {} evaluation images, {} pixels", data.eval_target.len(), cm.total());
    for (name, iou) in CLASS_NAMES.iter().zip(&report.per_class) {
        println!("{name:>10}  {}", iou.map_or("n/a".into(), |v| format!("{:6.2}", 100.0 * v)));
    }
    println!("mIoU {:.2}", 100.0 * report.mean);
    Ok(())
}

fn check_classes(n: usize) -> Result<(), Failure> {
    if n != CLASS_NAMES.len() {
        return Err(user_error(format!("checkpoint predicts {n} classes but the dataset has {}", CLASS_NAMES.len())));
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<(), Failure> {
    let kind = GridKind::parse(&a.grid)
        .ok_or_else(|| user_error(format!("unknown grid {:?}; expected losses, strategies or weights", a.grid)))?;
    if a.seeds == 0 {
        return Err(user_error("--seeds must be at least 1"));
    }
    let (base, dataset, out) = resolve(&a.config, &a.overrides)?;
    let data = load(a.dataset.or(dataset))?;
    let jobs = a.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let seeds: Vec<u64> = (0..a.seeds).map(|s| base.seed + s).collect();
    let started = Instant::now();
    let summary = run_grid(&base, &data, kind, &seeds, jobs)?;
    let out = a.out.or(out).unwrap_or_else(|| PathBuf::from(format!("runs/ablate_{}", kind.name())));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("summary.csv"), &summary.to_csv())?;
    write(&out.join("summary.md"), &summary.to_markdown())?;
    print!("{}", summary.to_markdown());
    println!("{} runs in {:.0}s, summary in {}", summary.rows.len() * seeds.len(), started.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn panel_cmd(a: Panel) -> Result<(), Failure> {
    let data = load(Some(a.dataset))?;
    let (params, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    check_classes(params.arch.num_classes)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let samples = &data.eval_target[..a.limit.unwrap_or(usize::MAX).min(data.eval_target.len())];
    for sample in samples {
        let images: Tensor<f32> = stack_images(&[&sample.image])?;
        let pred: LabelMap = params.predict(&images)?.remove(0);
        let (w, h, rgb) = panel::compose(&sample.image, sample.truth(), &pred);
        write_ppm_bytes(&a.out.join(format!("{:04}.ppm", sample.id)), w, h, &rgb)?;
    }
    write(&a.out.join("README.md"), &panel::readme())?;
    println!("wrote {} panels to {}", samples.len(), a.out.display());
    Ok(())
}

fn selfcheck() -> Result<(), Failure> {
    let started = Instant::now();
    let checks = run_selfcheck(None);
    for c in &checks {
        println!("{:<20} {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure { code: 2, message: format!("{failed} self-checks failed") });
    }
    Ok(())
}
