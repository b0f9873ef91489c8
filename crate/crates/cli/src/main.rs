//! `sgq`: synthesise scenes, train, evaluate, benchmark and render.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgq_core::bench::{bench_decoder, BenchConfig};
use sgq_core::config::{Config, DecoderMode};
use sgq_core::eval::{evaluate_ap, format_csv, format_table, EvalConfig, PredScene};
use sgq_core::geom::{BevRange, Scene};
use sgq_core::io::{read_lines, read_scenes, write_lines, write_scenes};
use sgq_core::model::Model;
use sgq_core::render::render_svg;
use sgq_core::synth::{synth_dataset, SynthParams};
use sgq_core::train::{load_checkpoint, predict_all, prepare_samples, train, CheckpointPlan};
use sgq_core::SgqError;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] SgqError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sgq", version, about = "Vectorised map decoding on synthetic scenes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for scene generation, rendering noise and training order.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration overrides, `key=value`; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Main output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene file and a `<out>.params` echo of the settings.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train on a scene file and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print per-class AP with mAP over both threshold sets.
    Eval {
        /// Ground-truth scene file.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction file; mutually exclusive with `--checkpoint`.
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Predict with this checkpoint; `--out` saves the predictions.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time and count allocations of decoder forward passes.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [50usize, 75, 100, 125])]
        queries: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Mode::Sgq, Mode::PointQuery])]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Model width.
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        /// BEV grid as `H,W`.
        #[arg(long, value_delimiter = ',', default_values_t = [200usize, 100])]
        bev: Vec<usize>,
    },
    /// Draw one scene, optionally with predictions, as SVG.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Scene id; defaults to the first scene.
        #[arg(long)]
        scene: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Sgq,
    PointQuery,
}

impl From<Mode> for DecoderMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sgq => DecoderMode::Sgq,
            Mode::PointQuery => DecoderMode::PointQuery,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_owned(), e))
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_or(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(c: &Common, count: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let out = out_or(c, "scenes.jsonl");
    let scenes = synth_dataset(&SynthParams::from_config(&cfg, c.seed), count);
    write_scenes(&out, &scenes)?;
    let echo = format!("# sgq synth --seed {} --count {count}\n{}", c.seed, cfg.to_text());
    let params = sidecar(&out, ".params");
    write(&params, &echo)?;
    println!("wrote {count} scenes to {} and settings to {}", out.display(), params.display());
    Ok(())
}

fn run_train(c: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let scenes = read_scenes(data)?;
    let range = scenes.first().map(|s| s.bev_range).unwrap_or_default();
    let (cfg, init) = match resume {
        Some(p) => {
            let (cfg, store) = load_checkpoint::<f32>(p)?;
            (cfg, Some(store))
        }
        None => (load_config(c)?, None),
    };
    let (model, fresh) = Model::new::<f32>(&cfg, range, c.seed)?;
    let store = init.unwrap_or(fresh);
    let samples = prepare_samples::<f32>(&scenes, &cfg, c.seed)?;
    let out = out_or(c, "model.ckpt");
    let plan = CheckpointPlan {
        path: Some(out.clone()),
        config: Some(cfg.clone()),
    };
    let every = cfg.train.log_every.max(1);
    let last = cfg.train.iterations.saturating_sub(1);
    let mut csv = c.csv.as_ref().map(|_| String::from("iteration,sample,lr,total,cls,p2p,dir,one2many,bev,pv,grad_norm\n"));
    let result = train(&model, store, &samples, &cfg.train, c.seed, &plan, |e| {
        if e.iteration % every == 0 || e.iteration == last {
            println!("{}", e.line());
        }
        if let Some(s) = csv.as_mut() {
            let l = &e.loss;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.iteration, e.sample, e.lr, l.total, l.cls, l.p2p, l.dir, l.one2many, l.bev, l.pv, e.grad_norm
            ));
        }
    });
    if let (Some(path), Some(text)) = (&c.csv, &csv) {
        write(path, text)?;
    }
    result?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn predictions(c: &Common, scenes: &[Scene], checkpoint: &Path) -> Result<Vec<PredScene>> {
    let (cfg, store) = load_checkpoint::<f32>(checkpoint)?;
    let range = scenes.first().map(|s| s.bev_range).unwrap_or_else(BevRange::default);
    let (model, _) = Model::new::<f32>(&cfg, range, 0)?;
    let samples = prepare_samples::<f32>(scenes, &cfg, c.seed)?;
    Ok(predict_all(&model, &store, &samples)?)
}

fn eval(c: &Common, gt: &Path, pred: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let scenes = read_scenes(gt)?;
    let preds = match (pred, checkpoint) {
        (Some(p), _) => read_lines::<PredScene>(p)?,
        (None, Some(ck)) => {
            let p = predictions(c, &scenes, ck)?;
            if let Some(out) = &c.out {
                write_lines(out, &p)?;
            }
            p
        }
        (None, None) => return Err(CliError::Usage("eval needs --pred or --checkpoint".into())),
    };
    let m1 = evaluate_ap(&preds, &scenes, &EvalConfig::map1())?;
    let m2 = evaluate_ap(&preds, &scenes, &EvalConfig::map2())?;
    let rows = [("mAP1", &m1), ("mAP2", &m2)];
    print!("{}", format_table(&rows));
    if let Some(path) = &c.csv {
        write(path, &format_csv(&rows))?;
    }
    Ok(())
}

struct BenchArgs {
    queries: Vec<usize>,
    modes: Vec<Mode>,
    points: usize,
    repeats: usize,
    dim: usize,
    layers: usize,
    bev: Vec<usize>,
}

fn bench(c: &Common, a: BenchArgs) -> Result<()> {
    let [bev_h, bev_w] = a.bev[..] else {
        return Err(CliError::Usage("--bev takes H,W".into()));
    };
    let base = BenchConfig::default();
    let cfg = BenchConfig {
        modes: a.modes.into_iter().map(DecoderMode::from).collect(),
        num_queries: a.queries,
        num_points: a.points,
        repeats: a.repeats,
        dim: a.dim,
        layers: a.layers,
        ffn_dim: 2 * a.dim,
        heads: if a.dim % base.heads == 0 { base.heads } else { 1 },
        bev_h,
        bev_w,
        seed: c.seed,
        ..base
    };
    let records = bench_decoder(&cfg)?;
    print!("{}", sgq_core::bench::format_table(&records));
    if let Some(path) = &c.csv {
        write(path, &sgq_core::bench::format_csv(&records))?;
    }
    Ok(())
}

fn render(c: &Common, data: &Path, pred: Option<&Path>, id: Option<&str>) -> Result<()> {
    let scenes = read_scenes(data)?;
    let scene = match id {
        Some(id) => scenes.iter().find(|s| s.id == id).ok_or_else(|| CliError::Usage(format!("no scene `{id}` in {}", data.display())))?,
        None => scenes.first().ok_or_else(|| CliError::Usage(format!("{} has no scenes", data.display())))?,
    };
    let preds = match pred {
        Some(p) => read_lines::<PredScene>(p)?,
        None => Vec::new(),
    };
    let mine = preds.iter().find(|p| p.id == scene.id);
    if pred.is_some() && mine.is_none() {
        return Err(CliError::Usage(format!("no predictions for scene `{}`", scene.id)));
    }
    let out = out_or(c, "scene.svg");
    write(&out, &render_svg(scene, mine))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SGQ_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("SGQ_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(CliError::Usage("SGQ_THREADS must be a positive integer, got `0`".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let c = &cli.common;
    match cli.command {
        Command::Synth { count } => synth(c, count),
        Command::Train { data, resume } => run_train(c, &data, resume.as_deref()),
        Command::Eval { gt, pred, checkpoint } => eval(c, &gt, pred.as_deref(), checkpoint.as_deref()),
        Command::Bench {
            queries,
            modes,
            points,
            repeats,
            dim,
            layers,
            bev,
        } => bench(
            c,
            BenchArgs {
                queries,
                modes,
                points,
                repeats,
                dim,
                layers,
                bev,
            },
        ),
        Command::Render { data, pred, scene } => render(c, &data, pred.as_deref(), scene.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
