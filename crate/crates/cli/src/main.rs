use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rpose_cli::check::{run_all, Tolerances};
use rpose_cli::config::layered;
use rpose_cli::exit;
use rpose_cli::stream::{write_poses, DetectionStream};
use rpose_core::eval::{causal_infer, run_evaluation, write_report_csv, write_report_json, EvalConfig, EvalError, EvalRow, InferenceOptions, ModelRef};
use rpose_core::model::{init_params, ModelConfig};
use rpose_core::synthdata::{generate_dataset, read_dataset, write_dataset, GenConfig, SynthError};
use rpose_core::tensor::{load_checkpoint, CheckpointError, ParamStore, CHECKPOINT_FORMAT_VERSION};
use rpose_core::training::{train, TrainConfig, TrainError, TrainOutputs};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "rpose", about = "Multi-view 3D pose reconstruction from ray tokens")]
struct Cli {
    /// JSON config applied over the subcommand defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Smoke,
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Evaluate a checkpoint and the triangulation baseline.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output prefix; writes PREFIX.csv and PREFIX.json.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        baseline_only: bool,
    },
    /// Causal inference over a detection stream.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Detection stream (JSON Lines).
        #[arg(long, conflicts_with = "dataset")]
        input: Option<PathBuf>,
        /// Read the stream from a dataset file instead.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Comma-separated camera indices; all cameras by default.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, ray-distance and softmax self-checks.
    Check {
        #[arg(long)]
        grad_tol: Option<f64>,
        #[arg(long)]
        ray_tol: Option<f64>,
        #[arg(long)]
        softmax_tol: Option<f64>,
    },
}

struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(exit::CONFIG, e)
}

fn synth_failure(e: SynthError) -> Failure {
    match e {
        SynthError::Config(_) => config_err(e),
        e => Failure::new(1, e),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => Failure::new(exit::NUMERIC, e),
        TrainError::Config(_) | TrainError::Model(_) => config_err(e),
        TrainError::Data(d) => synth_failure(d),
        e => Failure::new(1, e),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Shape(_) => Failure::new(exit::MISMATCH, e),
        EvalError::Config(_) | EvalError::Model(_) => config_err(e),
        EvalError::Data(d) => synth_failure(d),
        e => Failure::new(1, e),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRecipe {
    train: TrainConfig,
    model: ModelConfig,
}

fn preset_recipe(preset: Preset) -> TrainRecipe {
    match preset {
        Preset::Smoke => TrainRecipe {
            train: TrainConfig { batch_size: 8, total_steps: 200, warmup_steps: 20, base_lr: 1e-3, ..TrainConfig::default() },
            model: ModelConfig { d_model: 32, heads: 4, encoder_layers: 2, decoder_layers: 1, harmonic_frequencies: 6, ..ModelConfig::default() },
        },
        Preset::Desk => TrainRecipe::default(),
        Preset::Full => TrainRecipe { train: TrainConfig::full_preset(), model: ModelConfig::default() },
    }
}

fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore<f32>), Failure> {
    let ckpt = load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io(_) => Failure::new(exit::CONFIG, anyhow!(e).context(format!("reading {}", path.display()))),
        e => Failure::new(exit::MISMATCH, e),
    })?;
    let cfg: ModelConfig = serde_json::from_value(ckpt.model_config.clone())
        .map_err(|e| Failure::new(exit::MISMATCH, anyhow!("checkpoint model config: {e}")))?;
    cfg.validate().map_err(|e| Failure::new(exit::MISMATCH, e))?;
    let expected = init_params(&cfg, 0).map_err(|e| Failure::new(exit::MISMATCH, e))?;
    let params = ckpt.into_params_matching(&expected).map_err(|e| Failure::new(exit::MISMATCH, e))?;
    Ok((cfg, params))
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(anyhow!("input file {} does not exist", path.display())))
    }
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn headline(rows: &[EvalRow], method: &str) -> Vec<(usize, f64)> {
    let mut counts: Vec<usize> = rows.iter().filter(|r| r.condition.starts_with("cams:")).map(|r| r.n_cams).collect();
    counts.sort_unstable();
    counts.dedup();
    let prefix = format!("cams:{method}:");
    counts
        .into_iter()
        .map(|n| {
            let same: Vec<EvalRow> = rows.iter().filter(|r| r.n_cams == n && r.condition.starts_with(&prefix)).cloned().collect();
            (n, rpose_core::eval::mean_mpjpe(&same, &prefix))
        })
        .filter(|(_, v)| !v.is_nan() || method == "baseline")
        .collect()
}

fn run(cli: Cli) -> Outcome {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gen { out, sequences, frames, cameras } => {
            let mut cfg: GenConfig = layered(&GenConfig::default(), config, &cli.overrides).map_err(config_err)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.sequences = sequences.unwrap_or(cfg.sequences);
            cfg.frames = frames.unwrap_or(cfg.frames);
            cfg.cameras = cameras.unwrap_or(cfg.cameras);
            let ds = generate_dataset(&cfg).map_err(synth_failure)?;
            write_dataset(&out, &ds).map_err(synth_failure)?;
            println!("sequences {}, frames {}, cameras {}, joints {}", ds.sequences.len(), cfg.frames, cfg.cameras, ds.skeleton.num_joints());
            Ok(())
        }
        Command::Train { dataset, checkpoint, metrics, preset } => {
            let mut recipe: TrainRecipe = layered(&preset_recipe(preset), config, &cli.overrides).map_err(config_err)?;
            recipe.train.seed = cli.seed.unwrap_or(recipe.train.seed);
            recipe.train.validate().map_err(train_failure)?;
            recipe.model.validate().map_err(config_err)?;
            require_file(&dataset)?;
            let ds = read_dataset(&dataset).map_err(|e| synth_failure(e).with_context(&dataset))?;
            let outputs = TrainOutputs { checkpoint: Some(checkpoint.clone()), metrics };
            let outcome = train(&recipe.train, &recipe.model, &ds, &outputs).map_err(train_failure)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}, checkpoint {}", outcome.losses.len(), checkpoint.display());
            Ok(())
        }
        Command::Eval { dataset, checkpoint, report, baseline_only } => {
            let mut cfg: EvalConfig = layered(&EvalConfig::default(), config, &cli.overrides).map_err(config_err)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.baseline_only |= baseline_only;
            cfg.validate().map_err(eval_failure)?;
            require_file(&dataset)?;
            if let Some(p) = &checkpoint {
                require_file(p)?;
            }
            let model = match (&checkpoint, cfg.baseline_only) {
                (_, true) => None,
                (Some(p), false) => Some(load_model(p)?),
                (None, false) => return Err(config_err(anyhow!("--checkpoint is required unless --baseline-only is set"))),
            };
            let ds = read_dataset(&dataset).map_err(|e| synth_failure(e).with_context(&dataset))?;
            let model_ref = model.as_ref().map(|(cfg, params)| ModelRef { params, cfg });
            let rep = run_evaluation(model_ref, &ds, &cfg).map_err(eval_failure)?;
            write_report_csv(with_extension(&report, "csv"), &rep).map_err(eval_failure)?;
            write_report_json(with_extension(&report, "json"), &rep).map_err(eval_failure)?;
            for method in ["model", "baseline"] {
                for (n, v) in headline(&rep.rows, method) {
                    println!("{method} MPJPE with {n} cameras: {v:.2} mm");
                }
            }
            if rep.fallback_frames() > 0 {
                println!("{} frames used the fallback center", rep.fallback_frames());
            }
            Ok(())
        }
        Command::Infer { checkpoint, input, dataset, sequence, cameras, out } => {
            let mut opts: InferenceOptions = layered(&InferenceOptions::default(), config, &cli.overrides).map_err(config_err)?;
            if opts.t_in == 0 {
                return Err(config_err(anyhow!("t_in must be at least 1")));
            }
            require_file(&checkpoint)?;
            for p in input.iter().chain(dataset.iter()) {
                require_file(p)?;
            }
            let stream = match (input, dataset) {
                (Some(p), _) => {
                    let f = File::open(&p).with_context(|| format!("opening {}", p.display())).map_err(config_err)?;
                    DetectionStream::read(BufReader::new(f)).map_err(config_err)?
                }
                (None, Some(p)) => {
                    let ds = read_dataset(&p).map_err(|e| synth_failure(e).with_context(&p))?;
                    let seq = ds.sequences.get(sequence).ok_or_else(|| config_err(anyhow!("dataset has no sequence {sequence}")))?;
                    DetectionStream::from_sequence(seq, ds.skeleton.neck().map_err(config_err)?)
                }
                (None, None) => return Err(config_err(anyhow!("either --input or --dataset is required"))),
            };
            let (cfg, params) = load_model(&checkpoint)?;
            let cams: Vec<_> = stream.header.cameras.iter().map(|c| c.to_params()).collect();
            for c in &cams {
                c.validate().map_err(config_err)?;
            }
            let cameras = cameras.unwrap_or_else(|| (0..cams.len()).collect());
            let detections: Vec<_> = stream.frames.iter().map(|f| f.detections.clone()).collect();
            if stream.header.neck >= cfg.num_joints {
                return Err(Failure::new(exit::MISMATCH, anyhow!("neck index {} outside {} joints", stream.header.neck, cfg.num_joints)));
            }
            opts.fallback_center = opts.fallback_center.map(|v| v / 1000.0);
            let result = causal_infer(&params, &cfg, &cams, &detections, &cameras, stream.header.neck, &opts).map_err(eval_failure)?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_poses(BufWriter::new(f), &result.poses)?;
            println!("wrote {} poses to {}", result.poses.len(), out.display());
            if !result.fallback_frames.is_empty() {
                println!("fallback center used at frames {:?}", result.fallback_frames);
            }
            Ok(())
        }
        Command::Check { grad_tol, ray_tol, softmax_tol } => {
            let base = Tolerances::default();
            let tol = Tolerances {
                gradient: grad_tol.unwrap_or(base.gradient),
                ray_distance: ray_tol.unwrap_or(base.ray_distance),
                softmax: softmax_tol.unwrap_or(base.softmax),
            };
            let results = run_all(&tol);
            for r in &results {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!("{verdict} {:<13} max error {:.3e} (tolerance {:.1e})", r.name, r.max_error, r.tolerance);
            }
            if results.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(Failure::new(exit::CHECK, anyhow!("self-check failed")))
            }
        }
    }
}

trait WithPath {
    fn with_context(self, path: &Path) -> Self;
}

impl WithPath for Failure {
    fn with_context(self, path: &Path) -> Self {
        Self { code: self.code, error: self.error.context(format!("dataset {}", path.display())) }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version: &'static str = Box::leak(
        format!(
            "{} (checkpoint format {CHECKPOINT_FORMAT_VERSION}, dataset format {})",
            env!("CARGO_PKG_VERSION"),
            rpose_core::synthdata::DATASET_FORMAT_VERSION
        )
        .into_boxed_str(),
    );
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(exit::CONFIG as u8);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
