//! `evfuse`: simulate sequences, train the detector and run the
//! evaluation protocols.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evfuse_core::detector::DetectorParams;
use evfuse_core::evalkit::{run_protocol, EmptyDetector, GtEcho, NeuralDetector, ProtocolKind, StreamDetector};
use evfuse_core::scenesim::{make_dataset, SequenceDataset};
use evfuse_core::trainer::train;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "evfuse", version, about = "Event + RGB fusion detector toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the scene, detector initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence to a dataset directory.
    Simulate(SimulateArgs),
    /// Train a detector on dataset directories.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a reference stub.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Sequence length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// RGB frame every N event ticks.
    #[arg(long)]
    rgb_divisor: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory; repeat for several sequences.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    time_shift: Option<Toggle>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stub {
    GtEcho,
    Empty,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate a reference stub instead of a checkpoint.
    #[arg(long, value_enum)]
    stub: Option<Stub>,
}

fn parse_protocol(s: &str) -> std::result::Result<ProtocolKind, String> {
    s.parse().map_err(|e: evfuse_core::Error| e.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Simulate(a) => {
            if let Some(d) = a.duration {
                cfg.scene.duration_s = d;
            }
            if let Some(n) = a.rgb_divisor {
                cfg.scene.rgb_divisor = n;
            }
            cfg.validate()?;
            simulate(&cfg)
        }
        Command::Train(a) => {
            if !a.data.is_empty() {
                cfg.train.data = a.data;
            }
            if let Some(n) = a.iters {
                cfg.train.config.iterations = n;
            }
            if let Some(t) = a.time_shift {
                cfg.train.config.time_shift.enabled = t == Toggle::On;
            }
            if a.init.is_some() {
                cfg.train.init = a.init;
            }
            cfg.validate()?;
            train_cmd(&cfg)
        }
        Command::Eval(a) => {
            if !a.data.is_empty() {
                cfg.eval.data = a.data;
            }
            if let Some(p) = a.protocol {
                cfg.eval.protocol.kind = p;
            }
            if a.checkpoint.is_some() {
                cfg.eval.checkpoint = a.checkpoint;
            }
            if let Some(s) = a.stub {
                cfg.eval.stub = Some(
                    match s {
                        Stub::GtEcho => "gt_echo",
                        Stub::Empty => "empty",
                    }
                    .into(),
                );
            }
            cfg.validate()?;
            eval_cmd(&cfg)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out.as_deref().context("no output directory: pass --out or set `out`")?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(out)
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let scene = cfg.scene_config();
    let s = &cfg.scene;
    let t = Instant::now();
    let ds = make_dataset(&scene, s.duration_s, s.f_event, s.rgb_divisor)?;
    ds.save_dir(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{}: {} ticks, {} events, {} frames ({:.1}s)",
        out.display(),
        ds.num_ticks,
        ds.events.len(),
        ds.frames.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_data(dirs: &[PathBuf]) -> Result<Vec<SequenceDataset>> {
    if dirs.is_empty() {
        bail!("no dataset directories given (use --data)");
    }
    dirs.iter()
        .map(|d| SequenceDataset::load_dir(d).with_context(|| format!("loading dataset {}", d.display())))
        .collect()
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let data = load_data(&cfg.train.data)?;
    let det_cfg = cfg.detector_config();
    let init = match &cfg.train.init {
        Some(p) => DetectorParams::load_with_config(p, det_cfg)
            .with_context(|| format!("loading initial checkpoint {}", p.display()))?,
        None => DetectorParams::new(det_cfg)?,
    };
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let tc = cfg.train_config();
    let t = Instant::now();
    let (det, log) = train(&data, &tc, init)?;
    det.save(&out.join("checkpoint.safetensors"))?;
    log.write_csv(&out.join("train_log.csv"))?;
    let last = log.rows.last();
    println!(
        "trained {} iterations in {:.1}s, final loss {}",
        log.rows.len(),
        t.elapsed().as_secs_f64(),
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.loss_total))
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let data = load_data(&cfg.eval.data)?;
    let e = &cfg.eval;
    let mut model: Box<dyn StreamDetector> = match (e.stub.as_deref(), &e.checkpoint) {
        (Some("gt_echo"), _) => Box::new(GtEcho::default()),
        (Some("empty"), _) => Box::new(EmptyDetector),
        (Some(other), _) => bail!("unknown stub {other:?}"),
        (None, Some(p)) => {
            let det = match &cfg.detector {
                Some(_) => DetectorParams::load_with_config(p, cfg.detector_config()),
                None => DetectorParams::load(p),
            }
            .with_context(|| format!("loading checkpoint {}", p.display()))?;
            let mut m = NeuralDetector::new(det, e.protocol.score_threshold, e.protocol.nms_iou);
            m.stateless = e.reset_state;
            Box::new(m)
        }
        (None, None) => bail!("nothing to evaluate: pass --checkpoint or --stub"),
    };
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let report = run_protocol(model.as_mut(), &data, &e.protocol)?;
    report.write(out)?;
    for p in &report.points {
        println!("{:<16} mAP {:6.2}  AP50 {:6.2}  AP75 {:6.2}", p.point, 100.0 * p.map, 100.0 * p.ap50, 100.0 * p.ap75);
    }
    if let Some(d) = report.mdrop {
        println!("MDrop {:.2}", 100.0 * d);
    }
    Ok(())
}
