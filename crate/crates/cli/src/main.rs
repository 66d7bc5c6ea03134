//! `vagnet` command-line driver.
//!
//! Exit codes: 0 success, 2 input or config error, 3 numeric failure.

mod args;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use serde::{Deserialize, Serialize};

use args::{Cli, Command, EvalArgs, FlopsArgs, InferArgs, ModelOverrides, SynthArgs, TrainArgs};
use vagnet_core::dataio::{
    load_manifest, load_weights, read_features, write_synthetic_dataset, FeatureSequence,
    SyntheticSpec,
};
use vagnet_core::metrics::{evaluate, ScoredVideo};
use vagnet_core::model::{flop_estimate, forward, ModelConfig, ModelParams, StreamingSession};
use vagnet_core::training::{run_cross_validation, score_clips, train, TrainConfig};
use vagnet_core::{Error, Result};

/// Contents of `--config`; every table is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SyntheticSpec,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn apply_model(config: &mut ModelConfig, o: &ModelOverrides) {
    let pairs = [
        (&mut config.d_model, o.d_model),
        (&mut config.lookback, o.u),
        (&mut config.graph_neighbors, o.v),
        (&mut config.layers, o.layers),
        (&mut config.heads, o.heads),
    ];
    for (slot, value) in pairs {
        if let Some(v) = value {
            *slot = v;
        }
    }
}

fn print_config(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    eprintln!("resolved config:\n{text}");
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_dims(clips: &[FeatureSequence], params: &ModelParams<f32>) -> Result<()> {
    match clips.iter().find(|c| c.dim() != params.config.input_dim) {
        Some(c) => Err(Error::Dimension(format!(
            "features have dim {} ({}) but the checkpoint expects input_dim {}",
            c.dim(),
            c.group_id,
            params.config.input_dim
        ))),
        None => Ok(()),
    }
}

fn run_train(args: &TrainArgs, file: FileConfig) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let clips = manifest.load_split("train")?;
    if clips.is_empty() {
        return Err(Error::Input(format!(
            "{} has no entries tagged \"train\"",
            args.manifest.display()
        )));
    }
    let mut model = file.model;
    apply_model(&mut model, &args.model);
    model.input_dim = clips[0].dim();
    model.validate()?;
    let mut tc = file.train;
    tc.seed = args.seed.unwrap_or(tc.seed);
    tc.lr = args.lr.unwrap_or(tc.lr);
    tc.epochs = args.epochs.unwrap_or(tc.epochs);
    tc.eval_every = args.eval_every.unwrap_or(tc.eval_every);
    tc.keep_best |= args.keep_best;
    tc.checkpoint_dir = Some(args.out.clone());
    tc.validate()?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        folds: Option<usize>,
    }
    let resolved = Resolved { model: &model, train: &tc, folds: args.folds };
    print_config(&resolved);
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let config_path = args.out.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&resolved).expect("serializes"))
        .map_err(io_err(&config_path))?;

    if let Some(k) = args.folds {
        let cv = run_cross_validation(&clips, k, &model, &tc)?;
        for f in &cv.folds {
            println!("fold {}: AP={:.4} mTTA={:.3}s", f.fold, f.report.ap, f.report.mtta);
        }
        println!("mean: AP={:.4} mTTA={:.3}s", cv.mean_ap, cv.mean_mtta);
        let path = args.out.join("cv_report.json");
        fs::write(&path, serde_json::to_string_pretty(&cv).expect("serializes")).map_err(io_err(&path))?;
        return Ok(());
    }

    let val = manifest.load_split("val")?;
    let params = ModelParams::init(&model, tc.seed)?;
    let out = train(params, &clips, (!val.is_empty()).then_some(val.as_slice()), &tc)?;
    if let Some(last) = out.log.epochs.last() {
        println!(
            "trained {} epochs, {} steps, final mean loss {:.6}",
            out.log.epochs.len(),
            out.steps,
            last.mean_loss
        );
    }
    println!("wrote {}", args.out.join("final.vagw").display());
    Ok(())
}

fn worker_threads() -> Result<usize> {
    match std::env::var("VAGNET_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("VAGNET_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Scores clips on up to `threads` workers; output order follows `clips`.
fn score_parallel(params: &ModelParams<f32>, clips: &[FeatureSequence], threads: usize) -> Result<Vec<ScoredVideo>> {
    let chunk = clips.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| s.spawn(move || score_clips(params, part)))
            .collect();
        let mut out = Vec::with_capacity(clips.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let params = load_weights(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let clips = manifest.load_split(&args.split)?;
    if clips.is_empty() {
        return Err(Error::Input(format!(
            "{} has no entries tagged {:?}",
            args.manifest.display(),
            args.split
        )));
    }
    check_dims(&clips, &params)?;
    if args.grid == 0 {
        return Err(Error::Config("--grid must be at least 1".into()));
    }
    let grid: Vec<f64> = (1..=args.grid).map(|k| k as f64 / (args.grid + 1) as f64).collect();
    let threads = worker_threads()?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        split: &'a str,
        thresholds: usize,
        threads: usize,
    }
    print_config(&Resolved {
        model: &params.config,
        split: &args.split,
        thresholds: grid.len(),
        threads,
    });

    let videos = score_parallel(&params, &clips, threads)?;
    let report = evaluate(&videos, &grid)?;
    if let Some(out) = &args.out {
        fs::write(out, report.to_json()).map_err(io_err(out))?;
    }
    println!("AP={:.4} mTTA={:.3}s", report.ap, report.mtta);
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let params = load_weights(&args.checkpoint)?;
    let clip = read_features(&args.features)?;
    check_dims(std::slice::from_ref(&clip), &params)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        stream: bool,
        frames: usize,
    }
    print_config(&Resolved {
        model: &params.config,
        stream: args.stream,
        frames: clip.frames(),
    });

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let write_err = |e: std::io::Error| Error::Input(format!("writing output: {e}"));
    let mut busy = Duration::ZERO;
    if args.stream {
        let mut session = StreamingSession::new(&params);
        for t in 0..clip.frames() {
            let start = Instant::now();
            let risk = session.push(clip.features.row(t))?;
            busy += start.elapsed();
            writeln!(out, "{} {:.6}", risk.index, risk.prob).map_err(write_err)?;
            out.flush().map_err(write_err)?;
        }
    } else {
        let start = Instant::now();
        let trace = forward(&params, &clip.features)?;
        busy = start.elapsed();
        for (t, p) in trace.probs.iter().enumerate() {
            writeln!(out, "{t} {p:.6}").map_err(write_err)?;
        }
    }
    if args.timing {
        eprintln!(
            "head latency: {:.3} ms/frame over {} frames ({}, single thread, features precomputed)",
            busy.as_secs_f64() * 1e3 / clip.frames() as f64,
            clip.frames(),
            if args.stream { "streaming" } else { "batch" }
        );
    }
    Ok(())
}

fn run_flops(args: &FlopsArgs, file: FileConfig) -> Result<()> {
    let mut model = file.model;
    apply_model(&mut model, &args.model);
    model.input_dim = args.input_dim.unwrap_or(model.input_dim);
    print_config(&model);
    let e = flop_estimate(&model, args.frames)?;
    println!("{:<12} {:>12}", "stage", "GFLOPs/frame");
    for (name, flops) in e.stages() {
        println!("{name:<12} {:>12.6}", flops / 1e9);
    }
    println!("{:<12} {:>12.3}", "total", e.total() / 1e9);
    println!("note: head only; backbone feature extraction is not counted");
    Ok(())
}

fn run_synth(args: &SynthArgs, file: FileConfig) -> Result<()> {
    let mut spec = file.synth;
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.n_clips = args.n_clips.unwrap_or(spec.n_clips);
    spec.dim = args.dim.unwrap_or(spec.dim);
    spec.frames = args.frames.unwrap_or(spec.frames);
    spec.fps = args.fps.unwrap_or(spec.fps);
    spec.drift = args.drift.unwrap_or(spec.drift);
    spec.noise = args.noise.unwrap_or(spec.noise);
    print_config(&spec);
    let manifest = write_synthetic_dataset(&spec, &args.out, args.test_fraction)?;
    println!("wrote {} clips, manifest {}", spec.n_clips, manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => run_train(a, file),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Flops(a) => run_flops(a, file),
        Command::Synth(a) => run_synth(a, file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.verbose {
        env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
