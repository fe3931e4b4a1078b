use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mbflow::io::binary::{read_flow, read_trajectories, write_checkpoint, write_flow, write_trajectories};
use mbflow::io::{load_config, read_cloud, read_sequence, write_atomic, write_scene, Config};
use mbflow::metrics::{flow_metrics, traj_metrics};
use mbflow::optim::solve_pair;
use mbflow::sweep::{parse_values, rows_to_csv, run_sweep, SweepPair, SweepParam};
use mbflow::synth::{generate, two_body_adversarial, EgoPreset, SceneSpec};
use mbflow::trajectory::{fit_trajectory_field, integrate_fields};
use mbflow::{FlowField, PointCloud, SolveConfig, SolveReport};

/// Version of the report JSON and sweep CSV layouts.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "mbflow", version, about = "Multi-body rigid neural scene flow")]
struct Cli {
    /// Upper bound on concurrent solves (further capped by MBFLOW_THREADS).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence directory.
    Synth(SynthArgs),
    /// Solve scene flow between two clouds.
    Flow(FlowArgs),
    /// Long-term trajectories over a sequence.
    Traj(TrajArgs),
    /// Score predicted flow or trajectories against ground truth.
    Eval(EvalArgs),
    /// Re-solve pairs across a list of parameter values.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, serde::Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    bodies: usize,
    #[arg(long, default_value_t = 600)]
    points_per_body: usize,
    #[arg(long, default_value_t = 800)]
    background: usize,
    #[arg(long, default_value_t = 2)]
    frames: usize,
    /// Degrees per frame.
    #[arg(long, default_value_t = 2.0)]
    rot_max: f64,
    /// Meters per frame.
    #[arg(long, default_value_t = 1.0)]
    trans_max: f64,
    #[arg(long, default_value = "none", value_parser = ["none", "forward", "turn"])]
    ego: String,
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    resample: bool,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two boxes sliding past each other instead of random bodies.
    #[arg(long)]
    adversarial: bool,
}

#[derive(Args, Debug, serde::Serialize)]
struct FlowArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Chamfer-only objective; DBSCAN is skipped.
    #[arg(long)]
    no_rigidity: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    save_net: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum TrajMode {
    Euler,
    Field,
}

#[derive(Args, Debug, serde::Serialize)]
struct TrajArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, value_enum, default_value = "euler")]
    mode: TrajMode,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    no_rigidity: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, serde::Serialize)]
struct EvalArgs {
    /// Predicted flow (.mbsf), or trajectories (.mbtj) with --traj.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Source cloud the flows are defined on; checked for length.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long)]
    traj: bool,
    #[arg(long, default_value_t = 1)]
    first: usize,
    /// Defaults to the last frame of the trajectories.
    #[arg(long)]
    last: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct SweepArgs {
    #[arg(long)]
    param: String,
    /// Comma-separated; eps-minpts entries are `eps:min_points`.
    #[arg(long)]
    values: String,
    /// Sweep over every consecutive pair of a sequence.
    #[arg(long, conflicts_with = "pair", required_unless_present = "pair")]
    seq: Option<PathBuf>,
    /// SOURCE TARGET GT_FLOW
    #[arg(long, num_args = 3, value_names = ["SOURCE", "TARGET", "GT"])]
    pair: Option<Vec<PathBuf>>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", render_error(&e));
        std::process::exit(1);
    }
}

/// Joins the cause chain, dropping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let jobs = effective_jobs(cli.jobs, std::env::var("MBFLOW_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Flow(a) => cmd_flow(&a),
        Command::Traj(a) => cmd_traj(&a, jobs),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a, jobs),
    }
}

fn effective_jobs(flag: usize, env: Option<&str>) -> Result<usize> {
    let mut jobs = flag.max(1);
    if let Some(v) = env.filter(|v| !v.trim().is_empty()) {
        let cap: usize = v
            .trim()
            .parse()
            .with_context(|| format!("MBFLOW_THREADS must be a positive integer, got `{v}`"))?;
        jobs = jobs.min(cap.max(1));
    }
    Ok(jobs)
}

fn load(config: Option<&Path>) -> Result<Config> {
    match config {
        Some(p) => Ok(load_config(p)?),
        None => Ok(Config::default()),
    }
}

fn solve_config(cfg: &Config, no_rigidity: bool, seed: Option<u64>) -> SolveConfig {
    let mut s = cfg.solve();
    if no_rigidity {
        s.omega = 0.0;
        s.enable_rigidity = false;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn emit_json(path: Option<&Path>, value: &Value) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => print_stdout(&format!("{}\n", serde_json::to_string_pretty(value)?)),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.frames < 2 {
        bail!("--frames must be at least 2 to define a flow, got {}", a.frames);
    }
    let spec = SceneSpec {
        body_count: a.bodies,
        points_per_body: a.points_per_body,
        background_points: a.background,
        frame_count: a.frames,
        rot_max_deg: a.rot_max,
        trans_max: a.trans_max,
        ego: a.ego.parse::<EgoPreset>()?,
        resample: a.resample,
        noise_sigma: a.noise,
        seed: a.seed,
        ..SceneSpec::default()
    };
    let scene = if a.adversarial {
        two_body_adversarial::<f64>(&spec)?
    } else {
        generate::<f64>(&spec)?
    };
    let manifest = write_scene(&a.out, &scene)?;
    eprintln!(
        "wrote {} frames ({} points in frame 1) to {}",
        manifest.frames.len(),
        scene.frames[0].len(),
        a.out.display()
    );
    Ok(())
}

fn summary_json(r: &SolveReport) -> Value {
    json!({
        "iterations": r.iterations,
        "best_iter": r.best_iter,
        "best_loss": r.best_loss(),
        "final_loss": r.trace.last().map(|t| t.total),
        "cluster_count": r.cluster_count,
        "cluster_seconds": r.cluster_seconds,
        "wall_seconds": r.wall_seconds,
    })
}

fn cmd_flow(a: &FlowArgs) -> Result<()> {
    let cfg = load(a.config.as_deref())?;
    let solve = solve_config(&cfg, a.no_rigidity, a.seed);
    let source: PointCloud = read_cloud(&a.source)?;
    let target: PointCloud = read_cloud(&a.target)?;
    eprintln!(
        "solving {} -> {} points (omega {}, rigidity {})",
        source.len(),
        target.len(),
        solve.omega,
        solve.enable_rigidity
    );
    let report = solve_pair(&source, &target, &solve)?;
    write_flow(&a.out, &report.flow)?;
    if let Some(p) = &a.save_net {
        write_checkpoint(p, &report.net)?;
    }
    eprintln!(
        "{} iterations, best loss {:.6} at {}, {} clusters, {:.1}s",
        report.iterations,
        report.best_loss(),
        report.best_iter,
        report.cluster_count,
        report.wall_seconds
    );
    if let Some(p) = &a.report {
        let mut summary = summary_json(&report);
        summary["trace"] = serde_json::to_value(&report.trace)?;
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": "flow",
            "flags": a,
            "config": solve,
            "points": source.len(),
            "result": summary,
        });
        write_json(p, &doc)?;
    }
    Ok(())
}

/// Solves `t → t+1` for every pair, at most `jobs` at a time.
fn solve_all(frames: &[PointCloud], cfg: &SolveConfig, jobs: usize) -> Result<Vec<SolveReport>> {
    let pairs: Vec<usize> = (0..frames.len() - 1).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(jobs.max(1)) {
        let results: Vec<mbflow::Result<SolveReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&t| s.spawn(move || solve_pair(&frames[t], &frames[t + 1], cfg)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            let t = chunk[k];
            out.push(r.with_context(|| format!("pair {} -> {}", t + 1, t + 2))?);
            eprintln!("pair {} -> {} solved", t + 1, t + 2);
        }
    }
    Ok(out)
}

fn cmd_traj(a: &TrajArgs, jobs: usize) -> Result<()> {
    let cfg = load(a.config.as_deref())?;
    let solve = solve_config(&cfg, a.no_rigidity, a.seed);
    let seq = read_sequence::<f64>(&a.seq)?;
    if seq.frames.len() < 2 {
        bail!("{}: need at least 2 frames, found {}", a.seq.display(), seq.frames.len());
    }
    let start = Instant::now();
    let (trajs, detail) = match a.mode {
        TrajMode::Euler => {
            let reports = solve_all(&seq.frames, &solve, jobs)?;
            let trajs = integrate_fields(&seq.frames[0], reports.len(), |t, x| reports[t].net.evaluate_flow(x))?;
            let pairs: Vec<Value> = reports.iter().map(summary_json).collect();
            (trajs, json!({ "pairs": pairs }))
        }
        TrajMode::Field => {
            let report = fit_trajectory_field(&seq.frames, &solve, &cfg.trajectory)?;
            let last = seq.frames.len() as f64;
            let residual = report.field.round_trip_residual(&seq.frames[0], 1.0, last)?;
            eprintln!(
                "field fit: final cycle {:.6}, round trip 1 -> {last} -> 1 residual {residual:.6}",
                report.final_cycle
            );
            let trajs = report.field.trajectories(&seq.frames[0], 1)?;
            let detail = json!({
                "iterations": report.trace.len(),
                "final_cycle": report.final_cycle,
                "round_trip_residual": residual,
                "wall_seconds": report.wall_seconds,
            });
            (trajs, detail)
        }
    };
    write_trajectories(&a.out, &trajs)?;
    let metrics = match &seq.gt_trajectories {
        Some(gt) => Some(traj_metrics(&trajs, gt, 1, seq.frames.len())?),
        None => None,
    };
    if let Some(m) = &metrics {
        eprintln!(
            "frames 1 -> {}: acc_05 {:.2}% acc_10 {:.2}% mean error {:.4} m",
            m.last, m.acc_05, m.acc_10, m.mean_error
        );
    }
    if let Some(p) = &a.report {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": "traj",
            "flags": a,
            "config": solve,
            "trajectory_config": cfg.trajectory,
            "frames": seq.frames.len(),
            "points": seq.frames[0].len(),
            "wall_seconds": start.elapsed().as_secs_f64(),
            "detail": detail,
            "metrics": metrics,
        });
        write_json(p, &doc)?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let doc = if a.traj {
        let pred = read_trajectories::<f64>(&a.pred)?;
        let gt = read_trajectories::<f64>(&a.gt)?;
        if let Some(p) = &a.points {
            let cloud: PointCloud = read_cloud(p)?;
            if cloud.len() != pred.len() {
                bail!("{} has {} points but {} trajectories", p.display(), cloud.len(), pred.len());
            }
        }
        let last = match a.last {
            Some(l) => l,
            None => pred.first().map_or(0, |t| t.frame_count()),
        };
        let m = traj_metrics(&pred, &gt, a.first, last)?;
        json!({ "schema_version": SCHEMA_VERSION, "kind": "trajectory", "flags": a, "metrics": m })
    } else {
        let pred: FlowField = read_flow(&a.pred)?;
        let gt: FlowField = read_flow(&a.gt)?;
        if let Some(p) = &a.points {
            let cloud: PointCloud = read_cloud(p)?;
            pred.check_len(cloud.len()).with_context(|| format!("{} vs {}", a.pred.display(), p.display()))?;
        }
        let m = flow_metrics(&pred, &gt)?;
        json!({ "schema_version": SCHEMA_VERSION, "kind": "flow", "flags": a, "metrics": m })
    };
    emit_json(a.out.as_deref(), &doc)
}

fn sweep_pairs(a: &SweepArgs) -> Result<Vec<SweepPair<f64>>> {
    if let Some(files) = &a.pair {
        let source: PointCloud = read_cloud(&files[0])?;
        let target: PointCloud = read_cloud(&files[1])?;
        let gt: FlowField = read_flow(&files[2])?;
        gt.check_len(source.len())
            .with_context(|| format!("{} vs {}", files[2].display(), files[0].display()))?;
        return Ok(vec![SweepPair { source, target, gt }]);
    }
    let dir = a.seq.as_ref().expect("clap requires --seq or --pair");
    let seq = read_sequence::<f64>(dir)?;
    let Some(flows) = seq.gt_flows else {
        bail!("{}: sweeping needs ground-truth flows in the manifest", dir.display());
    };
    Ok(flows
        .into_iter()
        .enumerate()
        .map(|(t, gt)| SweepPair {
            source: seq.frames[t].clone(),
            target: seq.frames[t + 1].clone(),
            gt,
        })
        .collect())
}

fn cmd_sweep(a: &SweepArgs, jobs: usize) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let values = parse_values(param, &a.values)?;
    let cfg = load(a.config.as_deref())?;
    let pairs = sweep_pairs(a)?;
    eprintln!(
        "sweeping {} over {} values on {} pair(s), {jobs} job(s)",
        param.name(),
        values.len(),
        pairs.len()
    );
    let rows = run_sweep(&pairs, &cfg.solve(), param, &values, jobs)?;
    let csv = rows_to_csv(&rows);
    match &a.out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print_stdout(&csv)?,
    }
    Ok(())
}
