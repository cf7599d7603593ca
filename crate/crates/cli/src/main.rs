use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stmoe_core::cli::{
    cmd_aggregate, cmd_evaluate, cmd_export_attention, cmd_generate, cmd_search, cmd_train,
    init_threads_from_env, load_run_config, AggregateArgs, ConfigOverrides, EvaluateArgs,
    ExportArgs, GenerateArgs,
};
use stmoe_core::error::{Error, Result};
use stmoe_core::eval::MetricReport;
use stmoe_core::flow::Bounds;
use stmoe_core::losses::ErVariant;
use stmoe_core::model::ForwardMode;
use stmoe_core::tensor::Tensor;
use stmoe_core::train::StopReason;

#[derive(Parser)]
#[command(
    name = "stmoe",
    version,
    about = "Spatiotemporal mixture-of-experts toolkit for gridded crowd flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic city dataset with known ground-truth patterns.
    Generate(GenerateCmd),
    /// Grid a trajectory CSV into an inflow/outflow dataset.
    Aggregate(AggregateCmd),
    /// Train a mixture model from a run-config file.
    Train(TrainCmd),
    /// Score a checkpoint and emit metric/separation/matching reports.
    Evaluate(EvaluateCmd),
    /// Export per-expert attention maps from a checkpoint.
    ExportAttention(ExportCmd),
    /// Coordinate-descent hyperparameter search over a run config's menus.
    Search(SearchCmd),
}

#[derive(Args)]
struct GenerateCmd {
    /// Built-in city, `tiny8` or `ring16`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Generator config JSON (full pattern control).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Give weekend days their own demand profiles (presets only).
    #[arg(long)]
    weekend_shift: bool,
    /// Write expected intensities instead of Poisson draws.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct AggregateCmd {
    /// Trajectory CSV with `traj_id, t, lat, lon` rows.
    #[arg(long)]
    input: PathBuf,
    /// Grid rows.
    #[arg(long)]
    h: usize,
    /// Grid columns.
    #[arg(long)]
    w: usize,
    /// Bounding box `lat_min,lat_max,lon_min,lon_max`; unit square when omitted.
    #[arg(long, value_parser = parse_bounds)]
    bounds: Option<Bounds>,
    /// Minutes per interval index.
    #[arg(long, default_value_t = 30)]
    interval_minutes: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    /// Run-config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the responsibility-loss form.
    #[arg(long, value_enum)]
    er_variant: Option<ErFlag>,
    /// Keep only the n largest responsibilities per sample (log-mixture).
    #[arg(long)]
    ntop: Option<usize>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to score against.
    #[arg(long)]
    data: PathBuf,
    /// Report directory; metrics are only printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace gate-driven attention with expert self-attention.
    #[arg(long, conflicts_with = "ablate_gt")]
    ablate_gs: bool,
    /// Pin the temporal gate to 1 everywhere.
    #[arg(long)]
    ablate_gt: bool,
    /// Smallest denormalized magnitude a sample needs to be scored by MAPE.
    #[arg(long, default_value_t = 1.0)]
    mape_floor: f64,
    /// Divide MAPE errors by the ground truth instead of the prediction.
    #[arg(long)]
    mape_truth_denominator: bool,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// First anchor interval (inclusive); earliest valid when omitted.
    #[arg(long)]
    t_start: Option<usize>,
    /// Last anchor interval (inclusive); latest valid when omitted.
    #[arg(long)]
    t_end: Option<usize>,
    /// Also write a per-interval attention series for this `row,col` cell.
    #[arg(long, value_parser = parse_coord)]
    coord: Option<(usize, usize)>,
    #[arg(long, conflicts_with = "ablate_gt")]
    ablate_gs: bool,
    #[arg(long)]
    ablate_gt: bool,
    /// Render the attention maps as PNG heatmaps too.
    #[arg(long)]
    render: bool,
}

#[derive(Args)]
struct SearchCmd {
    /// Run-config JSON; the `search` section lists the candidate menus.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed (search seeds default to seed..seed+2).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ErFlag {
    /// Responsibility-weighted squared error, summed over experts.
    General,
    /// Negative log-likelihood of the attention mixture.
    Logmix,
}

impl From<ErFlag> for ErVariant {
    fn from(f: ErFlag) -> ErVariant {
        match f {
            ErFlag::General => ErVariant::General,
            ErFlag::Logmix => ErVariant::LogMixture,
        }
    }
}

fn parse_coord(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `row,col`, got `{s}`"));
    }
    let row = parts[0].trim().parse().map_err(|e| format!("bad row: {e}"))?;
    let col = parts[1].trim().parse().map_err(|e| format!("bad col: {e}"))?;
    Ok((row, col))
}

fn parse_bounds(s: &str) -> std::result::Result<Bounds, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad bound `{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != 4 {
        return Err(format!("expected `lat_min,lat_max,lon_min,lon_max`, got `{s}`"));
    }
    Ok(Bounds { lat_min: vals[0], lat_max: vals[1], lon_min: vals[2], lon_max: vals[3] })
}

/// `say!` that treats a closed stdout (e.g. piping into `head`) as a
/// request to stop quietly instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    init_threads_from_env()?;
    match command {
        Command::Generate(c) => {
            let out = cmd_generate(&GenerateArgs {
                preset: c.preset,
                config: c.config,
                seed: c.seed,
                out: c.out,
                weekend_shift: c.weekend_shift,
                deterministic: c.deterministic,
            })?;
            say!(
                "wrote {} intervals, {} patterns to {}",
                out.intervals,
                out.patterns.len(),
                out.dir.display()
            );
            for (name, hash) in &out.hashes {
                say!("  {hash}  {name}");
            }
            Ok(0)
        }
        Command::Aggregate(c) => {
            let out = cmd_aggregate(&AggregateArgs {
                input: c.input,
                h: c.h,
                w: c.w,
                bounds: c.bounds,
                interval_minutes: c.interval_minutes,
                out: c.out,
            })?;
            say!(
                "wrote {} intervals to {} (total inflow {}, outflow {})",
                out.intervals,
                out.dir.display(),
                out.total_inflow,
                out.total_outflow
            );
            for (name, hash) in &out.hashes {
                say!("  {hash}  {name}");
            }
            Ok(0)
        }
        Command::Train(c) => {
            let mut cfg = load_run_config(&c.config)?;
            ConfigOverrides {
                seed: c.seed,
                out: c.out,
                er_variant: c.er_variant.map(Into::into),
                n_top: c.ntop,
            }
            .apply(&mut cfg);
            let out = cmd_train(&cfg, c.resume)?;
            say!(
                "run {}: {} epochs, best epoch {} (val mse {:.6e}), checkpoint {}",
                out.run_dir.display(),
                out.epochs_completed,
                out.best_epoch,
                out.best_val_mse,
                out.checkpoint.display()
            );
            match out.stop {
                StopReason::MaxEpochs => {
                    say!("stopped: epoch budget exhausted");
                    Ok(0)
                }
                StopReason::EarlyStop => {
                    say!("stopped: validation plateaued");
                    Ok(0)
                }
                StopReason::Diverged => {
                    eprintln!(
                        "training diverged; artifacts hold the last finite best snapshot"
                    );
                    Ok(4)
                }
            }
        }
        Command::Evaluate(c) => {
            let out = cmd_evaluate(&EvaluateArgs {
                checkpoint: c.checkpoint,
                data: c.data,
                out: c.out,
                ablate_gs: c.ablate_gs,
                ablate_gt: c.ablate_gt,
                mape_floor: c.mape_floor,
                mape_truth_denominator: c.mape_truth_denominator,
            })?;
            say!("mode: {}", mode_name(out.mode));
            print_report("val ", &out.val);
            print_report("test", &out.test);
            let worst = out
                .quade
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().skip(i + 1))
                .fold(f64::NAN, |acc, &p| if acc.is_nan() || p > acc { p } else { acc });
            if worst.is_finite() {
                say!("quade: max pairwise p = {worst:.3e}");
            }
            if let Some(m) = &out.matching {
                let matched = m.assignment.iter().flatten().count();
                say!(
                    "matching: {} experts matched, mean correlation {:.3}",
                    matched,
                    m.total_correlation / matched.max(1) as f64
                );
            }
            for f in &out.files {
                say!("  wrote {}", f.display());
            }
            Ok(0)
        }
        Command::ExportAttention(c) => {
            let render = c.render;
            let out_dir = c.out.clone();
            let out = cmd_export_attention(&ExportArgs {
                checkpoint: c.checkpoint,
                data: c.data,
                out: c.out,
                t_start: c.t_start,
                t_end: c.t_end,
                coord: c.coord,
                ablate_gs: c.ablate_gs,
                ablate_gt: c.ablate_gt,
            })?;
            say!(
                "averaged {} intervals (t {}..={}) into {} attention maps",
                out.n_samples, out.t_range.0, out.t_range.1, out.k
            );
            if let Some(m) = &out.matching {
                say!("matching: total correlation {:.3}", m.total_correlation);
            }
            for f in &out.files {
                say!("  wrote {}", f.display());
            }
            if render {
                for (i, map) in out.maps.iter().enumerate() {
                    let path = out_dir.join(format!("attention_expert_{i}.png"));
                    render_heatmap(map, &path)?;
                    say!("  wrote {}", path.display());
                }
            }
            Ok(0)
        }
        Command::Search(c) => {
            let mut cfg = load_run_config(&c.config)?;
            ConfigOverrides { seed: c.seed, out: c.out, er_variant: None, n_top: None }
                .apply(&mut cfg);
            let out = cmd_search(&cfg)?;
            say!(
                "searched {} runs; best K={} λ_er={} λ_eid={} (n_c,n_p,n_q)=({},{},{}) with mean val mse {:.6e}",
                out.runs,
                out.best.k,
                out.best.lambda_er,
                out.best.lambda_eid,
                out.best.fusion.n_c,
                out.best.fusion.n_p,
                out.best.fusion.n_q,
                out.best_mean_val_mse
            );
            for f in &out.files {
                say!("  wrote {}", f.display());
            }
            Ok(0)
        }
    }
}

fn mode_name(mode: ForwardMode) -> &'static str {
    match mode {
        ForwardMode::Full => "full",
        ForwardMode::NoGs => "no-gs",
        ForwardMode::NoGt => "no-gt",
    }
}

fn print_report(split: &str, r: &MetricReport) {
    let mape = match r.mape {
        Some(m) => format!("{:.2}%", 100.0 * m),
        None => "n/a".into(),
    };
    say!(
        "{split} mse {:.6e}  rmse {:.6e}  mae {:.6e}  mape {mape}  (n={})",
        r.mse, r.rmse, r.mae, r.n
    );
}

// ── PNG heatmaps ────────────────────────────────────────────────────────

/// Viridis control points sampled every 0.125.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [72.0, 40.0, 120.0],
    [62.0, 74.0, 137.0],
    [49.0, 104.0, 142.0],
    [38.0, 130.0, 142.0],
    [31.0, 158.0, 137.0],
    [53.0, 183.0, 121.0],
    [109.0, 205.0, 89.0],
    [180.0, 222.0, 44.0],
];

fn colorize(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(VIRIDIS.len() - 1);
    let f = x - lo as f64;
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (VIRIDIS[lo][c] + f * (VIRIDIS[hi][c] - VIRIDIS[lo][c])).round() as u8;
    }
    px
}

/// Map a (h, w) grid of values in [0, 1] to an upscaled viridis PNG.
fn render_heatmap(map: &Tensor, path: &std::path::Path) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::config(format!(
                "heatmap rendering needs a 2-d grid, got shape {other:?}"
            )))
        }
    };
    let scale = (320 / h.max(w).max(1)).clamp(1, 32) as usize;
    let mut img = image::RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for (y, x, px) in img.enumerate_pixels_mut() {
        let i = y as usize / scale;
        let j = x as usize / scale;
        *px = image::Rgb(colorize(map.data()[i * w + j]));
    }
    img.save(path)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}
