use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fringe_core::annot::parse_annotations;
use fringe_core::config::RunConfig;
use fringe_core::detect::Detection;
use fringe_core::eval::{evaluate, rank_by_loss, truths_of, EvalReport, PixelEvalReport, TABLE_HEADER};
use fringe_core::pipeline::{list_pngs, map_file_name, predict_files, write_prediction_outputs, ClassicalPredictor};
use fringe_core::predictions::{parse_predictions, FramePredictions};
use fringe_core::segmap::{build_target_map, load_map, quantize_map, RingMap};
use fringe_core::synth::{dataset_specs, render_dataset};
use fringe_core::track::{fit_rise, fits_to_csv, link, tracks_to_csv, MIN_FIT_SAMPLES};
use fringe_server::{ANNOTATIONS_FILE, DEFAULT_PORT, MAPS_DIR, PREDICTIONS_FILE};
use serde::Serialize;

const AFTER_HELP: &str = "\
Output files (all CSV files have a fixed header):
  annotations.csv  filename,cx,cy,a,b,theta,rings
  predictions.csv  filename,x_min,y_min,x_max,y_max,score,cx,cy,a,b,theta,rings
  ranking.csv      rank,frame_id,loss
  report.csv       dataset,mAP,MAE,acc0.5,acc0.7,acc1,acc1.5,acc2
  tracks.csv       track_id,frame,t,cx,cy,rings
  rise_fits.csv    track_id,n,a_max,tau,t0,rmse,converged,degenerate,poor_fit
A frame with no ellipses appears as one row with every field after the
filename empty. Ring maps are 16-bit PNGs (value = rings * scale) with a
JSON sidecar holding {scale, bin}.

Configuration: flat `section.key = value` lines, `#` comments. Flags
override the file, the file overrides defaults.

Exit status: 0 success, 1 usage error, 2 data error.";

#[derive(Parser, Debug)]
#[command(name = "fringe", version, about = "ESPI fringe-image analysis toolkit", after_help = AFTER_HELP)]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Minimum detection score kept by the detector.
    #[arg(long, global = true)]
    score_thresh: Option<f64>,
    /// IoU needed for a prediction to match a truth box.
    #[arg(long, global = true)]
    iou_thresh: Option<f64>,
    /// Ring-map quantization bin width.
    #[arg(long, global = true)]
    bin: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataDir {
    /// Data directory; defaults to $FRINGE_DATA_DIR, then the config's paths.data_dir.
    #[arg(env = "FRINGE_DATA_DIR")]
    dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset: PNG frames, annotations.csv, manifest.json.
    Synth {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Output directory; defaults to the data directory.
        #[arg(long, env = "FRINGE_DATA_DIR")]
        out: Option<PathBuf>,
    },
    /// Detect antinodes and count rings in every PNG of a directory.
    Predict {
        #[command(flatten)]
        images: DataDir,
        /// Predictions CSV; ring maps go to `maps/` beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against truth; writes JSON and a table CSV.
    Eval {
        pred_csv: PathBuf,
        truth_csv: PathBuf,
        /// JSON report path; the table CSV is written beside it with a
        /// `.csv` extension. Without it the JSON goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Order frames by decreasing loss.
    Rank {
        pred_csv: PathBuf,
        truth_csv: PathBuf,
        /// Ranking CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Link detections through time and fit rise curves. Frames are taken
    /// in the order they first appear in the CSV.
    Track {
        pred_csv: PathBuf,
        /// Directory receiving tracks.csv and rise_fits.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Serve the curation API over a data directory.
    Serve {
        #[command(flatten)]
        data: DataDir,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Directory of editor assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = cli.score_thresh {
        cfg.detector.score_thresh = v;
    }
    if let Some(v) = cli.iou_thresh {
        cfg.eval.iou_thresh = v;
    }
    if let Some(v) = cli.bin {
        cfg.eval.bin = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(arg: &DataDir, cfg: &RunConfig) -> Result<PathBuf> {
    arg.dir
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| anyhow!("no data directory: pass one, set FRINGE_DATA_DIR or paths.data_dir"))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cfg: &RunConfig, count: usize, out: PathBuf) -> Result<()> {
    let specs = dataset_specs(&cfg.synth, cfg.seed, count);
    let manifest = render_dataset(&specs, &out)?;
    eprintln!("wrote {} frames to {}", manifest.files.len(), out.display());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, dir: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| dir.join(PREDICTIONS_FILE));
    let maps_dir = out.parent().unwrap_or(Path::new(".")).join(MAPS_DIR);
    let names = list_pngs(&dir)?;
    let predictor = ClassicalPredictor::new(cfg.detector.clone(), cfg.rings.clone());
    let results = predict_files(&dir, &names, &predictor, &|| {});
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    for f in &failed {
        eprintln!("error: {f}");
    }
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_prediction_outputs(&results, &out, &maps_dir, cfg.eval.bin)?;
    eprintln!("predicted {} of {} frames into {}", names.len() - failed.len(), names.len(), out.display());
    if !failed.is_empty() {
        bail!("{} frame(s) could not be read", failed.len());
    }
    Ok(())
}

/// Predictions keyed by frame, checked to cover exactly the truth frames.
fn aligned_predictions(
    pred_csv: &Path,
    truth_csv: &Path,
) -> Result<(Vec<fringe_core::FrameRecord>, HashMap<String, Vec<Detection>>)> {
    let truth = parse_annotations(&read(truth_csv)?).with_context(|| truth_csv.display().to_string())?;
    let preds: Vec<FramePredictions> =
        parse_predictions(&read(pred_csv)?).with_context(|| pred_csv.display().to_string())?;
    let truth_ids: HashSet<&str> = truth.iter().map(|f| f.frame_id.as_str()).collect();
    let pred_ids: HashSet<&str> = preds.iter().map(|f| f.frame_id.as_str()).collect();
    let mut missing: Vec<&str> = truth_ids.difference(&pred_ids).copied().collect();
    let mut extra: Vec<&str> = pred_ids.difference(&truth_ids).copied().collect();
    missing.sort_unstable();
    extra.sort_unstable();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("prediction and truth frames differ");
        if !missing.is_empty() {
            msg += &format!("; missing predictions for: {}", missing.join(", "));
        }
        if !extra.is_empty() {
            msg += &format!("; no truth for: {}", extra.join(", "));
        }
        bail!(msg);
    }
    let map = preds.into_iter().map(|f| (f.frame_id, f.detections)).collect();
    Ok((truth, map))
}

#[derive(Serialize)]
struct FullReport {
    region: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel: Option<PixelEvalReport>,
}

/// Pixel metrics of the quantized ring maps beside the predictions CSV,
/// when every frame has one.
fn pixel_report(pred_csv: &Path, truth: &[fringe_core::FrameRecord]) -> Result<Option<PixelEvalReport>> {
    let maps_dir = pred_csv.parent().unwrap_or(Path::new(".")).join(MAPS_DIR);
    let paths: Vec<PathBuf> = truth.iter().map(|f| maps_dir.join(map_file_name(&f.frame_id))).collect();
    if truth.is_empty() || !paths.iter().all(|p| p.is_file()) {
        return Ok(None);
    }
    let mut pairs: Vec<(RingMap, RingMap)> = Vec::with_capacity(truth.len());
    for (f, p) in truth.iter().zip(&paths) {
        let (raw, meta) = load_map(p)?;
        let pred = quantize_map(&raw, meta.bin)?.map;
        let target = build_target_map(f, pred.height(), pred.width());
        pairs.push((pred, target));
    }
    let refs: Vec<(&RingMap, &RingMap)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    Ok(Some(PixelEvalReport::pooled(&refs)?))
}

fn cmd_eval(cfg: &RunConfig, pred_csv: &Path, truth_csv: &Path, out: Option<PathBuf>) -> Result<()> {
    let (truth, preds) = aligned_predictions(pred_csv, truth_csv)?;
    let frames: Vec<_> = truth
        .iter()
        .map(|f| (preds[&f.frame_id].clone(), truths_of(f)))
        .collect();
    let report = FullReport {
        region: evaluate(&frames, cfg.eval.iou_thresh),
        pixel: pixel_report(pred_csv, &truth)?,
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let mut table = format!("{TABLE_HEADER}\n{}\n", report.region.table_row("region"));
    if let Some(p) = &report.pixel {
        table += &p.table_row("pixel");
        table.push('\n');
    }
    match out {
        Some(path) => {
            write(&path, &json)?;
            write(&path.with_extension("csv"), &table)?;
        }
        None => {
            print!("{json}");
            eprint!("{table}");
        }
    }
    Ok(())
}

fn cmd_rank(cfg: &RunConfig, pred_csv: &Path, truth_csv: &Path, out: Option<PathBuf>) -> Result<()> {
    let (truth, preds) = aligned_predictions(pred_csv, truth_csv)?;
    let csv = rank_by_loss(&truth, &preds, &cfg.eval.loss).to_csv();
    match out {
        Some(path) => write(&path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_track(cfg: &RunConfig, pred_csv: &Path, out: &Path) -> Result<()> {
    let frames: Vec<Vec<Detection>> = parse_predictions(&read(pred_csv)?)
        .with_context(|| pred_csv.display().to_string())?
        .into_iter()
        .map(|f| f.detections)
        .collect();
    let tracks = link(&frames, &cfg.track);
    let longest = tracks.iter().map(|t| t.samples.len()).max().unwrap_or(0);
    if longest < MIN_FIT_SAMPLES {
        bail!(fringe_core::Error::TooFewSamples {
            need: MIN_FIT_SAMPLES,
            got: longest
        });
    }
    let mut fits = Vec::new();
    for t in tracks.iter().filter(|t| t.samples.len() >= MIN_FIT_SAMPLES) {
        fits.push((t.track_id, t.samples.len(), fit_rise(t)?));
    }
    write(&out.join("tracks.csv"), &tracks_to_csv(&tracks))?;
    write(&out.join("rise_fits.csv"), &fits_to_csv(&fits))?;
    eprintln!("{} tracks, {} fitted", tracks.len(), fits.len());
    Ok(())
}

fn cmd_serve(cfg: RunConfig, dir: PathBuf, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    if !dir.join(ANNOTATIONS_FILE).is_file() {
        bail!("{} has no {ANNOTATIONS_FILE}", dir.display());
    }
    let predictor = Arc::new(ClassicalPredictor::new(cfg.detector.clone(), cfg.rings.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(fringe_server::serve(dir, port, cfg, predictor, static_dir))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { count, out } => {
            let out = data_dir(&DataDir { dir: out }, &cfg)?;
            cmd_synth(&cfg, count, out)
        }
        Command::Predict { images, out } => {
            let dir = data_dir(&images, &cfg)?;
            cmd_predict(&cfg, dir, out)
        }
        Command::Eval { pred_csv, truth_csv, out } => cmd_eval(&cfg, &pred_csv, &truth_csv, out),
        Command::Rank { pred_csv, truth_csv, out } => cmd_rank(&cfg, &pred_csv, &truth_csv, out),
        Command::Track { pred_csv, out } => cmd_track(&cfg, &pred_csv, &out),
        Command::Serve { data, port, static_dir } => {
            let dir = data_dir(&data, &cfg)?;
            cmd_serve(cfg, dir, port, static_dir)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
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
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
