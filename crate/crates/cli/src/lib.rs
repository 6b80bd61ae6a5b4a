//! Subcommand implementations for the `semfield` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use semfield_core::config::{ConfigError, Precision, RunConfig};
use semfield_core::diff::{Scalar, CHECKPOINT_VERSION};
use semfield_core::experiments::{self, ExperimentError, RunRecord, Variant};
use semfield_core::field::{EncoderKind, ModelField, SemanticFieldModel};
use semfield_core::grid::{self, GridError, S4CG_VERSION};
use semfield_core::image::{encode_pgm16, encode_pgm8, encode_ppm, write_file};
use semfield_core::render::{self, ColorSource};
use semfield_core::scene::{build_sequence, CameraId, SceneDescription, Sequence};
use semfield_core::train::{gradient_suite, load_model, FitOptions, TrainError};

pub const THREADS_ENV: &str = "SEMFIELD_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Experiment(_) => "experiment",
            CliError::Train(_) => "train",
            CliError::Grid(_) => "grid",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Usage(_) => "usage",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

#[derive(Parser, Debug)]
#[command(name = "semfield", about = "Fit semantic fields to posed images and evaluate scene completion", disable_version_flag = true)]
pub struct Cli {
    /// Print the program and file format versions.
    #[arg(short = 'V', long = "version")]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key by dotted path, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.overrides {
            cfg.set(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a scene: frames, ground-truth grids and scene description.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a field, checkpoint it and evaluate it.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training variant (full, semantic_only, photometric_only, fixed_offset,
        /// front_only_labels, input_only_labels).
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Render depth, segmentation and colour from a checkpoint.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Timestep offsets after the input frame.
        #[arg(long = "offset", default_values_t = [0usize])]
        offsets: Vec<usize>,
        #[arg(long, default_value = "front_left")]
        camera: String,
    },
    /// Discretise a checkpoint into a voxel grid.
    Voxelize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted grid with ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check end-to-end gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "per_image")]
        encoder: String,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge `run.json` files into markdown and CSV tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

pub fn version_string() -> String {
    format!("semfield {} (S4CG v{S4CG_VERSION}, S4CP v{CHECKPOINT_VERSION})", env!("CARGO_PKG_VERSION"))
}

pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.strip_prefix(root).is_ok_and(|r| r != Path::new("manifest.json")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Writes `manifest.json` listing every other file under `dir` with its hash.
pub fn write_manifest(dir: &Path) -> Result<PathBuf, CliError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut entries: Vec<ManifestEntry> = files
        .iter()
        .map(|p| {
            let data = fs::read(p)?;
            Ok(ManifestEntry {
                path: p.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/"),
                bytes: data.len() as u64,
                sha256: hex(&Sha256::digest(&data)),
            })
        })
        .collect::<Result<_, std::io::Error>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&serde_json::json!({ "files": entries }))? + "\n")?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn depth_mm(depth: &[f32]) -> Vec<u16> {
    depth.iter().map(|&d| (d as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16).collect()
}

fn sequence(cfg: &RunConfig) -> Result<Sequence, CliError> {
    build_sequence(&cfg.dataset()).map_err(|e| CliError::Experiment(e.into()))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let seq = sequence(cfg)?;
    for f in &seq.frames {
        let stem = out.join("frames").join(format!("t{:03}_{}", f.timestep, f.camera_id.name()));
        let (w, h) = (f.width(), f.height());
        write_file(&stem.with_extension("ppm"), &encode_ppm(&f.image))?;
        write_file(&PathBuf::from(format!("{}_seg.pgm", stem.display())), &encode_pgm8(w, h, &f.seg))?;
        write_file(&PathBuf::from(format!("{}_gt_seg.pgm", stem.display())), &encode_pgm8(w, h, &f.gt_seg))?;
        write_file(&PathBuf::from(format!("{}_depth.pgm", stem.display())), &encode_pgm16(w, h, &depth_mm(&f.gt_depth)))?;
    }
    grid::write_grid(&out.join("world.s4cg"), &grid::VoxelGrid::from_world(&seq.world))?;
    let setup = experiments::eval_setup(&seq, cfg)?;
    grid::write_grid(&out.join("gt.s4cg"), &setup.gt)?;
    write_json(&out.join("scene.json"), &SceneDescription::of(&seq))?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    write_manifest(out)?;
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig, out: &Path, variant: &str, resume: Option<PathBuf>, stop_after: Option<u64>) -> Result<RunRecord, CliError> {
    let v = Variant::parse(variant).ok_or_else(|| CliError::Usage(format!("unknown variant {variant:?}")))?;
    let cfg = v.apply(cfg);
    fs::create_dir_all(out)?;
    let seq = sequence(&cfg)?;
    let opts = FitOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        stop_after,
    };
    let rec = experiments::fit_and_evaluate(&cfg, &seq, v.name(), &opts)?;
    write_json(&out.join("run.json"), &rec)?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    write_manifest(out)?;
    Ok(rec)
}

fn render_typed<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: &Path, offsets: &[usize], camera: CameraId) -> Result<(), CliError> {
    let seq = sequence(cfg)?;
    let model: SemanticFieldModel<T> = load_model(&cfg.field_config(), checkpoint)?;
    let t0 = cfg.eval.input_timestep;
    let input = seq.frame(t0, CameraId::FrontLeft);
    let field = ModelField::new(&model, &input.image, input.camera).map_err(|e| CliError::Experiment(e.into()))?;
    let mut scores = Vec::new();
    for &o in offsets {
        let t = t0 + o;
        if t >= seq.len() {
            return Err(CliError::Usage(format!("offset {o} is beyond the sequence ({} steps)", seq.len())));
        }
        let target = seq.frame(t, camera);
        let sources = [ColorSource {
            image: &input.image,
            camera: input.camera,
        }];
        let view = render::render_view(&field, &target.camera, &cfg.render, &sources).map_err(|e| CliError::Experiment(e.into()))?;
        let stem = out.join(format!("t{t:03}_{}", camera.name()));
        let (w, h) = (view.width, view.height);
        let depth: Vec<f32> = view.depth.iter().map(|&d| d as f32).collect();
        write_file(&PathBuf::from(format!("{}_depth.pgm", stem.display())), &encode_pgm16(w, h, &depth_mm(&depth)))?;
        write_file(&PathBuf::from(format!("{}_seg.pgm", stem.display())), &encode_pgm8(w, h, &view.segmentation))?;
        if let Some(c) = &view.color {
            write_file(&stem.with_extension("ppm"), &encode_ppm(c))?;
        }
        scores.push(serde_json::json!({
            "offset": o,
            "timestep": t,
            "camera": camera.name(),
            "accuracy": semfield_core::scene::label_accuracy(&view.segmentation, &target.gt_seg),
            "pseudo_accuracy": semfield_core::scene::label_accuracy(&target.seg, &target.gt_seg),
        }));
    }
    write_json(&out.join("render.json"), &scores)?;
    Ok(())
}

pub fn cmd_render(cfg: &RunConfig, checkpoint: &Path, out: &Path, offsets: &[usize], camera: &str) -> Result<(), CliError> {
    let cam = CameraId::parse(camera).ok_or_else(|| CliError::Usage(format!("unknown camera {camera:?}")))?;
    fs::create_dir_all(out)?;
    match cfg.mode {
        Precision::Float32 => render_typed::<f32>(cfg, checkpoint, out, offsets, cam)?,
        Precision::Float64 => render_typed::<f64>(cfg, checkpoint, out, offsets, cam)?,
    }
    write_manifest(out)?;
    Ok(())
}

fn voxelize_typed<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<grid::VoxelGrid, CliError> {
    let seq = sequence(cfg)?;
    let model: SemanticFieldModel<T> = load_model(&cfg.field_config(), checkpoint)?;
    let setup = experiments::eval_setup(&seq, cfg)?;
    Ok(experiments::predict_grid(&model, &seq, cfg, &setup)?)
}

pub fn cmd_voxelize(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let g = match cfg.mode {
        Precision::Float32 => voxelize_typed::<f32>(cfg, checkpoint)?,
        Precision::Float64 => voxelize_typed::<f64>(cfg, checkpoint)?,
    };
    grid::write_grid(&out.join("pred.s4cg"), &g)?;
    let mut ply = Vec::new();
    grid::write_ply(&mut ply, &g)?;
    fs::write(out.join("pred.ply"), ply)?;
    write_manifest(out)?;
    Ok(())
}

/// Plain-text table: one row per range with occupancy metrics, mIoU and
/// per-class IoU.
pub fn format_report(report: &grid::EvalReport, class_names: &[String]) -> String {
    let mut s = format!("{:>8} {:>7} {:>7} {:>7} {:>7}", "range", "IoU", "Prec", "Rec", "mIoU");
    for n in class_names.iter().skip(1) {
        s.push_str(&format!(" {:>10}", n));
    }
    s.push('\n');
    for r in &report.ranges {
        s.push_str(&format!(
            "{:>7.1}m {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.range.extent[0],
            100.0 * r.iou,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.miou
        ));
        for v in r.class_iou.iter().skip(1) {
            s.push_str(&v.map_or(format!(" {:>10}", "-"), |v| format!(" {:>10.2}", 100.0 * v)));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<String, CliError> {
    let p = grid::read_grid(pred)?;
    let g = grid::read_grid(gt)?;
    let report = grid::evaluate(&p, &g, &cfg.eval.ranges_for(&g.spec))?;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    grid::write_report_csv(&mut csv, &report)?;
    fs::write(out.join("eval.csv"), csv)?;
    write_json(&out.join("eval.json"), &report)?;
    write_manifest(out)?;
    let names: Vec<String> = semfield_core::scene::class_table(g.num_classes)
        .map(|t| t.into_iter().map(|c| c.name.to_string()).collect())
        .unwrap_or_else(|_| (0..g.num_classes).map(|k| format!("class_{k}")).collect());
    Ok(format_report(&report, &names))
}

pub fn cmd_gradcheck(cfg: &RunConfig, encoder: &str, tol: f64, seed: u64) -> Result<String, CliError> {
    let enc = match encoder {
        "per_image" => EncoderKind::PerImage,
        "conv" => EncoderKind::Conv,
        other => return Err(CliError::Usage(format!("unknown encoder {other:?}"))),
    };
    let seq = sequence(cfg)?;
    let entries = gradient_suite(&seq, enc, seed, tol)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for e in &entries {
        let worst = e.report.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        text.push_str(&format!("{:<12} max rel err {:.3e}  {}\n", e.term, worst, if e.report.passed { "pass" } else { "FAIL" }));
        if !e.report.passed {
            failed.push(e.term.clone());
        }
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    let mut records = Vec::new();
    for p in runs {
        let rec: RunRecord = serde_json::from_str(&fs::read_to_string(p)?)?;
        records.push(rec);
    }
    fs::create_dir_all(out)?;
    let md = experiments::report_markdown(&records);
    fs::write(out.join("report.md"), &md)?;
    fs::write(out.join("report.csv"), experiments::report_csv(&records))?;
    write_manifest(out)?;
    Ok(md)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.version {
        println!("{}", version_string());
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    configure_threads()?;
    match cmd {
        Command::Gen { cfg, out } => cmd_gen(&cfg.load()?, &out),
        Command::Fit {
            cfg,
            out,
            variant,
            resume,
            stop_after,
        } => {
            let rec = cmd_fit(&cfg.load()?, &out, &variant, resume, stop_after)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
            Ok(())
        }
        Command::Render {
            cfg,
            checkpoint,
            out,
            offsets,
            camera,
        } => cmd_render(&cfg.load()?, &checkpoint, &out, &offsets, &camera),
        Command::Voxelize { cfg, checkpoint, out } => cmd_voxelize(&cfg.load()?, &checkpoint, &out),
        Command::Eval { cfg, pred, gt, out } => {
            print!("{}", cmd_eval(&cfg.load()?, &pred, &gt, &out)?);
            Ok(())
        }
        Command::Gradcheck { cfg, encoder, tol, seed } => {
            print!("{}", cmd_gradcheck(&cfg.load()?, &encoder, tol, seed)?);
            Ok(())
        }
        Command::Report { out, runs } => {
            print!("{}", cmd_report(&runs, &out)?);
            Ok(())
        }
    }
}
