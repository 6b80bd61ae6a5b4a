//! Fit-and-evaluate runs, the ablation and label-quality suites, and their
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::config::{Precision, RunConfig};
use crate::diff::Scalar;
use crate::field::{FieldError, ModelField, SemanticFieldModel};
use crate::grid::{self, EvalRange, GridError, GridSpec, RangeMetrics, VoxelGrid};
use crate::render::{self, RenderError};
use crate::scene::{self, build_sequence, CameraId, SceneError, Sequence};
use crate::train::{fit, FitOptions, LabelViews, LossBreakdown, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    Config(String),
}

/// Evaluation grid, ground truth and camera for the configured input frame.
pub struct EvalSetup {
    pub camera: Camera,
    pub spec: GridSpec,
    pub gt: VoxelGrid,
    pub ranges: Vec<EvalRange>,
}

pub fn eval_setup(seq: &Sequence, cfg: &RunConfig) -> Result<EvalSetup, ExperimentError> {
    let t = cfg.eval.input_timestep;
    if t >= seq.len() {
        return Err(ExperimentError::Config(format!("eval.input_timestep {t} beyond sequence of {}", seq.len())));
    }
    let camera = seq.camera(t, CameraId::FrontLeft);
    let spec = GridSpec::in_front_of(&seq.world, &camera, cfg.eval.forward, cfg.eval.half_width)?;
    let mut gt = VoxelGrid::crop_world(&seq.world, spec);
    gt.mask_frustum(&camera, cfg.voxelize.max_depth);
    let gt = grid::refine_invalids(&gt, cfg.eval.street_z);
    let ranges = cfg.eval.ranges_for(&spec);
    Ok(EvalSetup { camera, spec, gt, ranges })
}

pub fn predict_grid<T: Scalar>(model: &SemanticFieldModel<T>, seq: &Sequence, cfg: &RunConfig, setup: &EvalSetup) -> Result<VoxelGrid, ExperimentError> {
    let input = seq.frame(cfg.eval.input_timestep, CameraId::FrontLeft);
    let field = ModelField::new(model, &input.image, input.camera)?;
    Ok(grid::voxelize_field(&field, &setup.camera, setup.spec, &cfg.voxelize)?)
}

/// Segmentation rendered at a front-left pose `offset` steps after the input
/// frame, scored against clean labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub offset: usize,
    pub accuracy: f64,
    /// Accuracy of the pseudo-labels of that frame.
    pub pseudo_accuracy: f64,
}

pub fn segmentation_score<T: Scalar>(model: &SemanticFieldModel<T>, seq: &Sequence, cfg: &RunConfig, offset: usize) -> Result<SegScore, ExperimentError> {
    let t0 = cfg.eval.input_timestep;
    let t = t0 + offset;
    if t >= seq.len() {
        return Err(ExperimentError::Config(format!("offset {offset} beyond sequence of {}", seq.len())));
    }
    let input = seq.frame(t0, CameraId::FrontLeft);
    let target = seq.frame(t, CameraId::FrontLeft);
    let field = ModelField::new(model, &input.image, input.camera)?;
    let view = render::render_view(&field, &target.camera, &cfg.render, &[])?;
    Ok(SegScore {
        offset,
        accuracy: scene::label_accuracy(&view.segmentation, &target.gt_seg),
        pseudo_accuracy: scene::label_accuracy(&target.seg, &target.gt_seg),
    })
}

/// Everything a fitted run is judged by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub ranges: Vec<RangeMetrics>,
    pub seg: Vec<SegScore>,
    pub final_loss: Option<LossBreakdown>,
}

impl RunRecord {
    pub fn iou(&self) -> Vec<f64> {
        self.ranges.iter().map(|r| r.iou).collect()
    }
}

pub fn evaluate_model<T: Scalar>(model: &SemanticFieldModel<T>, seq: &Sequence, cfg: &RunConfig) -> Result<(VoxelGrid, Vec<RangeMetrics>, Vec<SegScore>), ExperimentError> {
    let setup = eval_setup(seq, cfg)?;
    let pred = predict_grid(model, seq, cfg, &setup)?;
    let report = grid::evaluate(&pred, &setup.gt, &setup.ranges)?;
    let seg = cfg
        .eval
        .seg_offsets
        .iter()
        .map(|&o| segmentation_score(model, seq, cfg, o))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pred, report.ranges, seg))
}

fn fit_eval_typed<T: Scalar>(cfg: &RunConfig, seq: &Sequence, variant: &str, opts: &FitOptions) -> Result<RunRecord, ExperimentError> {
    let res = fit::<T>(std::slice::from_ref(seq), &cfg.field_config(), &cfg.train, &cfg.render, &cfg.loss, opts)?;
    let (_, ranges, seg) = evaluate_model(&res.model, seq, cfg)?;
    Ok(RunRecord {
        variant: variant.to_string(),
        seed: cfg.train.seed,
        ranges,
        seg,
        final_loss: res.losses.last().copied(),
    })
}

/// Fits a field on `seq` with `cfg` and evaluates it.
pub fn fit_and_evaluate(cfg: &RunConfig, seq: &Sequence, variant: &str, opts: &FitOptions) -> Result<RunRecord, ExperimentError> {
    match cfg.mode {
        Precision::Float32 => fit_eval_typed::<f32>(cfg, seq, variant, opts),
        Precision::Float64 => fit_eval_typed::<f64>(cfg, seq, variant, opts),
    }
}

/// Training configurations compared by the suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SemanticOnly,
    PhotometricOnly,
    FixedOffset,
    FrontOnlyLabels,
    InputOnlyLabels,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::Full, Variant::SemanticOnly, Variant::PhotometricOnly, Variant::FixedOffset];
    pub const LABELS: [Variant; 3] = [Variant::Full, Variant::FrontOnlyLabels, Variant::InputOnlyLabels];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SemanticOnly => "semantic_only",
            Variant::PhotometricOnly => "photometric_only",
            Variant::FixedOffset => "fixed_offset",
            Variant::FrontOnlyLabels => "front_only_labels",
            Variant::InputOnlyLabels => "input_only_labels",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Variant::Full,
            Variant::SemanticOnly,
            Variant::PhotometricOnly,
            Variant::FixedOffset,
            Variant::FrontOnlyLabels,
            Variant::InputOnlyLabels,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }

    /// `base` with only this variant's switch changed.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::SemanticOnly => {
                c.train.use_photometric = false;
                c.loss.lambda_ph = 0.0;
                c.loss.lambda_eas = 0.0;
            }
            Variant::PhotometricOnly => {
                c.train.use_semantic = false;
                c.loss.lambda_seg = 0.0;
            }
            Variant::FixedOffset => c.train.fixed_side_offset = Some(c.train.side_offset_range.0),
            Variant::FrontOnlyLabels => c.train.label_views = LabelViews::FrontOnly,
            Variant::InputOnlyLabels => c.train.label_views = LabelViews::InputOnly,
        }
        c
    }
}

/// Runs every variant on every seed; the scene and training seeds are both
/// set to the run seed, so variants of one seed share their data.
pub fn run_suite(base: &RunConfig, variants: &[Variant], seeds: &[u64], mut on_record: impl FnMut(&RunRecord)) -> Result<Vec<RunRecord>, ExperimentError> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.scene.seed = seed;
        cfg.train.seed = seed;
        let seq = build_sequence(&cfg.dataset())?;
        for &v in variants {
            let rec = fit_and_evaluate(&v.apply(&cfg), &seq, v.name(), &FitOptions::default())?;
            on_record(&rec);
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-variant medians over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    pub iou: Vec<f64>,
    pub miou: Vec<f64>,
    /// `(offset, accuracy, pseudo accuracy)`
    pub seg: Vec<(usize, f64, f64)>,
}

pub fn summarize(records: &[RunRecord]) -> BTreeMap<String, Summary> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.variant.clone()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(name, rs)| {
            let nr = rs.iter().map(|r| r.ranges.len()).min().unwrap_or(0);
            let ns = rs.iter().map(|r| r.seg.len()).min().unwrap_or(0);
            let col = |f: &dyn Fn(&RunRecord) -> f64| median(&mut rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let s = Summary {
                seeds: rs.len(),
                iou: (0..nr).map(|i| col(&|r| r.ranges[i].iou)).collect(),
                miou: (0..nr).map(|i| col(&|r| r.ranges[i].miou)).collect(),
                seg: (0..ns)
                    .map(|i| (rs[0].seg[i].offset, col(&|r| r.seg[i].accuracy), col(&|r| r.seg[i].pseudo_accuracy)))
                    .collect(),
            };
            (name, s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

/// Directional checks on the ablation variants that are present.
pub fn ablation_checks(summary: &BTreeMap<String, Summary>) -> Vec<Check> {
    let get = |v: Variant| summary.get(v.name());
    let mut out = Vec::new();
    if let Some(full) = get(Variant::Full) {
        if let Some(s) = get(Variant::SemanticOnly) {
            out.push(Check {
                name: "full > semantic_only IoU at every range".into(),
                holds: full.iou.iter().zip(&s.iou).all(|(a, b)| a > b),
                detail: format!("{} vs {}", fmt_list(&full.iou), fmt_list(&s.iou)),
            });
        }
        if let Some(p) = get(Variant::PhotometricOnly) {
            out.push(Check {
                name: "full >= photometric_only IoU at every range".into(),
                holds: full.iou.iter().zip(&p.iou).all(|(a, b)| a >= b),
                detail: format!("{} vs {}", fmt_list(&full.iou), fmt_list(&p.iou)),
            });
        }
        if let Some(f) = get(Variant::FixedOffset) {
            let (a, b) = (full.iou.last().copied().unwrap_or(f64::NAN), f.iou.last().copied().unwrap_or(f64::NAN));
            out.push(Check {
                name: "random offsets >= fixed offset IoU at the far range".into(),
                holds: a >= b,
                detail: format!("{a:.4} vs {b:.4}"),
            });
        }
    }
    out
}

fn seg_at(s: &Summary, offset: usize) -> Option<(f64, f64)> {
    s.seg.iter().find(|x| x.0 == offset).map(|x| (x.1, x.2))
}

/// Directional checks on rendered segmentation.
pub fn label_checks(summary: &BTreeMap<String, Summary>) -> Vec<Check> {
    let get = |v: Variant| summary.get(v.name());
    let mut out = Vec::new();
    let (full, front, input) = (get(Variant::Full), get(Variant::FrontOnlyLabels), get(Variant::InputOnlyLabels));
    if let (Some(full), Some(front), Some(input)) = (full, front, input) {
        let far = full.seg.iter().map(|x| x.0).max().unwrap_or(0);
        let acc = |s: &Summary| seg_at(s, far).map_or(f64::NAN, |x| x.0);
        let (a, b, c) = (acc(full), acc(front), acc(input));
        out.push(Check {
            name: format!("full >= front_only >= input_only accuracy at +{far}"),
            holds: a >= b && b >= c,
            detail: format!("{a:.4} / {b:.4} / {c:.4}"),
        });
    }
    for v in Variant::LABELS {
        if let Some(s) = get(v) {
            let accs: Vec<f64> = s.seg.iter().map(|x| x.1).collect();
            out.push(Check {
                name: format!("{} accuracy non-increasing with offset", v.name()),
                holds: accs.windows(2).all(|w| w[1] <= w[0]),
                detail: fmt_list(&accs),
            });
        }
    }
    if let Some(full) = full {
        if let Some((acc, pseudo)) = seg_at(full, 0) {
            out.push(Check {
                name: "full +0 accuracy >= pseudo-label accuracy".into(),
                holds: acc >= pseudo,
                detail: format!("{acc:.4} vs {pseudo:.4}"),
            });
        }
    }
    out
}

/// Markdown tables of IoU per range and segmentation accuracy per offset,
/// followed by the directional checks.
pub fn report_markdown(records: &[RunRecord]) -> String {
    let summary = summarize(records);
    let mut md = String::new();
    let nr = summary.values().map(|s| s.iou.len()).max().unwrap_or(0);
    let ranges: Vec<String> = records
        .first()
        .map(|r| r.ranges.iter().map(|m| format!("{:.1}m", m.range.extent[0])).collect())
        .unwrap_or_default();
    writeln!(md, "## Occupancy (median over seeds)\n").unwrap();
    let mut head = "| variant | seeds |".to_string();
    for r in ranges.iter().take(nr) {
        head.push_str(&format!(" IoU {r} |"));
    }
    head.push_str(" mIoU (full) |");
    writeln!(md, "{head}").unwrap();
    writeln!(md, "|{}", "---|".repeat(nr + 3)).unwrap();
    for (name, s) in &summary {
        let mut row = format!("| {name} | {} |", s.seeds);
        for v in &s.iou {
            row.push_str(&format!(" {:.2} |", 100.0 * v));
        }
        row.push_str(&format!(" {:.2} |", 100.0 * s.miou.last().copied().unwrap_or(f64::NAN)));
        writeln!(md, "{row}").unwrap();
    }
    let offsets: Vec<usize> = summary.values().flat_map(|s| s.seg.iter().map(|x| x.0)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if !offsets.is_empty() {
        writeln!(md, "\n## Rendered segmentation accuracy (median over seeds)\n").unwrap();
        let mut head = "| variant |".to_string();
        for o in &offsets {
            head.push_str(&format!(" +{o} |"));
        }
        writeln!(md, "{head}").unwrap();
        writeln!(md, "|{}", "---|".repeat(offsets.len() + 1)).unwrap();
        for (name, s) in &summary {
            let mut row = format!("| {name} |");
            for o in &offsets {
                row.push_str(&seg_at(s, *o).map_or(" - |".into(), |x| format!(" {:.2} |", 100.0 * x.0)));
            }
            writeln!(md, "{row}").unwrap();
        }
        if let Some(s) = summary.values().next() {
            let mut row = "| pseudo-labels |".to_string();
            for o in &offsets {
                row.push_str(&seg_at(s, *o).map_or(" - |".into(), |x| format!(" {:.2} |", 100.0 * x.1)));
            }
            writeln!(md, "{row}").unwrap();
        }
    }
    let checks: Vec<Check> = ablation_checks(&summary).into_iter().chain(label_checks(&summary)).collect();
    if !checks.is_empty() {
        writeln!(md, "\n## Directional checks\n").unwrap();
        for c in checks {
            writeln!(md, "- [{}] {}: {}", if c.holds { "x" } else { " " }, c.name, c.detail).unwrap();
        }
    }
    md
}

/// One row per run.
pub fn report_csv(records: &[RunRecord]) -> String {
    let nr = records.iter().map(|r| r.ranges.len()).max().unwrap_or(0);
    let offsets: Vec<usize> = records.first().map(|r| r.seg.iter().map(|s| s.offset).collect()).unwrap_or_default();
    let mut head = "variant,seed".to_string();
    for i in 0..nr {
        head.push_str(&format!(",iou_{i},precision_{i},recall_{i},miou_{i}"));
    }
    for o in &offsets {
        head.push_str(&format!(",seg_acc_{o},pseudo_acc_{o}"));
    }
    let mut out = head + "\n";
    for r in records {
        let mut row = format!("{},{}", r.variant, r.seed);
        for m in &r.ranges {
            row.push_str(&format!(",{},{},{},{}", m.iou, m.precision, m.recall, m.miou));
        }
        for s in &r.seg {
            row.push_str(&format!(",{},{}", s.accuracy, s.pseudo_accuracy));
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}
