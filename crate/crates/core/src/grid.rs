//! Voxel grids: discretising a field, invalid-mask refinement, completion
//! metrics and the S4CG file format.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, Vec3};
use crate::field::{Field, FieldError};
use crate::scene::{self, VoxelWorld};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("grid does not intersect the camera frustum")]
    OutsideFrustum,
    #[error("grid specs differ: {0}")]
    SpecMismatch(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated grid file: need {needed} bytes, have {len}")]
    Truncated { needed: usize, len: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Placement of a grid. Stored in 32-bit floats, as in the file format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub origin: [f32; 3],
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// x fastest, then y, then z.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Point at fractional voxel coordinates `f` (voxel `v` spans `[v, v+1)`).
    pub fn point(&self, f: [f64; 3]) -> Vec3 {
        let vs = self.voxel_size as f64;
        [0, 1, 2].map(|a| self.origin[a] as f64 + f[a] * vs)
    }

    pub fn center(&self, i: usize) -> Vec3 {
        let c = self.coords(i);
        self.point(c.map(|v| v as f64 + 0.5))
    }

    pub fn extent(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.voxel_size as f64)
    }

    /// World-aligned grid starting at the camera's voxel column, `forward`
    /// voxels long in +x, `half_width` voxels either side of the camera in y,
    /// and the full world height. Clipped to the world.
    pub fn in_front_of(world: &VoxelWorld, camera: &Camera, forward: usize, half_width: usize) -> Result<Self, GridError> {
        let c = camera.pose.center();
        let vs = world.voxel_size;
        let cell = |a: usize| ((c[a] - world.origin[a]) / vs).floor();
        let (cx, cy) = (cell(0), cell(1));
        if cx < 0.0 || cy < 0.0 || cx >= world.dims[0] as f64 || cy >= world.dims[1] as f64 {
            return Err(GridError::Config("camera outside the world".into()));
        }
        let (cx, cy) = (cx as usize, cy as usize);
        let nx = forward.min(world.dims[0] - cx);
        let hw = half_width.min(cy).min(world.dims[1] - cy - 1);
        if nx == 0 || hw == 0 {
            return Err(GridError::Config("empty evaluation grid".into()));
        }
        let origin = [
            world.origin[0] + cx as f64 * vs,
            world.origin[1] + (cy - hw) as f64 * vs,
            world.origin[2],
        ];
        Ok(Self {
            dims: [nx, 2 * hw + 1, world.dims[2]],
            voxel_size: vs as f32,
            origin: origin.map(|v| v as f32),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    /// Class ids, 0 = empty.
    pub labels: Vec<u8>,
    pub invalid: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec, num_classes: usize) -> Self {
        Self {
            spec,
            num_classes,
            labels: vec![0; spec.len()],
            invalid: vec![false; spec.len()],
        }
    }

    /// The whole world, all voxels valid.
    pub fn from_world(world: &VoxelWorld) -> Self {
        Self {
            spec: GridSpec {
                dims: world.dims,
                voxel_size: world.voxel_size as f32,
                origin: world.origin.map(|v| v as f32),
            },
            num_classes: world.num_classes(),
            labels: world.labels.clone(),
            invalid: vec![false; world.labels.len()],
        }
    }

    /// Ground truth on `spec`: world labels at voxel centres.
    pub fn crop_world(world: &VoxelWorld, spec: GridSpec) -> Self {
        let labels = (0..spec.len()).map(|i| world.label_at(spec.center(i))).collect();
        Self {
            spec,
            num_classes: world.num_classes(),
            labels,
            invalid: vec![false; spec.len()],
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.spec.index(x, y, z)]
    }

    pub fn is_invalid(&self, x: usize, y: usize, z: usize) -> bool {
        self.invalid[self.spec.index(x, y, z)]
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().zip(&self.invalid).filter(|&(&l, &inv)| l != 0 && !inv).count()
    }

    /// Marks voxels whose centre the camera cannot see within `max_depth`.
    pub fn mask_frustum(&mut self, camera: &Camera, max_depth: f64) {
        let mask = frustum_mask(&self.spec, camera, max_depth);
        for (inv, out) in self.invalid.iter_mut().zip(mask) {
            *inv |= out;
        }
    }
}

/// True for voxels outside the camera frustum.
pub fn frustum_mask(spec: &GridSpec, camera: &Camera, max_depth: f64) -> Vec<bool> {
    (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let p = camera::project(&camera.intrinsics, &camera.pose, spec.center(i));
            !(p.in_view && p.depth <= max_depth)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// Raw thresholding only.
    Off,
    Six,
    TwentySix,
}

impl Neighborhood {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    if (n == 1 && self != Neighborhood::Off) || (n > 1 && self == Neighborhood::TwentySix) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelizeConfig {
    /// Sub-samples per axis; the voxel is probed on a `n x n x n` lattice.
    pub subdivisions: usize,
    /// Occupancy threshold in 1/m; `ln 2 / voxel_size` when unset.
    pub tau: Option<f64>,
    pub neighborhood: Neighborhood,
    /// Voxels farther than this from the camera plane are invalid.
    pub max_depth: f64,
    pub chunk: usize,
}

impl Default for VoxelizeConfig {
    fn default() -> Self {
        Self {
            subdivisions: 2,
            tau: None,
            neighborhood: Neighborhood::Six,
            max_depth: 80.0,
            chunk: 4096,
        }
    }
}

impl VoxelizeConfig {
    pub fn tau_for(&self, voxel_size: f64) -> f64 {
        self.tau.unwrap_or(std::f64::consts::LN_2 / voxel_size)
    }
}

/// Raw per-voxel result before thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOccupancy {
    /// Max density over the voxel's sub-samples.
    pub sigma: Vec<f64>,
    /// Class at the max-density sub-sample (never 0).
    pub class: Vec<u8>,
}

/// Probes every voxel of `spec` on the sub-sample lattice.
pub fn raw_occupancy(field: &dyn Field, spec: &GridSpec, cfg: &VoxelizeConfig) -> Result<RawOccupancy, GridError> {
    let n = cfg.subdivisions;
    if n == 0 {
        return Err(GridError::Config("subdivisions must be >= 1".into()));
    }
    let c = field.num_classes();
    let per = n * n * n;
    let offsets: Vec<[f64; 3]> = (0..per)
        .map(|k| [k % n, (k / n) % n, k / (n * n)].map(|j| (j as f64 + 0.5) / n as f64))
        .collect();
    let voxels_per_chunk = (cfg.chunk / per).max(1);
    let chunks: Vec<(usize, usize)> = (0..spec.len()).step_by(voxels_per_chunk).map(|s| (s, (s + voxels_per_chunk).min(spec.len()))).collect();
    let parts: Vec<Result<Vec<(f64, u8)>, GridError>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut pts = Vec::with_capacity((hi - lo) * per);
            for i in lo..hi {
                let v = spec.coords(i);
                for o in &offsets {
                    pts.push(spec.point([0, 1, 2].map(|a| v[a] as f64 + o[a])));
                }
            }
            let b = field.query_points(&pts)?;
            Ok((0..hi - lo)
                .map(|j| {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for k in 0..per {
                        let s = j * per + k;
                        let sigma = if b.valid[s] { b.sigma[s] } else { 0.0 };
                        if sigma > best.0 {
                            best = (sigma, s);
                        }
                    }
                    let l = &b.logits[best.1 * c..(best.1 + 1) * c];
                    let mut cls = 1;
                    for k in 2..c {
                        if l[k] > l[cls] {
                            cls = k;
                        }
                    }
                    (best.0.max(0.0), cls as u8)
                })
                .collect())
        })
        .collect();
    let mut raw = RawOccupancy {
        sigma: Vec::with_capacity(spec.len()),
        class: Vec::with_capacity(spec.len()),
    };
    for p in parts {
        for (s, k) in p? {
            raw.sigma.push(s);
            raw.class.push(k);
        }
    }
    Ok(raw)
}

/// Thresholds raw occupancy with the neighbourhood check. A voxel is occupied
/// when it or a neighbour exceeds `tau`; voxels occupied only through a
/// neighbour take the class of the densest such neighbour. Invalid voxels
/// stay empty.
pub fn threshold(raw: &RawOccupancy, spec: GridSpec, num_classes: usize, tau: f64, nb: Neighborhood, invalid: Vec<bool>) -> VoxelGrid {
    let offs = nb.offsets();
    let [nx, ny, nz] = spec.dims;
    let labels = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            if invalid[i] {
                return 0;
            }
            if raw.sigma[i] > tau {
                return raw.class[i];
            }
            let v = spec.coords(i);
            let mut best: Option<(f64, u8)> = None;
            for o in &offs {
                let q = [0, 1, 2].map(|a| v[a] as isize + o[a]);
                if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx as isize || q[1] >= ny as isize || q[2] >= nz as isize {
                    continue;
                }
                let j = spec.index(q[0] as usize, q[1] as usize, q[2] as usize);
                if raw.sigma[j] > tau && best.is_none_or(|(s, _)| raw.sigma[j] > s) {
                    best = Some((raw.sigma[j], raw.class[j]));
                }
            }
            best.map_or(0, |(_, k)| k)
        })
        .collect();
    VoxelGrid {
        spec,
        num_classes,
        labels,
        invalid,
    }
}

/// Discretises `field` on `spec` as seen from `camera`.
pub fn voxelize_field(field: &dyn Field, camera: &Camera, spec: GridSpec, cfg: &VoxelizeConfig) -> Result<VoxelGrid, GridError> {
    let tau = cfg.tau_for(spec.voxel_size as f64);
    if !(tau > 0.0) {
        return Err(GridError::Config(format!("tau must be positive, got {tau}")));
    }
    let invalid = frustum_mask(&spec, camera, cfg.max_depth);
    if invalid.iter().all(|&b| b) {
        return Err(GridError::OutsideFrustum);
    }
    let raw = raw_occupancy(field, &spec, cfg)?;
    Ok(threshold(&raw, spec, field.num_classes(), tau, cfg.neighborhood, invalid))
}

/// Marks never-observable empty space under the street: in each column, a
/// voxel below `street_z` becomes invalid when it and every voxel beneath it
/// are empty or already invalid. Labels are unchanged.
pub fn refine_invalids(grid: &VoxelGrid, street_z: usize) -> VoxelGrid {
    let [nx, ny, nz] = grid.spec.dims;
    let top = street_z.min(nz);
    let mut out = grid.clone();
    let cols: Vec<Vec<usize>> = (0..nx * ny)
        .into_par_iter()
        .map(|c| {
            let (x, y) = (c % nx, c / nx);
            let mut newly = Vec::new();
            for z in 0..top {
                let i = grid.spec.index(x, y, z);
                if !(grid.invalid[i] || grid.labels[i] == 0) {
                    break;
                }
                newly.push(i);
            }
            newly
        })
        .collect();
    for i in cols.into_iter().flatten() {
        out.invalid[i] = true;
    }
    out
}

/// Axis-aligned crop measured from the grid origin in x and z and centred on
/// the grid in y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub extent: [f64; 3],
}

impl EvalRange {
    pub fn contains(&self, spec: &GridSpec, i: usize) -> bool {
        let c = spec.center(i);
        let e = spec.extent();
        let rel = [0, 1, 2].map(|a| c[a] - spec.origin[a] as f64);
        rel[0] < self.extent[0] && (rel[1] - 0.5 * e[1]).abs() < 0.5 * self.extent[1] && rel[2] < self.extent[2]
    }

    pub fn full(spec: &GridSpec) -> Self {
        Self { extent: spec.extent() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMetrics {
    pub range: EvalRange,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Indexed by class id; `None` for class 0 and classes absent from both grids.
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranges: Vec<RangeMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Completion metrics of `pred` against `gt` per range. Voxels invalid in
/// `gt` are skipped; invalid voxels of `pred` count as empty.
pub fn evaluate(pred: &VoxelGrid, gt: &VoxelGrid, ranges: &[EvalRange]) -> Result<EvalReport, GridError> {
    if pred.spec != gt.spec {
        return Err(GridError::SpecMismatch(format!("{:?} vs {:?}", pred.spec, gt.spec)));
    }
    if pred.num_classes != gt.num_classes {
        return Err(GridError::SpecMismatch(format!("{} vs {} classes", pred.num_classes, gt.num_classes)));
    }
    let c = gt.num_classes;
    let ranges = ranges
        .par_iter()
        .map(|range| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            let mut inter = vec![0usize; c];
            let mut union = vec![0usize; c];
            for i in 0..gt.labels.len() {
                if gt.invalid[i] || !range.contains(&gt.spec, i) {
                    continue;
                }
                let g = gt.labels[i] as usize;
                let p = if pred.invalid[i] { 0 } else { pred.labels[i] as usize };
                match (p != 0, g != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
                if p == g {
                    inter[g] += 1;
                    union[g] += 1;
                } else {
                    union[p] += 1;
                    union[g] += 1;
                }
            }
            let class_iou: Vec<Option<f64>> = (0..c).map(|k| (k > 0 && union[k] > 0).then(|| ratio(inter[k], union[k]))).collect();
            let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
            let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
            RangeMetrics {
                range: *range,
                iou: ratio(tp, tp + fp + fn_),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                class_iou,
                miou,
                true_positive: tp,
                false_positive: fp,
                false_negative: fn_,
            }
        })
        .collect();
    Ok(EvalReport { ranges })
}

pub const S4CG_MAGIC: [u8; 4] = *b"S4CG";
pub const S4CG_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 4 + 12 + 2;

/// Little-endian S4CG bytes. The invalid mask is packed 8 voxels per byte,
/// least significant bit first.
pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let n = grid.spec.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n + n.div_ceil(8));
    out.extend_from_slice(&S4CG_MAGIC);
    out.extend_from_slice(&S4CG_VERSION.to_le_bytes());
    for d in grid.spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.spec.voxel_size.to_le_bytes());
    for o in grid.spec.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&(grid.num_classes as u16).to_le_bytes());
    out.extend_from_slice(&grid.labels);
    let mut packed = vec![0u8; n.div_ceil(8)];
    for (i, &b) in grid.invalid.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<VoxelGrid, GridError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(GridError::Truncated { needed, len: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != S4CG_MAGIC {
        return Err(GridError::BadMagic(magic));
    }
    need(HEADER_LEN)?;
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != S4CG_VERSION {
        return Err(GridError::Version(version));
    }
    let dims = [u32_at(6) as usize, u32_at(10) as usize, u32_at(14) as usize];
    let spec = GridSpec {
        dims,
        voxel_size: f32_at(18),
        origin: [f32_at(22), f32_at(26), f32_at(30)],
    };
    let num_classes = u16_at(34) as usize;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| GridError::Config(format!("dims overflow {dims:?}")))?;
    need(HEADER_LEN + n + n.div_ceil(8))?;
    let labels = bytes[HEADER_LEN..HEADER_LEN + n].to_vec();
    let packed = &bytes[HEADER_LEN + n..];
    let invalid = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(VoxelGrid {
        spec,
        num_classes,
        labels,
        invalid,
    })
}

pub fn write_grid(path: &Path, grid: &VoxelGrid) -> Result<(), GridError> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid, GridError> {
    decode_grid(&std::fs::read(path)?)
}

/// ASCII PLY with one vertex per valid occupied voxel, coloured by class.
pub fn write_ply<W: Write>(out: &mut W, grid: &VoxelGrid) -> Result<(), GridError> {
    let table = scene::class_table(grid.num_classes.clamp(2, 6)).map_err(|e| GridError::Config(e.to_string()))?;
    let occupied: Vec<usize> = (0..grid.labels.len()).filter(|&i| grid.labels[i] != 0 && !grid.invalid[i]).collect();
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", occupied.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for i in occupied {
        let c = grid.spec.center(i);
        let a = table.get(grid.labels[i] as usize).map_or([1.0; 3], |k| k.albedo);
        let rgb = a.map(|v| (v * 255.0).round() as u8);
        writeln!(out, "{} {} {} {} {} {}", c[0] as f32, c[1] as f32, c[2] as f32, rgb[0], rgb[1], rgb[2])?;
    }
    Ok(())
}

/// One row per range; class columns are empty for absent classes.
pub fn write_report_csv<W: Write>(out: &mut W, report: &EvalReport) -> Result<(), GridError> {
    let c = report.ranges.first().map_or(0, |r| r.class_iou.len());
    let mut header = "x_max,y_max,z_max,iou,precision,recall,miou".to_string();
    for k in 1..c {
        header.push_str(&format!(",class_{k}"));
    }
    writeln!(out, "{header}")?;
    for r in &report.ranges {
        let e = r.range.extent;
        let mut row = format!("{},{},{},{},{},{},{}", e[0], e[1], e[2], r.iou, r.precision, r.recall, r.miou);
        for v in &r.class_iou[1..] {
            row.push(',');
            if let Some(v) = v {
                row.push_str(&v.to_string());
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}
