//! Procedural voxel worlds, the camera rig, an exact DDA ray caster used as
//! ground truth, and the pseudo-label corruption model.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, Intrinsics, Pose, Ray, Vec3};
use crate::image::RgbImage;
use crate::rng;

/// Label for pixels whose ray leaves the world without a hit.
pub const BACKGROUND: u8 = 255;
const SKY: [f32; 3] = [0.62, 0.74, 0.92];

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("world dims {0:?} too small to place the road (need at least 32x32x8)")]
    TooSmall([usize; 3]),
    #[error("num_classes must be in 2..=6, got {0}")]
    Classes(usize),
    #[error("trajectory leaves the world at step {0}")]
    OffWorld(usize),
    #[error("sequence too short: need timestep {needed}, have {len}")]
    SequenceTooShort { needed: usize, len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub albedo: [f64; 3],
}

/// Class ids: 0 empty, 1 road, 2 terrain, 3 building, 4 car, 5 vegetation.
/// With two classes the single solid class is "ground".
pub fn class_table(num_classes: usize) -> Result<Vec<ClassInfo>, SceneError> {
    if !(2..=6).contains(&num_classes) {
        return Err(SceneError::Classes(num_classes));
    }
    let all = [
        ("empty", [0.0, 0.0, 0.0]),
        ("road", [0.38, 0.38, 0.42]),
        ("terrain", [0.48, 0.58, 0.26]),
        ("building", [0.78, 0.56, 0.44]),
        ("car", [0.75, 0.12, 0.12]),
        ("vegetation", [0.12, 0.45, 0.14]),
    ];
    let mut table: Vec<ClassInfo> = all[..num_classes]
        .iter()
        .map(|(n, a)| ClassInfo {
            name: n.to_string(),
            albedo: *a,
        })
        .collect();
    if num_classes == 2 {
        table[1].name = "ground".into();
    }
    Ok(table)
}

pub const ROAD: u8 = 1;
pub const TERRAIN: u8 = 2;
pub const BUILDING: u8 = 3;
pub const CAR: u8 = 4;
pub const VEGETATION: u8 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub num_classes: usize,
    /// Per-voxel albedo jitter amplitude.
    pub texture: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 16],
            voxel_size: 0.2,
            num_classes: 6,
            texture: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelWorld {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
    /// x fastest, then y, then z.
    pub labels: Vec<u8>,
    pub class_table: Vec<ClassInfo>,
    pub seed: u64,
    pub texture: f64,
}

impl VoxelWorld {
    pub fn empty(dims: [usize; 3], voxel_size: f64, num_classes: usize) -> Result<Self, SceneError> {
        Ok(Self {
            dims,
            voxel_size,
            origin: [0.0; 3],
            labels: vec![0; dims[0] * dims[1] * dims[2]],
            class_table: class_table(num_classes)?,
            seed: 0,
            texture: 0.0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = v;
    }

    /// Label at a world point; 0 outside the grid.
    pub fn label_at(&self, p: Vec3) -> u8 {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return 0;
            }
            idx[a] = f as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l != 0).count() as f64 / self.labels.len() as f64
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        ]
    }

    /// Road band `[y0, y1)` in voxel rows.
    pub fn road_band(&self) -> (usize, usize) {
        road_band(self.dims[1])
    }

    /// Lateral centre of the ego lane in metres.
    pub fn ego_lane_y(&self) -> f64 {
        let (y0, y1) = self.road_band();
        let mid = (y0 + y1) / 2;
        self.origin[1] + 0.5 * (y0 + mid) as f64 * self.voxel_size
    }

    /// Shaded albedo of a voxel: class colour with a deterministic per-voxel
    /// brightness jitter.
    pub fn voxel_albedo(&self, v: [usize; 3], class: u8) -> [f64; 3] {
        let base = self.class_table[class as usize].albedo;
        let j = 1.0 + self.texture * (2.0 * rng::hash01(self.seed, &[v[0] as i64, v[1] as i64, v[2] as i64]) - 1.0);
        [base[0] * j, base[1] * j, base[2] * j]
    }
}

fn road_band(y: usize) -> (usize, usize) {
    let width = (0.44 * y as f64).round() as usize;
    let y0 = (y - width) / 2;
    (y0, y0 + width)
}

fn fill_box(world: &mut VoxelWorld, lo: [usize; 3], hi: [usize; 3], class: u8) {
    for z in lo[2]..hi[2].min(world.dims[2]) {
        for y in lo[1]..hi[1].min(world.dims[1]) {
            for x in lo[0]..hi[0].min(world.dims[0]) {
                world.set(x, y, z, class);
            }
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<VoxelWorld, SceneError> {
    let [nx, ny, nz] = cfg.dims;
    if nx < 32 || ny < 32 || nz < 8 {
        return Err(SceneError::TooSmall(cfg.dims));
    }
    let c = cfg.num_classes;
    let mut world = VoxelWorld::empty(cfg.dims, cfg.voxel_size, c)?;
    world.seed = cfg.seed;
    world.texture = cfg.texture;
    let mut rng = rng::stream(cfg.seed, "scene", 0);
    let (y0, y1) = road_band(ny);
    let has = |k: u8| (k as usize) < c;

    if c == 2 {
        fill_box(&mut world, [0, 0, 0], [nx, ny, 1], 1);
        return Ok(world);
    }
    // ground: road band at z=0, raised terrain kerb elsewhere
    for y in 0..ny {
        let road = (y0..y1).contains(&y);
        let top = if road { 1 } else { 2 };
        fill_box(&mut world, [0, y, 0], [nx, y + 1, top], if road { ROAD } else { TERRAIN });
    }

    let margin = 3;
    if has(BUILDING) {
        let sides = [(0usize, y0.saturating_sub(margin)), (y1 + margin, ny)];
        for (side, &(lo, hi)) in sides.iter().enumerate() {
            if hi <= lo + 2 {
                continue;
            }
            let mut x = rng.gen_range(0..4);
            while x + 4 < nx {
                let len = rng.gen_range(8..=20).min(nx - x);
                let depth = rng.gen_range(5..=12).min(hi - lo);
                let height = rng.gen_range(6..=nz - 2);
                let (ya, yb) = if side == 0 { (hi - depth, hi) } else { (lo, lo + depth) };
                fill_box(&mut world, [x, ya, 0], [x + len, yb, height], BUILDING);
                x += len + rng.gen_range(2..=6);
            }
        }
    }

    if has(VEGETATION) {
        let blobs = nx / 8;
        for _ in 0..blobs {
            let left = rng.gen_bool(0.5);
            let cy = if left {
                y0 as f64 - rng.gen_range(0.5..margin as f64 + 1.0)
            } else {
                y1 as f64 + rng.gen_range(0.5..margin as f64 + 1.0)
            };
            let cx = rng.gen_range(0.0..nx as f64);
            let r = rng.gen_range(1.5..3.0);
            let cz = 2.0 + r * rng.gen_range(0.6..1.0);
            for z in 2..nz {
                for y in 0..ny {
                    if (y0..y1).contains(&y) {
                        continue;
                    }
                    for x in 0..nx {
                        let d = ((x as f64 + 0.5 - cx).powi(2)
                            + (y as f64 + 0.5 - cy).powi(2)
                            + (z as f64 + 0.5 - cz).powi(2))
                        .sqrt();
                        if d <= r && world.get(x, y, z) == 0 {
                            world.set(x, y, z, VEGETATION);
                        }
                    }
                }
            }
        }
    }

    if has(CAR) {
        // opposite lane only, keeping the ego lane clear
        let mid = (y0 + y1) / 2;
        let want = rng.gen_range(2..=6);
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for _ in 0..200 {
            if placed.len() == want {
                break;
            }
            let len = rng.gen_range(8..=12);
            let x = rng.gen_range(0..nx - len);
            if placed.iter().any(|&(a, b)| x < b + 2 && a < x + len + 2) {
                continue;
            }
            let width = rng.gen_range(7..=9).min(y1 - mid - 1);
            let height = rng.gen_range(6..=7).min(nz - 2);
            let ya = mid + 1;
            fill_box(&mut world, [x, ya, 1], [x + len, ya + width, 1 + height], CAR);
            placed.push((x, x + len));
        }
        if placed.len() < 2 {
            return Err(SceneError::TooSmall(cfg.dims));
        }
    }
    Ok(world)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    FrontLeft,
    FrontRight,
    SideLeft,
    SideRight,
}

impl CameraId {
    pub const ALL: [CameraId; 4] = [CameraId::FrontLeft, CameraId::FrontRight, CameraId::SideLeft, CameraId::SideRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraId::FrontLeft => "front_left",
            CameraId::FrontRight => "front_right",
            CameraId::SideLeft => "side_left",
            CameraId::SideRight => "side_right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn is_front(self) -> bool {
        matches!(self, CameraId::FrontLeft | CameraId::FrontRight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub front_hfov_deg: f64,
    pub side_hfov_deg: f64,
    pub baseline: f64,
    pub mount_height: f64,
    pub front_pitch_deg: f64,
    pub side_pitch_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 48,
            front_hfov_deg: 90.0,
            side_hfov_deg: 100.0,
            baseline: 0.6,
            mount_height: 1.6,
            front_pitch_deg: 10.0,
            side_pitch_deg: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub id: CameraId,
    pub intrinsics: Intrinsics,
    /// Vehicle-from-camera.
    pub mount: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<RigCamera>,
}

impl CameraRig {
    pub fn new(cfg: &RigConfig) -> Self {
        let front = Intrinsics::from_hfov(cfg.width, cfg.height, cfg.front_hfov_deg);
        let side = Intrinsics::from_hfov(cfg.width, cfg.height, cfg.side_hfov_deg);
        let h = cfg.mount_height;
        let b = cfg.baseline / 2.0;
        let fp = cfg.front_pitch_deg.to_radians();
        let sp = cfg.side_pitch_deg.to_radians();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mk = |id, intrinsics, mount| RigCamera { id, intrinsics, mount };
        Self {
            cameras: vec![
                mk(CameraId::FrontLeft, front, Pose::looking([0.0, b, h], 0.0, fp)),
                mk(CameraId::FrontRight, front, Pose::looking([0.0, -b, h], 0.0, fp)),
                mk(CameraId::SideLeft, side, Pose::looking([0.0, b, h], half_pi, sp)),
                mk(CameraId::SideRight, side, Pose::looking([0.0, -b, h], -half_pi, sp)),
            ],
        }
    }

    pub fn camera(&self, id: CameraId) -> &RigCamera {
        &self.cameras[id.index()]
    }

    pub fn world_camera(&self, id: CameraId, vehicle: &Pose) -> Camera {
        let c = self.camera(id);
        Camera {
            intrinsics: c.intrinsics,
            pose: vehicle.compose(&c.mount),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub num_steps: usize,
    /// Voxels per step.
    pub speed: f64,
    pub yaw_noise_deg: f64,
    /// Starting x in voxels.
    pub start_x: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            num_steps: 40,
            speed: 1.0,
            yaw_noise_deg: 1.0,
            start_x: 2.0,
        }
    }
}

/// Vehicle poses along the ego lane. Yaw noise perturbs orientation only,
/// so positions advance by exactly `speed` voxels per step.
pub fn trajectory(world: &VoxelWorld, rig: &CameraRig, cfg: &TrajectoryConfig, seed: u64) -> Result<Vec<Pose>, SceneError> {
    let mut rng = rng::stream(seed, "trajectory", 0);
    let vs = world.voxel_size;
    let ext = world.extent();
    let y = world.ego_lane_y();
    let mut out = Vec::with_capacity(cfg.num_steps);
    for t in 0..cfg.num_steps {
        let yaw = if cfg.yaw_noise_deg > 0.0 {
            rng.gen_range(-cfg.yaw_noise_deg..=cfg.yaw_noise_deg).to_radians()
        } else {
            0.0
        };
        let x = world.origin[0] + (cfg.start_x + cfg.speed * t as f64) * vs;
        let pose = Pose::planar([x, y, world.origin[2]], yaw);
        for cam in &rig.cameras {
            let c = pose.transform_point(cam.mount.translation);
            for a in 0..3 {
                if c[a] <= world.origin[a] || c[a] >= world.origin[a] + ext[a] {
                    return Err(SceneError::OffWorld(t));
                }
            }
        }
        out.push(pose);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub hit: bool,
    /// Distance along the (unit) ray to the entry face of the hit voxel.
    pub depth: f64,
    pub class: u8,
    pub voxel: [usize; 3],
    /// Outward normal of the entry face.
    pub normal: Vec3,
}

impl Hit {
    fn miss() -> Self {
        Hit {
            hit: false,
            depth: f64::INFINITY,
            class: 0,
            voxel: [0; 3],
            normal: [0.0; 3],
        }
    }
}

/// Exact grid traversal from the ray origin; returns the first occupied voxel.
pub fn dda_raycast(world: &VoxelWorld, ray: &Ray) -> Hit {
    let vs = world.voxel_size;
    let o = ray.origin;
    let d = ray.direction;
    let lo = world.origin;
    let ext = world.extent();

    // slab entry into the grid box
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = None;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] >= lo[a] + ext[a] {
                return Hit::miss();
            }
            continue;
        }
        let t0 = (lo[a] - o[a]) / d[a];
        let t1 = (lo[a] + ext[a] - o[a]) / d[a];
        let (ta, tb) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if ta > t_enter {
            t_enter = ta;
            enter_axis = Some(a);
        }
        t_exit = t_exit.min(tb);
    }
    if t_enter >= t_exit {
        return Hit::miss();
    }

    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let p = o[a] + t_enter * d[a];
        let mut i = ((p - lo[a]) / vs).floor() as i64;
        if Some(a) == enter_axis {
            // land exactly on the entry face
            i = if d[a] > 0.0 { 0 } else { world.dims[a] as i64 - 1 };
        }
        idx[a] = i.clamp(0, world.dims[a] as i64 - 1);
        step[a] = if d[a] > 0.0 {
            1
        } else if d[a] < 0.0 {
            -1
        } else {
            0
        };
    }
    let boundary_t = |a: usize, i: i64| -> f64 {
        let plane = if step[a] > 0 { i + 1 } else { i };
        (lo[a] + plane as f64 * vs - o[a]) / d[a]
    };
    let mut t = t_enter;
    let mut normal = [0.0; 3];
    if let Some(a) = enter_axis {
        normal[a] = -(step[a] as f64);
    }
    loop {
        let v = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        let class = world.get(v[0], v[1], v[2]);
        if class != 0 {
            return Hit {
                hit: true,
                depth: t,
                class,
                voxel: v,
                normal,
            };
        }
        let mut axis = usize::MAX;
        let mut best = f64::INFINITY;
        for a in 0..3 {
            if step[a] != 0 {
                let tb = boundary_t(a, idx[a]);
                if tb < best {
                    best = tb;
                    axis = a;
                }
            }
        }
        if axis == usize::MAX {
            return Hit::miss();
        }
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= world.dims[axis] as i64 {
            return Hit::miss();
        }
        t = best;
        normal = [0.0; 3];
        normal[axis] = -(step[axis] as f64);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub image: RgbImage,
    pub gt_seg: Vec<u8>,
    /// Ray distance to the hit; 0 where the ray misses.
    pub gt_depth: Vec<f32>,
}

const LIGHT: Vec3 = [0.32, 0.45, 0.83];

fn shade(world: &VoxelWorld, hit: &Hit) -> [f32; 3] {
    let l = camera::normalize(LIGHT);
    let lambert = camera::dot(hit.normal, l).max(0.0);
    let k = 0.45 + 0.55 * lambert;
    let a = world.voxel_albedo(hit.voxel, hit.class);
    [
        (a[0] * k).clamp(0.0, 1.0) as f32,
        (a[1] * k).clamp(0.0, 1.0) as f32,
        (a[2] * k).clamp(0.0, 1.0) as f32,
    ]
}

pub fn gt_render(world: &VoxelWorld, cam: &Camera) -> GtView {
    let intr = &cam.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let rows: Vec<(Vec<[f32; 3]>, Vec<u8>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = Vec::with_capacity(w);
            let mut seg = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let ray = camera::ray_unchecked(intr, &cam.pose, [x as f64 + 0.5, y as f64 + 0.5]);
                let hit = dda_raycast(world, &ray);
                if hit.hit {
                    colors.push(shade(world, &hit));
                    seg.push(hit.class);
                    depth.push(hit.depth as f32);
                } else {
                    colors.push(SKY);
                    seg.push(BACKGROUND);
                    depth.push(0.0);
                }
            }
            (colors, seg, depth)
        })
        .collect();
    let mut image = RgbImage::new(w, h);
    let mut gt_seg = Vec::with_capacity(w * h);
    let mut gt_depth = Vec::with_capacity(w * h);
    for (y, (c, s, d)) in rows.into_iter().enumerate() {
        for (x, rgb) in c.into_iter().enumerate() {
            image.set(x, y, rgb);
        }
        gt_seg.extend(s);
        gt_depth.extend(d);
    }
    GtView { image, gt_seg, gt_depth }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelNoise {
    /// Maximum boundary displacement in pixels.
    pub radius: usize,
    /// Probability that a superpixel is relabelled at random.
    pub flip_rate: f64,
    pub superpixel: usize,
    /// Spacing of the random displacement field's control points.
    pub jitter_spacing: usize,
}

impl Default for LabelNoise {
    fn default() -> Self {
        Self {
            radius: 2,
            flip_rate: 0.02,
            superpixel: 8,
            jitter_spacing: 2,
        }
    }
}

/// Stand-in for an off-the-shelf segmentation network: boundaries are
/// displaced by a smooth random field bounded by `radius`, then superpixels
/// are relabelled uniformly at random with probability `flip_rate`.
pub fn corrupt_labels(gt: &[u8], width: usize, height: usize, num_classes: usize, seed: u64, noise: &LabelNoise) -> Vec<u8> {
    let mut rng = rng::stream(seed, "labels", 0);
    let r = noise.radius as f64;
    let mut out = gt.to_vec();
    if noise.radius > 0 {
        let s = noise.jitter_spacing.max(1);
        let (gw, gh) = (width / s + 2, height / s + 2);
        let ctrl: Vec<[f64; 2]> = (0..gw * gh)
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64 / s as f64, y as f64 / s as f64);
                let (cx, cy) = (fx.floor() as usize, fy.floor() as usize);
                let (ax, ay) = (fx - cx as f64, fy - cy as f64);
                let at = |i: usize, j: usize, k: usize| ctrl[j * gw + i][k];
                let mut off = [0.0; 2];
                for (k, o) in off.iter_mut().enumerate() {
                    *o = (1.0 - ay) * ((1.0 - ax) * at(cx, cy, k) + ax * at(cx + 1, cy, k))
                        + ay * ((1.0 - ax) * at(cx, cy + 1, k) + ax * at(cx + 1, cy + 1, k));
                }
                let sx = (x as f64 + off[0].round()).clamp(0.0, (width - 1) as f64) as usize;
                let sy = (y as f64 + off[1].round()).clamp(0.0, (height - 1) as f64) as usize;
                out[y * width + x] = gt[sy * width + sx];
            }
        }
    }
    if noise.flip_rate > 0.0 && num_classes > 1 {
        let s = noise.superpixel.max(1);
        for cy in (0..height).step_by(s) {
            for cx in (0..width).step_by(s) {
                if !rng.gen_bool(noise.flip_rate.min(1.0)) {
                    continue;
                }
                let k = rng.gen_range(1..num_classes) as u8;
                for y in cy..(cy + s).min(height) {
                    for x in cx..(cx + s).min(width) {
                        let v = &mut out[y * width + x];
                        if *v != BACKGROUND && *v != 0 {
                            *v = k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fraction of non-background ground-truth pixels whose label matches.
pub fn label_accuracy(pred: &[u8], gt: &[u8]) -> f64 {
    let mut n = 0usize;
    let mut ok = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == BACKGROUND {
            continue;
        }
        n += 1;
        ok += (p == g) as usize;
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: RgbImage,
    /// Pseudo-labels.
    pub seg: Vec<u8>,
    pub gt_seg: Vec<u8>,
    pub gt_depth: Vec<f32>,
    pub camera: Camera,
    pub camera_id: CameraId,
    pub timestep: usize,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.camera.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.camera.intrinsics.height
    }
}

/// A recorded drive: every rig camera at every timestep.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub world: VoxelWorld,
    pub rig: CameraRig,
    pub vehicle_poses: Vec<Pose>,
    /// Indexed by `t * 4 + camera index`.
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.vehicle_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicle_poses.is_empty()
    }

    pub fn frame(&self, t: usize, cam: CameraId) -> &Frame {
        &self.frames[t * 4 + cam.index()]
    }

    pub fn camera(&self, t: usize, cam: CameraId) -> Camera {
        self.rig.world_camera(cam, &self.vehicle_poses[t])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub rig: RigConfig,
    pub trajectory: TrajectoryConfig,
    pub noise: LabelNoise,
}

pub fn build_sequence(cfg: &DatasetConfig) -> Result<Sequence, SceneError> {
    sequence_in_world(generate_scene(&cfg.scene)?, cfg)
}

/// Drives the rig through a given world; `cfg.scene` only supplies the seed.
pub fn sequence_in_world(world: VoxelWorld, cfg: &DatasetConfig) -> Result<Sequence, SceneError> {
    let rig = CameraRig::new(&cfg.rig);
    let poses = trajectory(&world, &rig, &cfg.trajectory, cfg.scene.seed)?;
    let jobs: Vec<(usize, CameraId)> = (0..poses.len()).flat_map(|t| CameraId::ALL.map(|c| (t, c))).collect();
    let frames = jobs
        .par_iter()
        .map(|&(t, id)| {
            let camera = rig.world_camera(id, &poses[t]);
            let gt = gt_render(&world, &camera);
            let label_seed = rng::derive_seed(cfg.scene.seed, "frame-labels", (t * 4 + id.index()) as u64);
            let seg = corrupt_labels(&gt.gt_seg, camera.intrinsics.width, camera.intrinsics.height, world.num_classes(), label_seed, &cfg.noise);
            Frame {
                image: gt.image,
                seg,
                gt_seg: gt.gt_seg,
                gt_depth: gt.gt_depth,
                camera,
                camera_id: id,
                timestep: t,
            }
        })
        .collect();
    Ok(Sequence {
        world,
        rig,
        vehicle_poses: poses,
        frames,
    })
}

/// JSON description of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
    pub class_table: Vec<ClassInfo>,
    pub rig: CameraRig,
    pub vehicle_poses: Vec<Pose>,
}

impl SceneDescription {
    pub fn of(seq: &Sequence) -> Self {
        Self {
            seed: seq.world.seed,
            dims: seq.world.dims,
            voxel_size: seq.world.voxel_size,
            origin: seq.world.origin,
            class_table: seq.world.class_table.clone(),
            rig: seq.rig.clone(),
            vehicle_poses: seq.vehicle_poses.clone(),
        }
    }
}
