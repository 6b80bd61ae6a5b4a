//! Pinhole cameras, rigid poses, pixel rays and positional encoding.
//!
//! Camera frames follow the usual vision convention: x right, y down,
//! z forward. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its centre is
//! at `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("pose rotation is not orthonormal (error {0:e})")]
    NotRigid(f64),
    #[error("pixel ({0}, {1}) outside the image")]
    OutOfBounds(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centred principal point and square pixels for a horizontal FoV.
    pub fn from_hfov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(CameraError::Intrinsics(format!("{self:?}")))
        }
    }

    pub fn contains(&self, u: [f64; 2]) -> bool {
        u[0] >= 0.0 && u[0] < self.width as f64 && u[1] >= 0.0 && u[1] < self.height as f64
    }
}

/// Rigid world-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation block.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self, CameraError> {
        let p = Self {
            rotation,
            translation,
        };
        let err = p.orthonormality_error();
        if err > 1e-6 {
            return Err(CameraError::NotRigid(err));
        }
        Ok(p)
    }

    /// Camera looking along world `+x` in a z-up world (camera x = world -y,
    /// camera y = world -z), then yawed about world z and pitched down by
    /// `pitch` radians.
    pub fn looking(position: Vec3, yaw: f64, pitch_down: f64) -> Self {
        let base = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        let r = matmul3(&rot_z(yaw), &matmul3(&base, &rot_x(-pitch_down)));
        Self {
            rotation: r,
            translation: position,
        }
    }

    /// Pure yaw about world z plus translation (vehicle poses).
    pub fn planar(position: Vec3, yaw: f64) -> Self {
        Self {
            rotation: rot_z(yaw),
            translation: position,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let rtr = matmul3(&transpose3(&self.rotation), &self.rotation);
        let mut err = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - id).abs());
            }
        }
        err
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: matmul3(&self.rotation, &other.rotation),
            translation: self.transform_point(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose3(&self.rotation);
        let t = self.translation;
        let mt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation: mt,
        }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn transform_point(&self, x: Vec3) -> Vec3 {
        add(self.rotate(x), self.translation)
    }

    /// World point expressed in this camera's frame.
    pub fn to_local(&self, x: Vec3) -> Vec3 {
        let d = sub(x, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn forward(&self) -> Vec3 {
        self.rotate([0.0, 0.0, 1.0])
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// A camera: intrinsics plus world-from-camera pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    /// z in the camera frame.
    pub depth: f64,
    /// True when the point is in front of the camera and inside the image.
    pub in_view: bool,
}

pub fn project(intr: &Intrinsics, pose: &Pose, x: Vec3) -> Projection {
    let p = pose.to_local(x);
    let depth = p[2];
    if depth <= 0.0 {
        return Projection {
            pixel: [f64::NAN, f64::NAN],
            depth,
            in_view: false,
        };
    }
    let pixel = [intr.fx * p[0] / depth + intr.cx, intr.fy * p[1] / depth + intr.cy];
    Projection {
        pixel,
        depth,
        in_view: intr.contains(pixel),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub pixel: [f64; 2],
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Ray through continuous pixel coordinate `u`; `u` may lie on the far
/// image border.
pub fn pixel_ray(intr: &Intrinsics, pose: &Pose, u: [f64; 2]) -> Result<Ray, CameraError> {
    let inside = (0.0..=intr.width as f64).contains(&u[0]) && (0.0..=intr.height as f64).contains(&u[1]);
    if !inside {
        return Err(CameraError::OutOfBounds(u[0], u[1]));
    }
    Ok(ray_unchecked(intr, pose, u))
}

pub(crate) fn ray_unchecked(intr: &Intrinsics, pose: &Pose, u: [f64; 2]) -> Ray {
    let d = normalize([(u[0] - intr.cx) / intr.fx, (u[1] - intr.cy) / intr.fy, 1.0]);
    Ray {
        origin: pose.translation,
        direction: normalize(pose.rotate(d)),
        pixel: u,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosEncConfig {
    /// Frequencies per scalar; each contributes a sine and a cosine.
    pub num_frequencies: usize,
    /// Distances in this range map linearly to `[-1, 1]`.
    pub distance_range: (f64, f64),
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 6,
            distance_range: (3.0, 80.0),
        }
    }
}

impl PosEncConfig {
    /// Encoded width for `scalars` inputs.
    pub fn width(&self, scalars: usize) -> usize {
        2 * self.num_frequencies * scalars
    }

    pub fn normalize_distance(&self, d: f64) -> f64 {
        let (lo, hi) = self.distance_range;
        2.0 * (d - lo) / (hi - lo) - 1.0
    }
}

pub fn normalize_pixel(intr: &Intrinsics, u: [f64; 2]) -> [f64; 2] {
    [
        2.0 * u[0] / intr.width as f64 - 1.0,
        2.0 * u[1] / intr.height as f64 - 1.0,
    ]
}

/// `(sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v))`
/// appended to `out`.
/// Higher octaves use the double-angle identities.
pub fn posenc_into(v: f64, num_frequencies: usize, out: &mut Vec<f64>) {
    let (mut s, mut c) = (std::f64::consts::PI * v).sin_cos();
    for _ in 0..num_frequencies {
        out.push(s);
        out.push(c);
        (s, c) = (2.0 * s * c, (c - s) * (c + s));
    }
}

pub fn posenc(v: f64, num_frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * num_frequencies);
    posenc_into(v, num_frequencies, &mut out);
    out
}
