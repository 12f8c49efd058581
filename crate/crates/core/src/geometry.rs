//! Point clouds, camera poses and the fixed 32-view rendering rig.

use crate::error::{domain, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// An ordered set of 3D points.
///
/// Coordinates are always finite. An empty cloud is representable because
/// the renderer accepts it; most other operations reject it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(domain(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, p| add(acc, *p));
        scale(s, 1.0 / n)
    }

    /// Flattened `x0 y0 z0 x1 ...` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(domain("flat coordinate buffer length is not a multiple of 3"));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| add(*p, offset)).collect(),
        }
    }
}

/// Rigid camera transform plus the depth range of its orthographic volume.
///
/// Rows of `rotation` are the camera's right, up and forward axes expressed
/// in world coordinates, so `rotation * (p - center)` maps world points into
/// the camera frame with `z` pointing along the view direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3, near: f64, far: f64) -> Result<Self> {
        let pose = Self {
            rotation,
            center,
            near,
            far,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(domain("camera requires 0 < near < far"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr - expect).abs() > 1e-9 {
                    return Err(domain("camera rotation is not orthonormal"));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-9 {
            return Err(domain("camera rotation has determinant != +1"));
        }
        Ok(())
    }

    /// Unit view direction (the camera's forward axis in world coordinates).
    pub fn view_direction(&self) -> Vec3 {
        self.rotation[2]
    }

    /// Camera looking at the origin from `center`, with `up` as a hint.
    pub fn look_at_origin(center: Vec3, up: Vec3, near: f64, far: f64) -> Result<Self> {
        let forward = normalize(scale(center, -1.0));
        let mut up_hint = up;
        if cross(up_hint, forward).iter().all(|c| c.abs() < 1e-12) {
            up_hint = [0.0, 1.0, 0.0];
        }
        let right = normalize(cross(up_hint, forward));
        let true_up = cross(forward, right);
        Self::new([right, true_up, forward], center, near, far)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        mat_vec(&self.rotation, sub(p, self.center))
    }

    pub fn to_world(&self, c: Vec3) -> Vec3 {
        add(mat_t_vec(&self.rotation, c), self.center)
    }
}

fn det3(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Number of views in the rendering rig.
pub const NUM_POSES: usize = 32;

/// The fixed rig: three axis rings of eight views each plus eight
/// cube-diagonal views, all looking at the origin from distance `radius`.
///
/// Poses `0..8`, `8..16`, `16..24` ring the x, y and z axes (view directions
/// at azimuths 0°, 45°, …, 315° in the plane orthogonal to the axis, up
/// vector along the axis); poses `24..32` look inward from the corners
/// `(±1, ±1, ±1)/√3` with world +z as up. Near and far planes sit at
/// `radius / 2` and `3 radius / 2`.
pub fn generate_camera_poses(radius: f64) -> Result<Vec<CameraPose>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(domain(format!("camera radius must be positive, got {radius}")));
    }
    let (near, far) = (0.5 * radius, 1.5 * radius);
    let axes: [(Vec3, Vec3, Vec3); 3] = [
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    ];
    let mut poses = Vec::with_capacity(NUM_POSES);
    for (axis, e1, e2) in axes {
        for step in 0..8 {
            let az = step as f64 * std::f64::consts::FRAC_PI_4;
            let forward = add(scale(e1, az.cos()), scale(e2, az.sin()));
            let right = cross(axis, forward);
            let up = cross(forward, right);
            let center = scale(forward, -radius);
            poses.push(CameraPose::new([right, up, forward], center, near, far)?);
        }
    }
    let inv_sqrt3 = 1.0 / 3f64.sqrt();
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                let center = scale([sx, sy, sz], radius * inv_sqrt3);
                poses.push(CameraPose::look_at_origin(center, [0.0, 0.0, 1.0], near, far)?);
            }
        }
    }
    Ok(poses)
}

/// Maps every point into the camera frame: `rotation * (p - center)`.
pub fn world_to_camera(cloud: &PointCloud, pose: &CameraPose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.to_camera(*p)).collect(),
    }
}

/// Inverse of [`world_to_camera`].
pub fn camera_to_world(cloud: &PointCloud, pose: &CameraPose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|c| pose.to_world(*c)).collect(),
    }
}

/// Pulls camera-frame cotangents back to world coordinates (`Rᵀ g`).
pub fn world_to_camera_vjp(pose: &CameraPose, grad_camera: &[Vec3]) -> Vec<Vec3> {
    grad_camera
        .iter()
        .map(|g| mat_t_vec(&pose.rotation, *g))
        .collect()
}

/// Result of [`normalize_cloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCloud {
    pub cloud: PointCloud,
    pub centroid: Vec3,
    /// Multiplier applied after centering (`1 / max distance`).
    pub scale: f64,
    /// All input points coincided; the output is all zeros with scale 1.
    pub degenerate: bool,
}

/// Centers a cloud on its centroid and scales it into the unit ball.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<NormalizedCloud> {
    if cloud.is_empty() {
        return Err(domain("cannot normalize an empty cloud"));
    }
    let centroid = cloud.centroid();
    let centered: Vec<Vec3> = cloud.points.iter().map(|p| sub(*p, centroid)).collect();
    let max_dist = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    let tol = 1e-12 * (1.0 + norm(centroid));
    if max_dist <= tol {
        return Ok(NormalizedCloud {
            cloud: PointCloud {
                points: vec![[0.0; 3]; cloud.len()],
            },
            centroid,
            scale: 1.0,
            degenerate: true,
        });
    }
    let s = 1.0 / max_dist;
    Ok(NormalizedCloud {
        cloud: PointCloud {
            points: centered.into_iter().map(|p| scale(p, s)).collect(),
        },
        centroid,
        scale: s,
        degenerate: false,
    })
}
