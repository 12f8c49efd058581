//! Differentiable point-cloud-to-depth renderer.
//!
//! Rendering runs in three stages, each with an analytic vector–Jacobian
//! product:
//!
//! 1. [`splat_occupancy`] places a scaled, truncated Gaussian at every
//!    camera-frame point inside an orthographic voxel volume and clamps the
//!    summed density to `[0, 1]`.
//! 2. [`ray_termination`] marches each pixel ray front to back and turns
//!    occupancies into termination probabilities `t_d = o_d Π_{j<d}(1 - o_j)`
//!    plus the probability of reaching the background.
//! 3. [`project_depth`] takes the expected normalized depth along each ray.
//!
//! Voxel `(d, h, w)` has its center at continuous voxel coordinates
//! `(w + 0.5, h + 0.5, d + 0.5)`. The Gaussian is evaluated per axis and
//! multiplied, so the truncation window is a box of half-width
//! `truncation_radius`. Each axis factor is tapered to zero over the last
//! `sigma` before the cutoff with a quintic smoothstep, which keeps the
//! kernel twice differentiable at the window edge.

use rayon::prelude::*;

use crate::error::{domain, shape, Result};
use crate::geometry::{world_to_camera, world_to_camera_vjp, CameraPose, PointCloud, Vec3};

/// Resolution and kernel parameters of the renderer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Number of depth slices `D`.
    pub grid_depth: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Gaussian standard deviation in voxel units.
    pub sigma: f64,
    /// Peak density `s` of one splat.
    pub splat_scale: f64,
    /// Half-width of the kernel window in voxel units.
    pub truncation_radius: f64,
    /// Depth assigned to rays that reach the background.
    pub background_depth: f64,
    /// Half-width of the orthographic view volume in world units.
    pub view_extent: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            grid_depth: 32,
            image_width: 32,
            image_height: 32,
            sigma: 1.0,
            splat_scale: 1.0,
            truncation_radius: 3.0,
            background_depth: 1.0,
            view_extent: 1.0,
        }
    }
}

impl RenderConfig {
    /// Cube grid with `n` slices and an `n × n` image.
    pub fn cube(n: usize) -> Self {
        Self {
            grid_depth: n,
            image_width: n,
            image_height: n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_depth == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(domain("render grid dimensions must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(domain("render sigma must be positive"));
        }
        if !(self.truncation_radius >= self.sigma) || !self.truncation_radius.is_finite() {
            return Err(domain("truncation radius must be finite and at least sigma"));
        }
        if !(self.splat_scale > 0.0) || !self.splat_scale.is_finite() {
            return Err(domain("splat scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.background_depth) {
            return Err(domain("background depth must lie in [0, 1]"));
        }
        if !(self.view_extent > 0.0) || !self.view_extent.is_finite() {
            return Err(domain("view extent must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn voxels(&self) -> usize {
        self.grid_depth * self.pixels()
    }

    /// Normalized depth of slice `d` (zero-based): `(d + 0.5) / D`.
    pub fn slice_depth(&self, d: usize) -> f64 {
        (d as f64 + 0.5) / self.grid_depth as f64
    }
}

/// Mapping between camera-frame coordinates and continuous voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewVolume {
    pub extent: f64,
    pub near: f64,
    pub far: f64,
    /// Voxels per world unit along (x, y, z); y is negated (row 0 is the top).
    pub voxels_per_unit: Vec3,
}

impl ViewVolume {
    pub fn new(pose: &CameraPose, cfg: &RenderConfig) -> Self {
        let e = cfg.view_extent;
        Self {
            extent: e,
            near: pose.near,
            far: pose.far,
            voxels_per_unit: [
                cfg.image_width as f64 / (2.0 * e),
                -(cfg.image_height as f64) / (2.0 * e),
                cfg.grid_depth as f64 / (pose.far - pose.near),
            ],
        }
    }

    /// Continuous (column, row, slice) coordinates of a camera-frame point.
    pub fn voxel_coords(&self, c: Vec3) -> Vec3 {
        [
            (c[0] + self.extent) * self.voxels_per_unit[0],
            (c[1] - self.extent) * self.voxels_per_unit[1],
            (c[2] - self.near) * self.voxels_per_unit[2],
        ]
    }

    /// World-units-per-voxel along each axis.
    pub fn voxel_extent(&self) -> Vec3 {
        self.voxels_per_unit.map(|v| 1.0 / v.abs())
    }
}

/// Clamped voxel densities, laid out `[d][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub voxel_extent: Vec3,
}

impl OccupancyGrid {
    pub fn new(depth: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != depth * height * width {
            return Err(shape("occupancy values do not match grid dimensions"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(domain("occupancy values must lie in [0, 1]"));
        }
        Ok(Self {
            depth,
            height,
            width,
            values,
            voxel_extent: [1.0; 3],
        })
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> f64 {
        self.values[(d * self.height + h) * self.width + w]
    }
}

/// Per-voxel ray termination probabilities and per-pixel background mass.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminationVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Normalized depth image; 0 is the near plane and 1 the far plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl DepthImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Per-axis kernel factor and its derivative with respect to the offset.
struct AxisKernel {
    inv_two_var: f64,
    inv_var: f64,
    taper_start: f64,
    radius: f64,
}

impl AxisKernel {
    fn new(cfg: &RenderConfig) -> Self {
        Self {
            inv_two_var: 0.5 / (cfg.sigma * cfg.sigma),
            inv_var: 1.0 / (cfg.sigma * cfg.sigma),
            taper_start: (cfg.truncation_radius - cfg.sigma).max(0.0),
            radius: cfg.truncation_radius,
        }
    }

    fn taper(&self, a: f64) -> (f64, f64) {
        if a <= self.taper_start {
            return (1.0, 0.0);
        }
        let width = self.radius - self.taper_start;
        let x = (a - self.taper_start) / width;
        let s = x * x * x * (x * (6.0 * x - 15.0) + 10.0);
        let ds = 30.0 * x * x * (1.0 - x) * (1.0 - x) / width;
        (1.0 - s, -ds)
    }

    /// Value and derivative with respect to `delta` (point minus center).
    fn eval(&self, delta: f64) -> (f64, f64) {
        let a = delta.abs();
        let g = (-delta * delta * self.inv_two_var).exp();
        let (t, dt) = self.taper(a);
        let sign = if delta < 0.0 { -1.0 } else { 1.0 };
        (g * t, g * (dt * sign - delta * self.inv_var * t))
    }

    /// Voxels along one axis whose centers lie strictly inside the window.
    fn window(&self, coord: f64, len: usize, out: &mut Vec<(usize, f64, f64)>) {
        out.clear();
        let lo = (coord - self.radius - 0.5).ceil().max(0.0);
        let hi = (coord + self.radius - 0.5).floor().min(len as f64 - 1.0);
        if !(lo <= hi) {
            return;
        }
        for i in lo as usize..=hi as usize {
            let delta = coord - (i as f64 + 0.5);
            if delta.abs() < self.radius {
                let (f, df) = self.eval(delta);
                out.push((i, f, df));
            }
        }
    }
}

/// Unclamped density sums.
fn splat_raw(points: &[Vec3], vol: &ViewVolume, cfg: &RenderConfig) -> Vec<f64> {
    let (dd, hh, ww) = (cfg.grid_depth, cfg.image_height, cfg.image_width);
    let kernel = AxisKernel::new(cfg);
    let mut raw = vec![0.0; dd * hh * ww];
    let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for p in points {
        let u = vol.voxel_coords(*p);
        kernel.window(u[0], ww, &mut xs);
        kernel.window(u[1], hh, &mut ys);
        kernel.window(u[2], dd, &mut zs);
        for &(d, fz, _) in &zs {
            for &(h, fy, _) in &ys {
                let fyz = cfg.splat_scale * fz * fy;
                let row = (d * hh + h) * ww;
                for &(w, fx, _) in &xs {
                    raw[row + w] += fyz * fx;
                }
            }
        }
    }
    raw
}

/// Gaussian splatting of camera-frame points into a clamped occupancy grid.
pub fn splat_occupancy(
    camera_cloud: &PointCloud,
    vol: &ViewVolume,
    cfg: &RenderConfig,
) -> OccupancyGrid {
    let raw = splat_raw(camera_cloud.points(), vol, cfg);
    OccupancyGrid {
        depth: cfg.grid_depth,
        height: cfg.image_height,
        width: cfg.image_width,
        values: raw.into_iter().map(|v| v.min(1.0)).collect(),
        voxel_extent: vol.voxel_extent(),
    }
}

/// Voxels whose unclamped density exceeds one, where the occupancy clamp
/// is active and the render is not differentiable across the boundary.
pub fn saturated_voxels(cloud: &PointCloud, pose: &CameraPose, cfg: &RenderConfig) -> Vec<bool> {
    let cam = world_to_camera(cloud, pose);
    let vol = ViewVolume::new(pose, cfg);
    splat_raw(cam.points(), &vol, cfg).into_iter().map(|v| v > 1.0).collect()
}

/// VJP of [`splat_occupancy`] with respect to camera-frame coordinates.
///
/// Voxels where the clamp is active (raw density above one) pass no gradient.
pub fn splat_occupancy_vjp(
    camera_cloud: &PointCloud,
    vol: &ViewVolume,
    cfg: &RenderConfig,
    grad_occupancy: &[f64],
) -> Vec<Vec3> {
    let raw = splat_raw(camera_cloud.points(), vol, cfg);
    splat_vjp_with_raw(camera_cloud.points(), vol, cfg, &raw, grad_occupancy)
}

fn splat_vjp_with_raw(
    points: &[Vec3],
    vol: &ViewVolume,
    cfg: &RenderConfig,
    raw: &[f64],
    grad_occupancy: &[f64],
) -> Vec<Vec3> {
    let (dd, hh, ww) = (cfg.grid_depth, cfg.image_height, cfg.image_width);
    let kernel = AxisKernel::new(cfg);
    let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    let s = cfg.splat_scale;
    points
        .iter()
        .map(|p| {
            let u = vol.voxel_coords(*p);
            kernel.window(u[0], ww, &mut xs);
            kernel.window(u[1], hh, &mut ys);
            kernel.window(u[2], dd, &mut zs);
            let mut g = [0.0; 3];
            for &(d, fz, dfz) in &zs {
                for &(h, fy, dfy) in &ys {
                    let row = (d * hh + h) * ww;
                    for &(w, fx, dfx) in &xs {
                        let idx = row + w;
                        if raw[idx] > 1.0 {
                            continue;
                        }
                        let up = grad_occupancy[idx] * s;
                        if up == 0.0 {
                            continue;
                        }
                        g[0] += up * dfx * fy * fz;
                        g[1] += up * fx * dfy * fz;
                        g[2] += up * fx * fy * dfz;
                    }
                }
            }
            // voxel coordinates are affine in camera coordinates
            [
                g[0] * vol.voxels_per_unit[0],
                g[1] * vol.voxels_per_unit[1],
                g[2] * vol.voxels_per_unit[2],
            ]
        })
        .collect()
}

/// Front-to-back ray termination probabilities for every pixel ray.
pub fn ray_termination(grid: &OccupancyGrid) -> TerminationVolume {
    let plane = grid.height * grid.width;
    let mut values = vec![0.0; grid.values.len()];
    let mut residual = vec![1.0; plane];
    for (pix, res) in residual.iter_mut().enumerate() {
        let mut transmittance = 1.0;
        for d in 0..grid.depth {
            let o = grid.values[d * plane + pix];
            values[d * plane + pix] = o * transmittance;
            transmittance *= 1.0 - o;
        }
        *res = transmittance;
    }
    TerminationVolume {
        depth: grid.depth,
        height: grid.height,
        width: grid.width,
        values,
        residual,
    }
}

/// VJP of [`ray_termination`] with respect to occupancies.
///
/// Uses the backward recursion `V_{d-1} = g_d o_d + (1 - o_d) V_d` with
/// `V_{D-1} = g_residual`, giving `∂L/∂o_d = T_d (g_d - V_d)` where `T_d` is
/// the transmittance in front of slice `d`. No division by `1 - o_d`.
pub fn ray_termination_vjp(
    grid: &OccupancyGrid,
    grad_values: &[f64],
    grad_residual: &[f64],
) -> Vec<f64> {
    let plane = grid.height * grid.width;
    let mut out = vec![0.0; grid.values.len()];
    let mut trans = vec![0.0; grid.depth];
    for pix in 0..plane {
        let mut t = 1.0;
        for (d, slot) in trans.iter_mut().enumerate() {
            *slot = t;
            t *= 1.0 - grid.values[d * plane + pix];
        }
        let mut after = grad_residual[pix];
        for d in (0..grid.depth).rev() {
            let idx = d * plane + pix;
            let o = grid.values[idx];
            let g = grad_values[idx];
            out[idx] = trans[d] * (g - after);
            after = g * o + (1.0 - o) * after;
        }
    }
    out
}

/// Expected normalized depth per pixel.
pub fn project_depth(term: &TerminationVolume, cfg: &RenderConfig) -> DepthImage {
    let plane = term.height * term.width;
    let pixels = (0..plane)
        .map(|pix| {
            let mut acc = 0.0;
            for d in 0..term.depth {
                acc += term.values[d * plane + pix] * cfg.slice_depth(d);
            }
            acc + term.residual[pix] * cfg.background_depth
        })
        .collect();
    DepthImage {
        height: term.height,
        width: term.width,
        pixels,
    }
}

/// VJP of [`project_depth`]: returns (∂L/∂t, ∂L/∂residual).
pub fn project_depth_vjp(cfg: &RenderConfig, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = upstream.len();
    let mut gt = vec![0.0; cfg.grid_depth * plane];
    for d in 0..cfg.grid_depth {
        let z = cfg.slice_depth(d);
        for pix in 0..plane {
            gt[d * plane + pix] = upstream[pix] * z;
        }
    }
    let gr = upstream.iter().map(|g| g * cfg.background_depth).collect();
    (gt, gr)
}

/// Renders the expected-depth image of a world-space cloud from one pose.
pub fn render(cloud: &PointCloud, pose: &CameraPose, cfg: &RenderConfig) -> DepthImage {
    let cam = world_to_camera(cloud, pose);
    let vol = ViewVolume::new(pose, cfg);
    let grid = splat_occupancy(&cam, &vol, cfg);
    project_depth(&ray_termination(&grid), cfg)
}

/// Depth image plus the per-pixel coverage `1 - residual`.
pub fn render_with_alpha(
    cloud: &PointCloud,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> (DepthImage, Vec<f64>) {
    let cam = world_to_camera(cloud, pose);
    let vol = ViewVolume::new(pose, cfg);
    let grid = splat_occupancy(&cam, &vol, cfg);
    let term = ray_termination(&grid);
    let alpha = term.residual.iter().map(|r| 1.0 - r).collect();
    (project_depth(&term, cfg), alpha)
}

/// Renders every pose; images come back in pose order.
pub fn render_views(cloud: &PointCloud, poses: &[CameraPose], cfg: &RenderConfig) -> Vec<DepthImage> {
    poses.par_iter().map(|p| render(cloud, p, cfg)).collect()
}

/// Gradient of `⟨upstream, render(cloud)⟩` with respect to world coordinates.
pub fn render_vjp(
    cloud: &PointCloud,
    pose: &CameraPose,
    cfg: &RenderConfig,
    upstream: &[f64],
) -> Result<Vec<Vec3>> {
    if upstream.len() != cfg.pixels() {
        return Err(shape(format!(
            "upstream has {} entries, image has {}",
            upstream.len(),
            cfg.pixels()
        )));
    }
    if upstream.iter().all(|g| *g == 0.0) {
        return Ok(vec![[0.0; 3]; cloud.len()]);
    }
    let cam = world_to_camera(cloud, pose);
    let vol = ViewVolume::new(pose, cfg);
    let raw = splat_raw(cam.points(), &vol, cfg);
    let grid = OccupancyGrid {
        depth: cfg.grid_depth,
        height: cfg.image_height,
        width: cfg.image_width,
        values: raw.iter().map(|v| v.min(1.0)).collect(),
        voxel_extent: vol.voxel_extent(),
    };
    let (gt, gr) = project_depth_vjp(cfg, upstream);
    let go = ray_termination_vjp(&grid, &gt, &gr);
    let gcam = splat_vjp_with_raw(cam.points(), &vol, cfg, &raw, &go);
    Ok(world_to_camera_vjp(pose, &gcam))
}

/// Sums [`render_vjp`] over several poses in pose order.
pub fn render_views_vjp(
    cloud: &PointCloud,
    poses: &[CameraPose],
    cfg: &RenderConfig,
    upstream: &[Vec<f64>],
) -> Result<Vec<Vec3>> {
    if upstream.len() != poses.len() {
        return Err(shape("one upstream image per pose is required"));
    }
    let per_pose: Vec<Vec<Vec3>> = poses
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(p, u)| render_vjp(cloud, p, cfg, u))
        .collect::<Result<_>>()?;
    let mut total = vec![[0.0; 3]; cloud.len()];
    for grads in per_pose {
        for (t, g) in total.iter_mut().zip(grads) {
            t[0] += g[0];
            t[1] += g[1];
            t[2] += g[2];
        }
    }
    Ok(total)
}

/// 8-bit grayscale PNG of a depth image (`round(pixel * 255)`).
pub fn write_depth_png(image: &DepthImage, path: &std::path::Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    crate::data::io::write_png_u8(path, image.width, image.height, 1, &bytes)
}

pub const RAW_MAGIC: &[u8; 4] = b"DRPT";
pub const RAW_VERSION: u32 = 1;

/// Raw little-endian float32 depth image with a 16-byte header.
pub fn encode_depth_raw(image: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * image.pixels.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for p in &image.pixels {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth_raw(bytes: &[u8]) -> Result<DepthImage> {
    use crate::error::Error;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("missing DRPT header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RAW_VERSION {
        return Err(Error::Version {
            found: version,
            expected: RAW_VERSION,
        });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            4 * h * w,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DepthImage {
        height: h,
        width: w,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_camera_poses;

    fn identity_pose() -> CameraPose {
        CameraPose::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, -2.0],
            1.0,
            3.0,
        )
        .unwrap()
    }

    fn grid_from(values: Vec<f64>) -> OccupancyGrid {
        OccupancyGrid::new(values.len(), 1, 1, values).unwrap()
    }

    #[test]
    fn empty_cloud_splats_to_zero_and_renders_background() {
        let cfg = RenderConfig::cube(8);
        let pose = identity_pose();
        let vol = ViewVolume::new(&pose, &cfg);
        let grid = splat_occupancy(&PointCloud::empty(), &vol, &cfg);
        assert!(grid.values.iter().all(|v| *v == 0.0));
        let img = render(&PointCloud::empty(), &pose, &cfg);
        assert!(img.pixels.iter().all(|p| *p == cfg.background_depth));
    }

    /// Camera-frame point sitting at continuous voxel coordinates `u`.
    fn camera_point(vol: &ViewVolume, u: Vec3) -> Vec3 {
        [
            u[0] / vol.voxels_per_unit[0] - vol.extent,
            u[1] / vol.voxels_per_unit[1] + vol.extent,
            u[2] / vol.voxels_per_unit[2] + vol.near,
        ]
    }

    #[test]
    fn point_at_voxel_center_saturates_and_gaussian_at_one_sigma() {
        let cfg = RenderConfig::cube(8);
        let pose = identity_pose();
        let vol = ViewVolume::new(&pose, &cfg);
        let p = camera_point(&vol, [3.5, 4.5, 2.5]);
        let grid = splat_occupancy(&PointCloud::new(vec![p]).unwrap(), &vol, &cfg);
        assert!((grid.at(2, 4, 3) - 1.0).abs() < 1e-12);
        // neighbour one voxel away along x sits at distance sigma = 1
        assert!((grid.at(2, 4, 4) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((grid.at(2, 4, 4) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn termination_examples() {
        let t = ray_termination(&grid_from(vec![0.0, 0.0, 0.0]));
        assert_eq!(t.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(t.residual, vec![1.0]);
        let t = ray_termination(&grid_from(vec![1.0, 0.7]));
        assert_eq!(t.values, vec![1.0, 0.0]);
        assert_eq!(t.residual, vec![0.0]);
        let t = ray_termination(&grid_from(vec![0.5, 0.5]));
        assert_eq!(t.values, vec![0.5, 0.25]);
        assert_eq!(t.residual, vec![0.25]);
    }

    #[test]
    fn projection_examples() {
        let cfg = RenderConfig {
            grid_depth: 2,
            image_width: 1,
            image_height: 1,
            ..RenderConfig::default()
        };
        let term = TerminationVolume {
            depth: 2,
            height: 1,
            width: 1,
            values: vec![0.5, 0.25],
            residual: vec![0.25],
        };
        assert!((project_depth(&term, &cfg).pixels[0] - 0.5625).abs() < 1e-15);
        let point_mass = TerminationVolume {
            values: vec![1.0, 0.0],
            residual: vec![0.0],
            ..term.clone()
        };
        assert_eq!(project_depth(&point_mass, &cfg).pixels[0], 0.25);
        let empty = TerminationVolume {
            values: vec![0.0, 0.0],
            residual: vec![1.0],
            ..term
        };
        assert_eq!(project_depth(&empty, &cfg).pixels[0], 1.0);
    }

    #[test]
    fn far_point_gets_zero_gradient() {
        let cfg = RenderConfig {
            grid_depth: 16,
            image_width: 8,
            image_height: 8,
            ..RenderConfig::default()
        };
        let pose = generate_camera_poses(2.0).unwrap()[0];
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.0], [40.0, 40.0, 40.0]]).unwrap();
        let up = vec![1.0; 64];
        let g = render_vjp(&cloud, &pose, &cfg, &up).unwrap();
        assert_eq!(g[1], [0.0; 3]);
        assert!(g[0].iter().any(|v| *v != 0.0));
        let zero = render_vjp(&cloud, &pose, &cfg, &vec![0.0; 64]).unwrap();
        assert!(zero.iter().all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn kernel_is_smooth_at_window_edge() {
        let cfg = RenderConfig::default();
        let k = AxisKernel::new(&cfg);
        let (v, d) = k.eval(cfg.truncation_radius - 1e-9);
        assert!(v.abs() < 1e-12 && d.abs() < 1e-12);
        let (v, _) = k.eval(cfg.sigma);
        assert_eq!(v, (-0.5f64).exp());
    }

    #[test]
    fn raw_format_round_trip() {
        let img = DepthImage {
            height: 2,
            width: 3,
            pixels: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
        };
        let bytes = encode_depth_raw(&img);
        assert_eq!(&bytes[..4], b"DRPT");
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_depth_raw(&bytes).unwrap(), img);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_depth_raw(&bad),
            Err(crate::Error::Version { found: 2, .. })
        ));
    }
}
