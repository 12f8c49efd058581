//! Triplet construction, synthetic shapes, augmentations and file ingestion.

pub mod io;

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::geometry::{
    generate_camera_poses, mat_vec, normalize_cloud, Mat3, PointCloud, Vec3, NUM_POSES,
};
use crate::renderer::{render_with_alpha, RenderConfig};
use crate::rng::{stream, tag};

/// Points stored per object.
pub const STORED_POINTS: usize = 2048;
/// Points fed to the encoder.
pub const ENCODER_POINTS: usize = 1024;
/// Side length of stored RGB images.
pub const RGB_SIZE: usize = 224;

// Camera distance shared by the pose rig everywhere in the pipeline.
pub const CAMERA_RADIUS: f64 = 2.0;

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(domain(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Channel-major copy (`C × H × W`), the layout convolutions consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    /// Gray images are replicated to three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Result<Image> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => Ok(Image {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self.data.iter().flat_map(|v| [*v; 3]).collect(),
            }),
            c => Err(shape(format!("cannot convert {c}-channel image to RGB"))),
        }
    }

    /// Bilinear resampling of the window starting at `(top, left)` with the
    /// given size onto a `height × width` grid. Samples sit at pixel centers,
    /// so an unscaled window reproduces its pixels exactly.
    pub fn resample(
        &self,
        top: f64,
        left: f64,
        win_h: f64,
        win_w: f64,
        height: usize,
        width: usize,
    ) -> Image {
        let sy = win_h / height as f64;
        let sx = win_w / width as f64;
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        for r in 0..height {
            let y = (top + (r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = clampi(y.floor(), self.height);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = y - y0 as f64;
            for col in 0..width {
                let x = (left + (col as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = clampi(x.floor(), self.width);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = x - x0 as f64;
                for ch in 0..c {
                    let a = self.at(y0, x0, ch) * (1.0 - fx) + self.at(y0, x1, ch) * fx;
                    let b = self.at(y1, x0, ch) * (1.0 - fx) + self.at(y1, x1, ch) * fx;
                    data.push((a * (1.0 - fy) + b * fy).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }

    pub fn resized(&self, height: usize, width: usize) -> Image {
        self.resample(0.0, 0.0, self.height as f64, self.width as f64, height, width)
    }

    pub fn flipped_horizontal(&self) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for col in (0..self.width).rev() {
                let i = (r * self.width + col) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Image { data, ..*self }
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

/// Parametric families of the synthetic dataset; the discriminant is the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Plane,
    TwoBox,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::Plane,
        ShapeFamily::TwoBox,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    /// Base color used when synthesizing RGB views of this family.
    pub fn color(self) -> [f64; 3] {
        match self {
            ShapeFamily::Sphere => [0.85, 0.2, 0.2],
            ShapeFamily::Box => [0.2, 0.7, 0.25],
            ShapeFamily::Cylinder => [0.2, 0.35, 0.9],
            ShapeFamily::Torus => [0.9, 0.75, 0.15],
            ShapeFamily::Plane => [0.7, 0.25, 0.8],
            ShapeFamily::TwoBox => [0.15, 0.75, 0.8],
        }
    }
}

/// Local-frame parameters of one synthetic instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeParams {
    Sphere { radius: f64 },
    /// Surface of an axis-aligned box with the given half extents.
    Box { half: Vec3 },
    /// Closed cylinder around the local z axis.
    Cylinder { radius: f64, half_height: f64 },
    /// Torus around the local z axis.
    Torus { major: f64, minor: f64 },
    /// Rectangle in the local xy plane.
    Plane { half_x: f64, half_y: f64 },
    /// Two box surfaces touching at the origin, `a` on −x and `b` on +x.
    TwoBox { a: Vec3, b: Vec3 },
}

impl ShapeParams {
    pub fn family(&self) -> ShapeFamily {
        match self {
            ShapeParams::Sphere { .. } => ShapeFamily::Sphere,
            ShapeParams::Box { .. } => ShapeFamily::Box,
            ShapeParams::Cylinder { .. } => ShapeFamily::Cylinder,
            ShapeParams::Torus { .. } => ShapeFamily::Torus,
            ShapeParams::Plane { .. } => ShapeFamily::Plane,
            ShapeParams::TwoBox { .. } => ShapeFamily::TwoBox,
        }
    }
}

/// One synthetic object: world points are `rotation · local`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthShape {
    pub cloud: PointCloud,
    pub label: usize,
    pub params: ShapeParams,
    pub rotation: Mat3,
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn sample_box_surface(rng: &mut impl Rng, h: Vec3, center: Vec3) -> Vec3 {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = [0.0; 3];
    for (k, slot) in p.iter_mut().enumerate() {
        *slot = if k == axis {
            if rng.random::<bool>() {
                h[k]
            } else {
                -h[k]
            }
        } else {
            rng.random_range(-h[k]..=h[k])
        };
    }
    [p[0] + center[0], p[1] + center[1], p[2] + center[2]]
}

fn sample_local(params: &ShapeParams, i: usize, rng: &mut impl Rng) -> Vec3 {
    match *params {
        ShapeParams::Sphere { radius } => {
            let v: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [radius * v[0] / n, radius * v[1] / n, radius * v[2] / n]
        }
        ShapeParams::Box { half } => sample_box_surface(rng, half, [0.0; 3]),
        ShapeParams::Cylinder {
            radius,
            half_height,
        } => {
            let side = 4.0 * PI * radius * half_height;
            let cap = PI * radius * radius;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random::<f64>() * (side + 2.0 * cap) < side {
                let z = rng.random_range(-half_height..=half_height);
                [radius * theta.cos(), radius * theta.sin(), z]
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { half_height } else { -half_height };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeParams::Torus { major, minor } => loop {
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            let ring = major + minor * v.cos();
            // rejection makes the density proportional to surface area
            if rng.random::<f64>() * (major + minor) <= ring {
                break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
            }
        },
        ShapeParams::Plane { half_x, half_y } => [
            rng.random_range(-half_x..=half_x),
            rng.random_range(-half_y..=half_y),
            0.0,
        ],
        ShapeParams::TwoBox { a, b } => {
            if i % 2 == 0 {
                sample_box_surface(rng, a, [-a[0], 0.0, 0.0])
            } else {
                sample_box_surface(rng, b, [b[0], 0.0, 0.0])
            }
        }
    }
}

fn random_params(family: ShapeFamily, rng: &mut impl Rng) -> ShapeParams {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match family {
        ShapeFamily::Sphere => ShapeParams::Sphere { radius: u(0.5, 1.0) },
        ShapeFamily::Box => ShapeParams::Box {
            half: [u(0.25, 0.8), u(0.25, 0.8), u(0.25, 0.8)],
        },
        ShapeFamily::Cylinder => ShapeParams::Cylinder {
            radius: u(0.25, 0.6),
            half_height: u(0.4, 0.9),
        },
        ShapeFamily::Torus => ShapeParams::Torus {
            major: u(0.5, 0.75),
            minor: u(0.12, 0.25),
        },
        ShapeFamily::Plane => ShapeParams::Plane {
            half_x: u(0.4, 0.9),
            half_y: u(0.4, 0.9),
        },
        ShapeFamily::TwoBox => ShapeParams::TwoBox {
            a: [u(0.2, 0.45), u(0.2, 0.45), u(0.2, 0.45)],
            b: [u(0.2, 0.45), u(0.2, 0.45), u(0.2, 0.45)],
        },
    }
}

/// `n` synthetic objects cycling through the families in label order, each
/// with random size parameters and a uniformly random rotation.
pub fn synth_shapes(n: usize, seed: u64) -> Vec<SynthShape> {
    (0..n)
        .map(|i| {
            let family = ShapeFamily::ALL[i % ShapeFamily::ALL.len()];
            let mut rng = stream(seed, &[tag::SYNTH, i as u64]);
            let params = random_params(family, &mut rng);
            let rotation = random_rotation(&mut rng);
            let points = (0..STORED_POINTS)
                .map(|k| mat_vec(&rotation, sample_local(&params, k, &mut rng)))
                .collect();
            SynthShape {
                cloud: PointCloud::new(points).expect("finite synthetic points"),
                label: family.label(),
                params,
                rotation,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Triplets

/// A point cloud with its paired RGB view and the index of its depth view.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub object_id: u64,
    pub cloud: PointCloud,
    pub rgb: Image,
    pub depth_view_index: usize,
}

impl Triplet {
    pub fn new(object_id: u64, cloud: PointCloud, rgb: Image, depth_view_index: usize) -> Result<Self> {
        if cloud.len() != STORED_POINTS {
            return Err(domain(format!(
                "triplet cloud has {} points, expected {STORED_POINTS}",
                cloud.len()
            )));
        }
        if (rgb.height, rgb.width, rgb.channels) != (RGB_SIZE, RGB_SIZE, 3) {
            return Err(domain(format!(
                "triplet image is {}x{}x{}, expected {RGB_SIZE}x{RGB_SIZE}x3",
                rgb.height, rgb.width, rgb.channels
            )));
        }
        if depth_view_index >= NUM_POSES {
            return Err(domain(format!("depth view index {depth_view_index} out of range")));
        }
        Ok(Self {
            object_id,
            cloud,
            rgb,
            depth_view_index,
        })
    }
}

/// Where a triplet's RGB view comes from.
#[derive(Clone, Debug)]
pub enum RgbSource {
    /// A loaded image, resized to 224×224 (gray is replicated to RGB).
    Image(Image),
    /// A shaded render of the cloud from a random rig pose.
    Synthesize { base_color: [f64; 3] },
    Missing,
}

/// Seeded uniform subsample of `n` points, kept in their original order.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n > cloud.len() {
        return Err(domain(format!("cannot take {n} of {} points", cloud.len())));
    }
    let mut rng = stream(seed, &[tag::SUBSAMPLE]);
    let mut idx = index::sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.iter().map(|&i| cloud.points()[i]).collect())
}

/// The fixed 1024-point encoder input of an object.
pub fn encoder_input(triplet: &Triplet, seed: u64) -> Result<PointCloud> {
    subsample(
        &triplet.cloud,
        ENCODER_POINTS,
        crate::rng::derive_seed(seed, &[triplet.object_id]),
    )
}

/// Renders a Lambert-shaded RGB view of a cloud on a white background.
///
/// The cloud is normalized into the unit ball, rendered at a quarter of the
/// output size, shaded from depth-derived normals and bilinearly upsampled.
pub fn synthesize_rgb(cloud: &PointCloud, base_color: [f64; 3], view: usize, size: usize) -> Result<Image> {
    let poses = generate_camera_poses(CAMERA_RADIUS)?;
    let pose = poses
        .get(view)
        .ok_or_else(|| domain(format!("view {view} out of range")))?;
    let norm = normalize_cloud(cloud)?;
    let low = (size / 4).max(8);
    let cfg = RenderConfig {
        grid_depth: 32,
        image_width: low,
        image_height: low,
        ..RenderConfig::default()
    };
    let (depth, alpha) = render_with_alpha(&norm.cloud, pose, &cfg);
    let pixel = 2.0 * cfg.view_extent / low as f64;
    let depth_scale = pose.far - pose.near;
    let light = {
        let l = [-0.3, 0.4, -1.0];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]) as f64;
        let n = n.sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, low as isize - 1) as usize;
        let c = c.clamp(0, low as isize - 1) as usize;
        depth.at(r, c)
    };
    let mut data = Vec::with_capacity(low * low * 3);
    for r in 0..low as isize {
        for c in 0..low as isize {
            let fx = (at(r, c + 1) - at(r, c - 1)) * 0.5 * depth_scale / pixel;
            let fy = -(at(r + 1, c) - at(r - 1, c)) * 0.5 * depth_scale / pixel;
            let n = (fx * fx + fy * fy + 1.0).sqrt();
            let lambert = ((fx * light[0] + fy * light[1] - light[2]) / n).max(0.0);
            let shade = 0.35 + 0.65 * lambert;
            let a = alpha[r as usize * low + c as usize].clamp(0.0, 1.0);
            for base in base_color {
                data.push((a * base * shade + (1.0 - a)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image::new(low, low, 3, data)?.resized(size, size))
}

/// Pairs a cloud with an RGB view and a random depth view.
///
/// Clouds with more than 2048 points are subsampled to 2048.
pub fn make_triplet(object_id: u64, cloud: &PointCloud, source: RgbSource, seed: u64) -> Result<Triplet> {
    if cloud.len() < STORED_POINTS {
        return Err(domain(format!(
            "object {object_id} has {} points, at least {STORED_POINTS} are required",
            cloud.len()
        )));
    }
    let stored = if cloud.len() == STORED_POINTS {
        cloud.clone()
    } else {
        subsample(cloud, STORED_POINTS, crate::rng::derive_seed(seed, &[object_id]))?
    };
    let mut rng = stream(seed, &[tag::TRIPLET, object_id]);
    let depth_view_index = rng.random_range(0..NUM_POSES);
    let rgb_view = rng.random_range(0..NUM_POSES);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    let rgb = match source {
        RgbSource::Image(img) => img.to_rgb()?.resized(RGB_SIZE, RGB_SIZE),
        RgbSource::Synthesize { base_color } => {
            let color = std::array::from_fn(|k| (base_color[k] * jitter[k]).clamp(0.0, 1.0));
            synthesize_rgb(&stored, color, rgb_view, RGB_SIZE)?
        }
        RgbSource::Missing => {
            return Err(domain(format!(
                "object {object_id} has no RGB image and synthesis is disabled"
            )))
        }
    };
    Triplet::new(object_id, stored, rgb, depth_view_index)
}

/// Synthetic shapes paired with synthesized RGB views.
pub fn synth_dataset(n: usize, seed: u64) -> Result<Vec<Triplet>> {
    synth_shapes(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let color = ShapeFamily::ALL[s.label].color();
            make_triplet(i as u64, &s.cloud, RgbSource::Synthesize { base_color: color }, seed)
        })
        .collect()
}

/// Triplets from a manifest; objects without an image get a neutral synthetic view.
pub fn load_dataset(manifest: &Path, seed: u64) -> Result<Vec<Triplet>> {
    io::load_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let cloud = io::load_xyz(&entry.cloud_path)?;
            let source = match &entry.rgb_path {
                Some(p) => RgbSource::Image(io::load_png(p)?),
                None => RgbSource::Synthesize {
                    base_color: [0.6, 0.6, 0.6],
                },
            };
            make_triplet(i as u64, &cloud, source, seed)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Augmentations

/// Default per-channel jitter strength.
pub const RGB_JITTER: f64 = 0.4;
pub const CROP_AREA_RANGE: (f64, f64) = (0.6, 1.0);

/// Concrete parameters of one RGB augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgbAugment {
    /// Fraction of the image area kept by the square crop.
    pub crop_fraction: f64,
    /// Crop origin as fractions of the free margin, in `[0, 1]`.
    pub crop_offset: (f64, f64),
    pub jitter: [f64; 3],
    pub flip: bool,
}

impl RgbAugment {
    pub fn identity() -> Self {
        Self {
            crop_fraction: 1.0,
            crop_offset: (0.0, 0.0),
            jitter: [1.0; 3],
            flip: false,
        }
    }

    pub fn sample(strength: f64, rng: &mut impl Rng) -> Self {
        let crop_fraction = rng.random_range(CROP_AREA_RANGE.0..=CROP_AREA_RANGE.1);
        let crop_offset = (rng.random::<f64>(), rng.random::<f64>());
        let s = strength.abs();
        let jitter = std::array::from_fn(|_| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 });
        let flip = rng.random::<bool>();
        Self {
            crop_fraction,
            crop_offset,
            jitter,
            flip,
        }
    }

    /// Crop and resize back to the input size, jitter channels, then flip.
    pub fn apply(&self, image: &Image) -> Image {
        let side = self.crop_fraction.clamp(0.0, 1.0).sqrt();
        let (wh, ww) = (side * image.height as f64, side * image.width as f64);
        let top = self.crop_offset.0 * (image.height as f64 - wh);
        let left = self.crop_offset.1 * (image.width as f64 - ww);
        let mut out = image.resample(top, left, wh, ww, image.height, image.width);
        let c = out.channels;
        for px in out.data.chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = (*v * self.jitter[k % 3]).clamp(0.0, 1.0);
            }
        }
        if self.flip {
            out = out.flipped_horizontal();
        }
        out
    }
}

pub fn augment_rgb(image: &Image, strength: f64, seed: u64) -> Image {
    RgbAugment::sample(strength, &mut stream(seed, &[tag::AUG_RGB])).apply(image)
}

pub const SCALE_RANGE: (f64, f64) = (2.0 / 3.0, 1.5);
pub const TRANSLATE_RANGE: f64 = 0.2;

/// Uniform scaling about the origin followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudAugment {
    pub scale: f64,
    pub translation: Vec3,
}

impl CloudAugment {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let translation = std::array::from_fn(|_| rng.random_range(-TRANSLATE_RANGE..=TRANSLATE_RANGE));
        Self { scale, translation }
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let pts = cloud
            .points()
            .iter()
            .map(|p| std::array::from_fn(|k| p[k] * self.scale + self.translation[k]))
            .collect();
        PointCloud::new(pts).expect("affine image of a finite cloud")
    }
}

pub fn augment_cloud(cloud: &PointCloud, seed: u64) -> PointCloud {
    CloudAugment::sample(&mut stream(seed, &[tag::AUG_A])).apply(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat_t_vec, norm};

    #[test]
    fn sphere_points_lie_on_the_radius() {
        for s in synth_shapes(12, 3) {
            assert_eq!(s.cloud.len(), STORED_POINTS);
            if let ShapeParams::Sphere { radius } = s.params {
                for p in s.cloud.points() {
                    assert!((norm(*p) - radius).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn box_points_stay_within_half_extents() {
        for s in synth_shapes(12, 4) {
            if let ShapeParams::Box { half } = s.params {
                for p in s.cloud.points() {
                    let l = mat_t_vec(&s.rotation, *p);
                    for k in 0..3 {
                        assert!(l[k].abs() <= half[k] + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_covers_families() {
        let a = synth_shapes(6, 9);
        assert_eq!(a, synth_shapes(6, 9));
        assert_ne!(a[0].cloud, synth_shapes(6, 10)[0].cloud);
        let labels: Vec<usize> = a.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn triplets_satisfy_their_invariants() {
        let data = synth_dataset(3, 5).unwrap();
        for (i, t) in data.iter().enumerate() {
            assert_eq!(t.object_id, i as u64);
            assert!(t.depth_view_index < NUM_POSES);
            assert_eq!((t.rgb.height(), t.rgb.width(), t.rgb.channels()), (224, 224, 3));
            assert!(t.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // the object is visible against the white background
            assert!(t.rgb.data().iter().any(|v| *v < 0.9));
        }
        assert_eq!(data, synth_dataset(3, 5).unwrap());
        let enc = encoder_input(&data[0], 5).unwrap();
        assert_eq!(enc.len(), ENCODER_POINTS);
        assert_eq!(enc, encoder_input(&data[0], 5).unwrap());
    }

    #[test]
    fn missing_rgb_source_is_rejected() {
        let s = &synth_shapes(1, 1)[0];
        assert!(make_triplet(0, &s.cloud, RgbSource::Missing, 1).is_err());
        let small = PointCloud::new(vec![[0.0; 3]; 10]).unwrap();
        assert!(make_triplet(0, &small, RgbSource::Synthesize { base_color: [1.0; 3] }, 1).is_err());
    }

    fn test_image() -> Image {
        let data = (0..6 * 5 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        Image::new(6, 5, 3, data).unwrap()
    }

    #[test]
    fn identity_rgb_augment_is_exact() {
        let img = test_image();
        assert_eq!(RgbAugment::identity().apply(&img), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = test_image();
        let flip = RgbAugment {
            flip: true,
            ..RgbAugment::identity()
        };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        assert_ne!(flip.apply(&img), img);
    }

    #[test]
    fn rgb_augment_keeps_shape_and_range() {
        let img = synth_dataset(1, 2).unwrap().remove(0).rgb;
        for seed in 0..4 {
            let out = augment_rgb(&img, RGB_JITTER, seed);
            assert_eq!((out.height(), out.width(), out.channels()), (224, 224, 3));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out, augment_rgb(&img, RGB_JITTER, seed));
        }
    }

    #[test]
    fn cloud_augment_examples() {
        let c = PointCloud::new(vec![[3.0, 0.0, 0.0]]).unwrap();
        let id = CloudAugment {
            scale: 1.0,
            translation: [0.0; 3],
        };
        assert_eq!(id.apply(&c), c);
        let a = CloudAugment {
            scale: 2.0 / 3.0,
            translation: [0.1, 0.0, 0.0],
        };
        let p = a.apply(&c).points()[0];
        assert!((p[0] - 2.1).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
        assert_eq!(augment_cloud(&c, 4), augment_cloud(&c, 4));
        for seed in 0..50 {
            let t = CloudAugment::sample(&mut stream(seed, &[1]));
            assert!((SCALE_RANGE.0..=SCALE_RANGE.1).contains(&t.scale));
            assert!(t.translation.iter().all(|v| v.abs() <= TRANSLATE_RANGE));
        }
    }

    #[test]
    fn chw_layout() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.to_chw(), vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }
}
