//! Cross-modal alignment of a trained state.

use rayon::prelude::*;

use super::{base_cloud, TrainState};
use crate::backbone::ImageKind;
use crate::data::{subsample, Image, Triplet, CAMERA_RADIUS, ENCODER_POINTS};
use crate::error::{domain, Result};
use crate::geometry::{generate_camera_poses, normalize_cloud, PointCloud};
use crate::renderer::render;
use crate::rng::{derive_seed, tag};

/// Unit-norm eval-mode embeddings of every object, one row per object.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEmbeddings {
    pub point: Vec<Vec<f64>>,
    pub rgb: Vec<Vec<f64>>,
    pub depth: Vec<Vec<f64>>,
}

/// Mean cosine similarity of matching and of non-matching pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairAlignment {
    pub pair: &'static str,
    pub positive: f64,
    pub negative: f64,
}

impl PairAlignment {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// RGB–depth, RGB–point and point–depth.
    pub pairs: [PairAlignment; 3],
}

impl AlignmentReport {
    pub fn min_gap(&self) -> f64 {
        self.pairs.iter().map(|p| p.gap()).fold(f64::INFINITY, f64::min)
    }
}

/// Embeds each object's unaugmented inputs: the full normalized cloud, the
/// resized RGB view, and a render of the grouped cloud at its depth view.
pub fn embed_dataset(state: &TrainState, dataset: &[Triplet]) -> Result<DatasetEmbeddings> {
    let poses = generate_camera_poses(CAMERA_RADIUS)?;
    let (model, ps, cfg) = (&state.model, &state.params, &state.config);
    let rows: Vec<[Vec<f64>; 3]> = dataset
        .par_iter()
        .map(|tr| {
            let base = base_cloud(tr, cfg.seed)?;
            let seed = derive_seed(cfg.seed, &[tag::FPS, tr.object_id]);
            let p = model.embed_cloud(ps, &base, seed)?;
            let size = cfg.image_size;
            let r = model.embed_image(ps, &tr.rgb.resized(size, size), ImageKind::Rgb)?;
            let tokens = model.group(&base, seed)?;
            let grouped: Vec<_> = (0..tokens.num_groups()).flat_map(|g| tokens.world_points(g)).collect();
            let depth = render(&PointCloud::new(grouped)?, &poses[tr.depth_view_index], &cfg.render);
            let img = Image::new(depth.height, depth.width, 1, depth.pixels)?;
            let d = model.embed_image(ps, &img, ImageKind::Depth)?;
            Ok([p, r, d])
        })
        .collect::<Result<_>>()?;
    let mut out = DatasetEmbeddings {
        point: Vec::new(),
        rgb: Vec::new(),
        depth: Vec::new(),
    };
    for [p, r, d] in rows {
        out.point.push(p);
        out.rgb.push(r);
        out.depth.push(d);
    }
    Ok(out)
}

fn cosine_stats(pair: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> PairAlignment {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let n = a.len();
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = dot(&a[i], &b[j]);
            if i == j {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    PairAlignment {
        pair,
        positive: pos / n as f64,
        negative: if n > 1 { neg / (n * (n - 1)) as f64 } else { 0.0 },
    }
}

/// Embeddings of one externally supplied object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEmbedding {
    pub point: Vec<f64>,
    pub depth: Vec<f64>,
    pub rgb: Option<Vec<f64>>,
}

/// Embeds an arbitrary cloud (subsampled to the encoder size when larger,
/// then normalized), a render of it at `depth_view`, and optionally an image.
pub fn embed_object(state: &TrainState, cloud: &PointCloud, rgb: Option<&Image>, depth_view: usize) -> Result<ObjectEmbedding> {
    let (model, ps, cfg) = (&state.model, &state.params, &state.config);
    let poses = generate_camera_poses(CAMERA_RADIUS)?;
    let pose = poses
        .get(depth_view)
        .ok_or_else(|| domain(format!("depth view {depth_view} outside 0..{}", poses.len())))?;
    let cloud = if cloud.len() > ENCODER_POINTS {
        subsample(cloud, ENCODER_POINTS, cfg.seed)?
    } else {
        cloud.clone()
    };
    let cloud = normalize_cloud(&cloud)?.cloud;
    let point = model.embed_cloud(ps, &cloud, derive_seed(cfg.seed, &[tag::FPS]))?;
    let depth = render(&cloud, pose, &cfg.render);
    let depth = model.embed_image(ps, &Image::new(depth.height, depth.width, 1, depth.pixels)?, ImageKind::Depth)?;
    let size = cfg.image_size;
    let rgb = rgb
        .map(|img| model.embed_image(ps, &img.to_rgb()?.resized(size, size), ImageKind::Rgb))
        .transpose()?;
    Ok(ObjectEmbedding { point, depth, rgb })
}

/// Positive-versus-negative cosine gap for each modality pair.
pub fn alignment(state: &TrainState, dataset: &[Triplet]) -> Result<AlignmentReport> {
    if dataset.len() < 2 {
        return Err(domain("alignment needs at least two objects"));
    }
    let e = embed_dataset(state, dataset)?;
    Ok(AlignmentReport {
        pairs: [
            cosine_stats("rgb-depth", &e.rgb, &e.depth),
            cosine_stats("rgb-point", &e.rgb, &e.point),
            cosine_stats("point-depth", &e.point, &e.depth),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_stats_on_orthonormal_rows() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = cosine_stats("x", &a, &a);
        assert_eq!((s.positive, s.negative, s.gap()), (1.0, 0.0, 1.0));
        let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let s = cosine_stats("x", &a, &b);
        assert_eq!(s.gap(), -1.0);
    }
}
