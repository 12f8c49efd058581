//! Point grouping, the shared transformer encoder, the token- and
//! point-level decoders, the codebook tokenizer and the image encoders.

pub mod external;
pub mod layers;
mod model;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{dist2, PointCloud, Vec3};
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::rng::{stream, tag};

pub use layers::{Block, BranchDrop, LayerNorm, Linear, Mlp};
pub use model::{GroupEmbed, ImageEncoder, ImageKind, ModelConfig, PointModel, Tokenizer};

// ---------------------------------------------------------------------------
// Grouping

/// `G` groups of `k` points, stored relative to their centers.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedTokens {
    pub centers: Vec<Vec3>,
    /// `G · k` center-relative points, group-major.
    pub groups: Vec<Vec3>,
    pub group_size: usize,
}

impl GroupedTokens {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, g: usize) -> &[Vec3] {
        &self.groups[g * self.group_size..(g + 1) * self.group_size]
    }

    /// World coordinates of the points of group `g`.
    pub fn world_points(&self, g: usize) -> impl Iterator<Item = Vec3> + '_ {
        let c = self.centers[g];
        self.group(g)
            .iter()
            .map(move |p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
    }

    /// Centers relative to their mean; translating the cloud leaves these unchanged.
    pub fn relative_centers(&self) -> Vec<Vec3> {
        let n = self.centers.len().max(1) as f64;
        let mut m = [0.0; 3];
        for c in &self.centers {
            for k in 0..3 {
                m[k] += c[k];
            }
        }
        let m = m.map(|v| v / n);
        self.centers
            .iter()
            .map(|c| [c[0] - m[0], c[1] - m[1], c[2] - m[2]])
            .collect()
    }
}

/// Farthest-point sampling starting from index `first`.
///
/// Each step picks the point farthest from the selected set; ties go to the
/// lowest index.
pub fn fps_from(cloud: &PointCloud, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(domain(format!("cannot sample {m} of {n} points")));
    }
    if first >= n {
        return Err(domain(format!("start index {first} out of range")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..m {
        selected.push(cur);
        let c = pts[cur];
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(*p, c);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(selected)
}

/// Farthest-point sampling with a seeded first index.
pub fn fps(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(domain("cannot sample from an empty cloud"));
    }
    let first = stream(seed, &[tag::FPS]).random_range(0..cloud.len());
    fps_from(cloud, m, first)
}

/// Groups the `k` nearest cloud points around each center (ties go to the
/// lowest index), nearest first, relative to the center.
pub fn knn_group(cloud: &PointCloud, centers: &[Vec3], k: usize) -> Result<GroupedTokens> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(domain(format!("cannot group {k} of {n} points")));
    }
    let pts = cloud.points();
    let mut groups = Vec::with_capacity(centers.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for c in centers {
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| (dist2(*p, *c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order[..k].sort_unstable_by(cmp);
        groups.extend(order[..k].iter().map(|&(_, i)| {
            let p = pts[i];
            [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
        }));
    }
    Ok(GroupedTokens {
        centers: centers.to_vec(),
        groups,
        group_size: k,
    })
}

/// FPS centers followed by kNN grouping.
pub fn group_cloud(cloud: &PointCloud, num_groups: usize, group_size: usize, seed: u64) -> Result<GroupedTokens> {
    let idx = fps(cloud, num_groups, seed)?;
    let centers: Vec<Vec3> = idx.iter().map(|&i| cloud.points()[i]).collect();
    knn_group(cloud, &centers, group_size)
}

// ---------------------------------------------------------------------------
// Masking

/// Number of masked groups for a ratio: `floor(ratio · G)`.
pub fn masked_count(num_groups: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error in products such as 0.6 · 64
    (ratio * num_groups as f64 + 1e-9).floor() as usize
}

/// Splits `0..G` into sorted (visible, masked) sets.
pub fn mask_tokens(num_groups: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(domain(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let m = masked_count(num_groups, ratio).min(num_groups);
    let mut rng = stream(seed, &[tag::MASK_TTA]);
    let mut masked = index::sample(&mut rng, num_groups, m).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; num_groups];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..num_groups).filter(|&i| !is_masked[i]).collect();
    Ok((visible, masked))
}

// ---------------------------------------------------------------------------
// Encoder

/// Shape of the shared transformer encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub droppath_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            dim: 384,
            heads: 6,
            ffn_ratio: 4,
            droppath_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Reduced encoder for single-machine runs.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            dim: 192,
            heads: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(domain("encoder layers, dim, heads and ffn_ratio must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(domain(format!(
                "encoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(domain("droppath rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stack of pre-norm transformer blocks (no final normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(ps, &format!("{name}.{i}"), cfg.dim, cfg.heads, cfg.ffn_ratio, rng))
            .collect();
        Ok(Self { cfg, blocks })
    }

    /// Runs every block; in train mode each residual branch is dropped with
    /// the configured rate using a stream derived from `seed`.
    pub fn forward(&self, t: &mut Tape, x: Var, mode: Mode, seed: u64) -> Result<Var> {
        let cols = t.value(x).cols();
        if cols != self.cfg.dim {
            return Err(domain(format!(
                "encoder expects width {}, got {cols}",
                self.cfg.dim
            )));
        }
        let rate = self.cfg.droppath_rate;
        let mut rng = (mode == Mode::Train && rate > 0.0).then(|| stream(seed, &[tag::DROP_PATH]));
        let mut h = x;
        for block in &self.blocks {
            let drop = match rng.as_mut() {
                Some(r) => BranchDrop::sample(rate, r),
                None => BranchDrop::KEEP,
            };
            h = block.forward(t, h, drop);
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Codebook

/// Frozen vocabulary of `V` codewords of width `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    codewords: Vec<f64>,
}

/// Lloyd iterations used by [`fit_codebook`].
pub const KMEANS_ITERS: usize = 25;

impl Codebook {
    pub fn new(dim: usize, codewords: Vec<f64>) -> Result<Self> {
        if dim == 0 || codewords.len() % dim != 0 || codewords.len() / dim < 2 {
            return Err(domain("a codebook needs at least two codewords of positive width"));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(domain("codewords must be finite"));
        }
        Ok(Self { dim, codewords })
    }

    pub fn len(&self) -> usize {
        self.codewords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.codewords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.codewords
    }

    /// Index of the nearest codeword (ties go to the lowest index).
    pub fn nearest(&self, f: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d: f64 = self
                .codeword(i)
                .iter()
                .zip(f)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Nearest-codeword ids of the rows of an `N × E` feature array.
pub fn tokenize(features: &[f64], codebook: &Codebook) -> Vec<usize> {
    features
        .chunks_exact(codebook.dim)
        .map(|f| codebook.nearest(f))
        .collect()
}

/// Lloyd's k-means from an initial codebook; empty clusters keep their codeword.
pub fn kmeans(features: &[f64], init: Codebook, iters: usize) -> Codebook {
    let dim = init.dim;
    let v = init.len();
    let mut cb = init;
    for _ in 0..iters {
        let ids = tokenize(features, &cb);
        let mut sums = vec![0.0; v * dim];
        let mut counts = vec![0usize; v];
        for (f, &id) in features.chunks_exact(dim).zip(&ids) {
            counts[id] += 1;
            sums[id * dim..(id + 1) * dim]
                .iter_mut()
                .zip(f)
                .for_each(|(s, x)| *s += x);
        }
        for i in 0..v {
            if counts[i] > 0 {
                for k in 0..dim {
                    cb.codewords[i * dim + k] = sums[i * dim + k] / counts[i] as f64;
                }
            }
        }
    }
    cb
}

/// Fits `V` codewords by k-means seeded with `V` distinct random rows.
pub fn fit_codebook(features: &[f64], dim: usize, vocab: usize, seed: u64) -> Result<Codebook> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(domain("feature array is not a whole number of rows"));
    }
    let n = features.len() / dim;
    if n < vocab {
        return Err(domain(format!("{n} features cannot fit {vocab} codewords")));
    }
    let mut rng = stream(seed, &[tag::CODEBOOK]);
    let rows = index::sample(&mut rng, n, vocab).into_vec();
    let init: Vec<f64> = rows
        .iter()
        .flat_map(|&r| features[r * dim..(r + 1) * dim].iter().copied())
        .collect();
    Ok(kmeans(features, Codebook::new(dim, init)?, KMEANS_ITERS))
}

// ---------------------------------------------------------------------------
// Momentum update

/// `key ← m · key + (1 − m) · query` over the listed parameters.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, ids: &[ParamId], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(domain(format!("momentum {m} outside [0, 1]")));
    }
    for &id in ids {
        if id.0 >= key.len() || id.0 >= query.len() || key.get(id).shape() != query.get(id).shape() {
            return Err(domain(format!("key and query parameters differ at {}", id.0)));
        }
    }
    for &id in ids {
        let q = query.get(id).data().to_vec();
        for (k, q) in key.get_mut(id).data_mut().iter_mut().zip(q) {
            // equal entries stay bit-identical
            if *k != q {
                *k = m * *k + (1.0 - m) * q;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn fps_examples() {
        let c = line(&[0.0, 1.0, 10.0]);
        assert_eq!(fps_from(&c, 2, 0).unwrap(), vec![0, 2]);
        let all = fps(&c, 3, 7).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert_eq!(fps(&c, 3, 7).unwrap(), all);
        assert!(fps(&c, 4, 0).is_err());
        // ties resolve to the lowest index
        let sym = line(&[0.0, -1.0, 1.0]);
        assert_eq!(fps_from(&sym, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_examples() {
        let c = line(&[0.0, 1.0, 3.0, 6.0]);
        let g = knn_group(&c, &[[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]], 1).unwrap();
        assert_eq!(g.groups, vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let g = knn_group(&c, &[[0.5, 0.0, 0.0]], 2).unwrap();
        // equidistant points: lowest index first
        assert_eq!(g.groups, vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert!(knn_group(&c, &[[0.0; 3]], 5).is_err());
        let w: Vec<Vec3> = g.world_points(0).collect();
        assert_eq!(w, vec![[0.0; 3], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn default_grouping_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = (0..1024)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let c = PointCloud::new(pts).unwrap();
        let g = group_cloud(&c, 64, 32, 3).unwrap();
        assert_eq!(g.num_groups(), 64);
        assert_eq!(g.groups.len(), 64 * 32);
        // every center is a cloud point, so it heads its own group
        for i in 0..64 {
            assert_eq!(g.group(i)[0], [0.0; 3]);
        }
    }

    #[test]
    fn mask_examples() {
        let (v, m) = mask_tokens(64, 0.0, 1).unwrap();
        assert!(m.is_empty() && v.len() == 64);
        let (v, m) = mask_tokens(64, 0.6, 1).unwrap();
        assert_eq!(m.len(), 38);
        let mut all: Vec<usize> = v.iter().chain(&m).copied().collect();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert_eq!(mask_tokens(64, 0.6, 1).unwrap(), (v, m));
        assert!(mask_tokens(64, 1.0, 1).is_err());
    }

    #[test]
    fn codebook_examples() {
        let cb = Codebook::new(1, vec![10.0, 20.0, 1.0, 30.0, 40.0, 5.0]).unwrap();
        assert_eq!(tokenize(cb.data(), &cb), vec![0, 1, 2, 3, 4, 5]);
        // 3.0 is equidistant from codewords 2 (1.0) and 5 (5.0)
        assert_eq!(cb.nearest(&[3.0]), 2);
        let init = Codebook::new(1, vec![1.0, 9.0]).unwrap();
        let fitted = kmeans(&[0.0, 10.0], init, 1);
        assert_eq!(fitted.data(), &[0.0, 10.0]);
        assert!(fit_codebook(&[0.0, 1.0], 1, 3, 0).is_err());
        let f: Vec<f64> = (0..40).map(|i| (i % 4) as f64 * 10.0 + (i as f64) * 1e-3).collect();
        let cb = fit_codebook(&f, 1, 4, 2).unwrap();
        assert_eq!(cb.len(), 4);
        assert_eq!(cb, fit_codebook(&f, 1, 4, 2).unwrap());
    }

    #[test]
    fn momentum_examples() {
        let mut key = ParamStore::new();
        let a = key.add("a", Tensor::scalar(2.0), true);
        let mut query = ParamStore::new();
        query.add("a", Tensor::scalar(4.0), true);
        let mut k1 = key.clone();
        momentum_update(&mut k1, &query, &[a], 1.0).unwrap();
        assert_eq!(k1.get(a).data(), &[2.0]);
        let mut k0 = key.clone();
        momentum_update(&mut k0, &query, &[a], 0.0).unwrap();
        assert_eq!(k0.get(a).data(), &[4.0]);
        momentum_update(&mut key, &query, &[a], 0.5).unwrap();
        assert_eq!(key.get(a).data(), &[3.0]);
        let mut bad = ParamStore::new();
        bad.add("a", Tensor::zeros(&[2]), true);
        assert!(momentum_update(&mut bad, &query, &[a], 0.5).is_err());
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_ratio: 2,
            droppath_rate: 0.0,
        };
        let enc = Encoder::new(&mut ps, "enc", cfg, &mut rng).unwrap();
        let mut t = Tape::new(&ps);
        let x = t.constant(Tensor::zeros(&[3, 6]));
        assert!(enc.forward(&mut t, x, Mode::Eval, 0).is_err());
    }

    #[test]
    fn encoder_config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::desk().validate().is_ok());
        let bad = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
