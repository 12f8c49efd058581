//! The full tri-modal network: point tokens, shared encoder, both decoders,
//! projection heads and the two image encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Block, BranchDrop, LayerNorm, Linear, Mlp};
use super::{group_cloud, tokenize, Codebook, Encoder, EncoderConfig, GroupedTokens, Mode};
use crate::data::Image;
use crate::error::{domain, Result};
use crate::geometry::PointCloud;
use crate::nn::init::{he_uniform, trunc_normal};
use crate::nn::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream, tag};

pub const TTA_DECODER_BLOCKS: usize = 1;
pub const PTA_DECODER_BLOCKS: usize = 4;
/// Width of the pointwise layer inside group and position embeddings.
pub const POINT_HIDDEN: usize = 128;
pub const CNN_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const INIT_TAU: f64 = 0.07;

/// Architecture of the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub group_count: usize,
    pub group_size: usize,
    /// Codebook size `V` of the token decoder.
    pub vocab: usize,
    /// Side length of the square images fed to both image encoders.
    pub image_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.group_count == 0 || self.group_size == 0 {
            return Err(domain("group count and size must be positive"));
        }
        if self.vocab < 2 {
            return Err(domain("vocabulary needs at least two tokens"));
        }
        if self.image_size == 0 {
            return Err(domain("image size must be positive"));
        }
        Ok(())
    }
}

/// Shared pointwise MLP over each group followed by max-pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GroupEmbed {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new_he(ps, &format!("{name}.fc1"), 3, POINT_HIDDEN, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), POINT_HIDDEN, dim, rng),
        }
    }

    /// `G × dim` features, invariant to point order within each group.
    pub fn forward(&self, t: &mut Tape, tokens: &GroupedTokens) -> Var {
        let flat: Vec<f64> = tokens.groups.iter().flatten().copied().collect();
        let x = t.constant(Tensor::matrix(tokens.groups.len(), 3, flat));
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        let h = self.fc2.forward(t, h);
        t.max_pool_rows(h, tokens.group_size)
    }
}

/// Frozen copy of the initial group embedder plus a k-means codebook; maps
/// groups to discrete token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub params: ParamStore,
    pub embed: GroupEmbed,
    pub codebook: Codebook,
}

impl Tokenizer {
    /// Copies the model's current group embedder.
    pub fn snapshot(model: &PointModel, ps: &ParamStore) -> (ParamStore, GroupEmbed) {
        let mut store = ParamStore::new();
        let mut rng = stream(0, &[]);
        let embed = GroupEmbed::new(&mut store, "embed", model.dim(), &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let src = ps.find(store.name(id)).expect("embedder parameter");
            *store.get_mut(id) = ps.get(src).clone();
        }
        (store, embed)
    }

    /// Features of every group under the frozen embedder (`G × dim`, row-major).
    pub fn features(params: &ParamStore, embed: &GroupEmbed, tokens: &GroupedTokens) -> Vec<f64> {
        let mut t = Tape::new(params);
        let v = embed.forward(&mut t, tokens);
        t.value(v).data().to_vec()
    }

    pub fn tokenize(&self, tokens: &GroupedTokens) -> Vec<usize> {
        tokenize(&Self::features(&self.params, &self.embed, tokens), &self.codebook)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Rgb,
    Depth,
}

impl ImageKind {
    pub fn channels(self) -> usize {
        match self {
            ImageKind::Rgb => 3,
            ImageKind::Depth => 1,
        }
    }
}

/// Four stride-2 convolutions with ReLU, global average pooling and a
/// two-layer projection head whose output is L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub kind: ImageKind,
    pub size: usize,
    pub convs: Vec<(ParamId, ParamId, ConvGeom)>,
    pub head: Mlp,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, kind: ImageKind, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let (mut c_in, mut side) = (kind.channels(), size);
        for (i, &c_out) in CNN_CHANNELS.iter().enumerate() {
            let geom = ConvGeom {
                c_in,
                height: side,
                width: side,
                c_out,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let fan_in = c_in * 9;
            let w = ps.add(format!("{name}.conv{i}.w"), he_uniform(rng, &[c_out, fan_in], fan_in), true);
            let b = ps.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[c_out]), false);
            convs.push((w, b, geom));
            c_in = c_out;
            side = geom.out_height();
        }
        let head = Mlp::new(ps, &format!("{name}.head"), [c_in, dim, dim], rng);
        Self {
            kind,
            size,
            convs,
            head,
        }
    }

    /// Embeds a channel-major `C × size × size` input already on the tape.
    pub fn forward_var(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let expected = self.kind.channels() * self.size * self.size;
        if t.value(x).len() != expected {
            return Err(domain(format!(
                "{:?} encoder expects {}x{}x{} input",
                self.kind,
                self.size,
                self.size,
                self.kind.channels()
            )));
        }
        let mut h = x;
        for &(w, b, geom) in &self.convs {
            let (w, b) = (t.param(w), t.param(b));
            h = t.conv2d(h, w, b, geom);
            h = t.relu(h);
        }
        let pooled = t.avg_pool(h);
        let out = self.head.forward(t, pooled);
        Ok(t.l2_normalize_rows(out))
    }

    pub fn forward(&self, t: &mut Tape, image: &Image) -> Result<Var> {
        if image.height() != self.size || image.width() != self.size || image.channels() != self.kind.channels() {
            return Err(domain(format!(
                "{:?} encoder expects a {}x{}x{} image, got {}x{}x{}",
                self.kind,
                self.size,
                self.size,
                self.kind.channels(),
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let c = self.kind.channels();
        let x = t.constant(Tensor::from_vec(&[c, self.size, self.size], image.to_chw())?);
        self.forward_var(t, x)
    }
}

/// Group features with positional embeddings added, plus the embeddings alone.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub tokens: Var,
    pub pos: Var,
}

/// Parameter handles of the whole network; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct PointModel {
    pub cfg: ModelConfig,
    pub embed: GroupEmbed,
    pub pos: Mlp,
    pub cls_token: ParamId,
    pub cls_pos: ParamId,
    pub encoder: Encoder,
    pub norm: LayerNorm,
    pub tta_mask: ParamId,
    pub tta_blocks: Vec<Block>,
    pub tta_norm: LayerNorm,
    pub tta_head: Linear,
    pub pta_mask: ParamId,
    pub pta_blocks: Vec<Block>,
    pub pta_norm: LayerNorm,
    pub pta_head: Linear,
    pub point_head: Mlp,
    pub moco_head: Linear,
    pub rgb: ImageEncoder,
    pub depth: ImageEncoder,
    pub log_tau: ParamId,
}

/// Parameter name prefixes shared with the momentum key encoder.
const MOMENTUM_PREFIXES: [&str; 7] = ["embed.", "pos.", "cls_token", "cls_pos", "encoder.", "norm.", "moco_head."];

impl PointModel {
    /// Builds the network with parameters initialized from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = stream(seed, &[tag::INIT]);
        let rng = &mut rng;
        let e = cfg.encoder;
        let d = e.dim;
        let token = |ps: &mut ParamStore, name: &str, rng: &mut _| ps.add(name, trunc_normal(rng, &[1, d], 0.02), false);
        let embed = GroupEmbed::new(&mut ps, "embed", d, rng);
        let pos = Mlp::new_coords(&mut ps, "pos", [3, POINT_HIDDEN, d], rng);
        let cls_token = token(&mut ps, "cls_token", rng);
        let cls_pos = token(&mut ps, "cls_pos", rng);
        let encoder = Encoder::new(&mut ps, "encoder", e, rng)?;
        let norm = LayerNorm::new(&mut ps, "norm", d);
        let tta_mask = token(&mut ps, "tta.mask", rng);
        let tta_blocks = (0..TTA_DECODER_BLOCKS)
            .map(|i| Block::new(&mut ps, &format!("tta.{i}"), d, e.heads, e.ffn_ratio, rng))
            .collect();
        let tta_norm = LayerNorm::new(&mut ps, "tta.norm", d);
        let tta_head = Linear::new(&mut ps, "tta.head", d, cfg.vocab, rng);
        let pta_mask = token(&mut ps, "pta.mask", rng);
        let pta_blocks = (0..PTA_DECODER_BLOCKS)
            .map(|i| Block::new(&mut ps, &format!("pta.{i}"), d, e.heads, e.ffn_ratio, rng))
            .collect();
        let pta_norm = LayerNorm::new(&mut ps, "pta.norm", d);
        let pta_head = Linear::new(&mut ps, "pta.head", d, 3 * cfg.group_size, rng);
        let point_head = Mlp::new(&mut ps, "point_head", [d, d, d], rng);
        let moco_head = Linear::new(&mut ps, "moco_head", d, d, rng);
        let rgb = ImageEncoder::new(&mut ps, "rgb", ImageKind::Rgb, cfg.image_size, d, rng);
        let depth = ImageEncoder::new(&mut ps, "depth", ImageKind::Depth, cfg.image_size, d, rng);
        let log_tau = ps.add("log_tau", Tensor::from_vec(&[1], vec![INIT_TAU.ln()])?, false);
        let model = Self {
            cfg,
            embed,
            pos,
            cls_token,
            cls_pos,
            encoder,
            norm,
            tta_mask,
            tta_blocks,
            tta_norm,
            tta_head,
            pta_mask,
            pta_blocks,
            pta_norm,
            pta_head,
            point_head,
            moco_head,
            rgb,
            depth,
            log_tau,
        };
        Ok((model, ps))
    }

    pub fn dim(&self) -> usize {
        self.cfg.encoder.dim
    }

    /// Checks that a store holds exactly this network's parameters.
    pub fn check_store(&self, ps: &ParamStore) -> Result<()> {
        let (_, layout) = Self::new(self.cfg, 0)?;
        if layout.len() != ps.len() {
            return Err(domain(format!(
                "parameter count {} does not match the architecture ({})",
                ps.len(),
                layout.len()
            )));
        }
        for id in layout.ids() {
            if layout.name(id) != ps.name(id) || layout.get(id).shape() != ps.get(id).shape() {
                return Err(domain(format!(
                    "parameter {} has shape {:?}, the architecture expects {} {:?}",
                    ps.name(id),
                    ps.get(id).shape(),
                    layout.name(id),
                    layout.get(id).shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameters tracked by the momentum key encoder.
    pub fn momentum_ids(&self, ps: &ParamStore) -> Vec<ParamId> {
        ps.ids()
            .filter(|&id| MOMENTUM_PREFIXES.iter().any(|p| ps.name(id).starts_with(p)))
            .collect()
    }

    pub fn group(&self, cloud: &PointCloud, seed: u64) -> Result<GroupedTokens> {
        group_cloud(cloud, self.cfg.group_count, self.cfg.group_size, seed)
    }

    /// Group features plus positional embeddings of the centroid-relative centers.
    pub fn embed_groups(&self, t: &mut Tape, tokens: &GroupedTokens) -> Embedded {
        let feat = self.embed.forward(t, tokens);
        let rel: Vec<f64> = tokens.relative_centers().iter().flatten().copied().collect();
        let centers = t.constant(Tensor::matrix(tokens.num_groups(), 3, rel));
        let pos = self.pos.forward(t, centers);
        let tokens = t.add(feat, pos);
        Embedded { tokens, pos }
    }

    /// Encodes the class token followed by the visible groups and applies the
    /// final normalization: `(1 + |visible|) × dim`.
    pub fn encode(&self, t: &mut Tape, emb: Embedded, visible: &[usize], mode: Mode, seed: u64) -> Result<Var> {
        let vis = t.gather_rows(emb.tokens, visible);
        let (ct, cp) = (t.param(self.cls_token), t.param(self.cls_pos));
        let cls = t.add(ct, cp);
        let x = t.concat_rows(&[cls, vis]);
        let h = self.encoder.forward(t, x, mode, seed)?;
        Ok(self.norm.forward(t, h))
    }

    fn decode(&self, t: &mut Tape, encoded: Var, emb: Embedded, masked: &[usize], mask: ParamId, blocks: &[Block]) -> Result<Var> {
        if masked.is_empty() {
            return Err(domain("decoding needs at least one masked group"));
        }
        let pos = t.gather_rows(emb.pos, masked);
        let m = t.param(mask);
        let queries = t.add_row(pos, m);
        let mut h = t.concat_rows(&[encoded, queries]);
        for b in blocks {
            h = b.forward(t, h, BranchDrop::KEEP);
        }
        let n = t.value(h).rows();
        let rows: Vec<usize> = (n - masked.len()..n).collect();
        Ok(t.gather_rows(h, &rows))
    }

    /// Token logits `|masked| × V` from a single decoder block.
    pub fn decode_tokens(&self, t: &mut Tape, encoded: Var, emb: Embedded, masked: &[usize]) -> Result<Var> {
        let h = self.decode(t, encoded, emb, masked, self.tta_mask, &self.tta_blocks)?;
        let h = self.tta_norm.forward(t, h);
        Ok(self.tta_head.forward(t, h))
    }

    /// Reconstructed points `(k · |masked|) × 3`: per masked group, `k`
    /// predicted offsets added to the group center.
    pub fn decode_points(
        &self,
        t: &mut Tape,
        encoded: Var,
        emb: Embedded,
        tokens: &GroupedTokens,
        masked: &[usize],
    ) -> Result<Var> {
        let h = self.decode(t, encoded, emb, masked, self.pta_mask, &self.pta_blocks)?;
        let h = self.pta_norm.forward(t, h);
        let offsets = self.pta_head.forward(t, h);
        let k = tokens.group_size;
        let offsets = t.reshape(offsets, &[masked.len() * k, 3]);
        let mut centers = Vec::with_capacity(masked.len() * k * 3);
        for &g in masked {
            for _ in 0..k {
                centers.extend_from_slice(&tokens.centers[g]);
            }
        }
        let centers = t.constant(Tensor::matrix(masked.len() * k, 3, centers));
        Ok(t.add(offsets, centers))
    }

    /// Global feature of an encoded cloud: the class token plus the
    /// channel-wise max over the group tokens, both taken relative to the
    /// group-token mean so that offsets shared by every token cancel.
    pub fn global_feature(&self, t: &mut Tape, encoded: Var) -> Var {
        let n = t.value(encoded).rows();
        let cls = t.gather_rows(encoded, &[0]);
        if n == 1 {
            return cls;
        }
        let rows: Vec<usize> = (1..n).collect();
        let groups = t.gather_rows(encoded, &rows);
        let pooled = t.max_pool_rows(groups, n - 1);
        let avg = t.constant(Tensor::filled(&[1, n - 1], 1.0 / (n - 1) as f64));
        let mean = t.linear(avg, groups, None);
        let sum = t.add(cls, pooled);
        let mean = t.scale(mean, -2.0);
        t.add(sum, mean)
    }

    /// Unit-norm point embedding `g^P` from the global feature.
    pub fn point_embedding(&self, t: &mut Tape, encoded: Var) -> Var {
        let g = self.global_feature(t, encoded);
        let h = self.point_head.forward(t, g);
        t.l2_normalize_rows(h)
    }

    /// Unit-norm MoCo query (or key) from the global feature.
    pub fn moco_embedding(&self, t: &mut Tape, encoded: Var) -> Var {
        let g = self.global_feature(t, encoded);
        let h = self.moco_head.forward(t, g);
        t.l2_normalize_rows(h)
    }

    pub fn image_encoder(&self, kind: ImageKind) -> &ImageEncoder {
        match kind {
            ImageKind::Rgb => &self.rgb,
            ImageKind::Depth => &self.depth,
        }
    }

    /// Eval-mode `g^P` of a cloud with every group visible.
    pub fn embed_cloud(&self, ps: &ParamStore, cloud: &PointCloud, seed: u64) -> Result<Vec<f64>> {
        let tokens = self.group(cloud, seed)?;
        let mut t = Tape::new(ps);
        let emb = self.embed_groups(&mut t, &tokens);
        let all: Vec<usize> = (0..tokens.num_groups()).collect();
        let enc = self.encode(&mut t, emb, &all, Mode::Eval, seed)?;
        let g = self.point_embedding(&mut t, enc);
        Ok(t.value(g).data().to_vec())
    }

    pub fn embed_image(&self, ps: &ParamStore, image: &Image, kind: ImageKind) -> Result<Vec<f64>> {
        let mut t = Tape::new(ps);
        let g = self.image_encoder(kind).forward(&mut t, image)?;
        Ok(t.value(g).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;
    use crate::geometry::normalize_cloud;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                dim: 8,
                heads: 2,
                ffn_ratio: 2,
                droppath_rate: 0.0,
            },
            group_count: 8,
            group_size: 4,
            vocab: 5,
            image_size: 16,
        }
    }

    fn cloud(n: usize) -> PointCloud {
        let raw = &synth_shapes(1, 11)[0].cloud;
        let pts = raw.points()[..n].to_vec();
        normalize_cloud(&PointCloud::new(pts).unwrap()).unwrap().cloud
    }

    #[test]
    fn embed_groups_is_permutation_invariant_within_groups() {
        let (m, ps) = PointModel::new(tiny(), 1).unwrap();
        let tokens = m.group(&cloud(64), 2).unwrap();
        let mut shuffled = tokens.clone();
        for g in 0..tokens.num_groups() {
            let k = tokens.group_size;
            shuffled.groups[g * k..(g + 1) * k].reverse();
        }
        let mut t = Tape::new(&ps);
        let a = m.embed.forward(&mut t, &tokens);
        let b = m.embed.forward(&mut t, &shuffled);
        assert_eq!(t.value(a), t.value(b));
        assert_eq!(t.value(a).shape(), &[8, 8]);
    }

    #[test]
    fn full_scale_profile_shapes() {
        let cfg = ModelConfig {
            encoder: EncoderConfig::default(),
            group_count: 64,
            group_size: 32,
            vocab: 64,
            image_size: 32,
        };
        let (m, ps) = PointModel::new(cfg, 0).unwrap();
        let tokens = m.group(&cloud(1024), 0).unwrap();
        let mut t = Tape::new(&ps);
        let emb = m.embed_groups(&mut t, &tokens);
        assert_eq!(t.value(emb.tokens).shape(), &[64, 384]);
        let (visible, masked) = super::super::mask_tokens(64, 0.6, 3).unwrap();
        let enc = m.encode(&mut t, emb, &visible, Mode::Eval, 0).unwrap();
        assert_eq!(t.value(enc).shape(), &[27, 384]);
        let rec = m.decode_points(&mut t, enc, emb, &tokens, &masked).unwrap();
        assert_eq!(t.value(rec).shape(), &[1216, 3]);
        let logits = m.decode_tokens(&mut t, enc, emb, &masked).unwrap();
        assert_eq!(t.value(logits).shape(), &[38, 64]);
        assert_eq!(m.tta_blocks.len(), 1);
        assert_eq!(m.pta_blocks.len(), 4);
        assert_eq!(m.pta_blocks[0].heads, 6);
    }

    #[test]
    fn full_encoder_maps_65_tokens() {
        let mut cfg = tiny();
        cfg.group_count = 64;
        cfg.group_size = 8;
        let (m, ps) = PointModel::new(cfg, 0).unwrap();
        let tokens = m.group(&cloud(256), 0).unwrap();
        let mut t = Tape::new(&ps);
        let emb = m.embed_groups(&mut t, &tokens);
        let all: Vec<usize> = (0..64).collect();
        let enc = m.encode(&mut t, emb, &all, Mode::Train, 0).unwrap();
        assert_eq!(t.value(enc).shape(), &[65, 8]);
    }

    #[test]
    fn zero_droppath_train_equals_eval() {
        let (m, ps) = PointModel::new(tiny(), 4).unwrap();
        let tokens = m.group(&cloud(64), 1).unwrap();
        let run = |mode| {
            let mut t = Tape::new(&ps);
            let emb = m.embed_groups(&mut t, &tokens);
            let enc = m.encode(&mut t, emb, &[0, 2, 5], mode, 9).unwrap();
            t.value(enc).clone()
        };
        assert_eq!(run(Mode::Train), run(Mode::Eval));
    }

    #[test]
    fn droppath_changes_train_mode_only() {
        let mut cfg = tiny();
        cfg.encoder.droppath_rate = 0.5;
        let (m, ps) = PointModel::new(cfg, 4).unwrap();
        let tokens = m.group(&cloud(64), 1).unwrap();
        let run = |mode, seed| {
            let mut t = Tape::new(&ps);
            let emb = m.embed_groups(&mut t, &tokens);
            let enc = m.encode(&mut t, emb, &[0, 2, 5], mode, seed).unwrap();
            t.value(enc).clone()
        };
        assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
        assert_eq!(run(Mode::Train, 1), run(Mode::Train, 1));
        let differs = (0..8).any(|s| run(Mode::Train, s) != run(Mode::Eval, s));
        assert!(differs);
    }

    #[test]
    fn zero_output_projections_make_the_encoder_an_identity() {
        let (m, mut ps) = PointModel::new(tiny(), 5).unwrap();
        for b in &m.encoder.blocks {
            for id in [b.proj.w, b.proj.b, b.ffn.fc2.w, b.ffn.fc2.b] {
                ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut t = Tape::new(&ps);
        let x = t.constant(Tensor::matrix(3, 8, (0..24).map(|i| i as f64 * 0.1).collect()));
        let y = m.encoder.forward(&mut t, x, Mode::Eval, 0).unwrap();
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn reconstruction_translates_with_the_cloud() {
        let (m, ps) = PointModel::new(tiny(), 6).unwrap();
        let c = cloud(64);
        let shift = [0.3, -0.2, 0.1];
        let moved = c.translated(shift);
        let rec = |cl: &PointCloud| {
            let tokens = m.group(cl, 3).unwrap();
            let mut t = Tape::new(&ps);
            let emb = m.embed_groups(&mut t, &tokens);
            let enc = m.encode(&mut t, emb, &[0, 1, 2, 3], Mode::Eval, 0).unwrap();
            let r = m.decode_points(&mut t, enc, emb, &tokens, &[4, 5, 6, 7]).unwrap();
            t.value(r).clone()
        };
        let (a, b) = (rec(&c), rec(&moved));
        assert_eq!(a.shape(), &[16, 3]);
        for (pa, pb) in a.data().chunks(3).zip(b.data().chunks(3)) {
            for k in 0..3 {
                assert!((pb[k] - pa[k] - shift[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoders_reject_an_empty_mask() {
        let (m, ps) = PointModel::new(tiny(), 6).unwrap();
        let tokens = m.group(&cloud(64), 3).unwrap();
        let mut t = Tape::new(&ps);
        let emb = m.embed_groups(&mut t, &tokens);
        let enc = m.encode(&mut t, emb, &[0, 1], Mode::Eval, 0).unwrap();
        assert!(m.decode_tokens(&mut t, enc, emb, &[]).is_err());
        assert!(m.decode_points(&mut t, enc, emb, &tokens, &[]).is_err());
    }

    #[test]
    fn image_embeddings_are_unit_norm_and_size_checked() {
        let (m, ps) = PointModel::new(tiny(), 7).unwrap();
        let img = Image::new(16, 16, 3, (0..768).map(|i| (i % 11) as f64 / 10.0).collect()).unwrap();
        let g = m.embed_image(&ps, &img, ImageKind::Rgb).unwrap();
        let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(g, m.embed_image(&ps, &img, ImageKind::Rgb).unwrap());
        assert!(m.embed_image(&ps, &img, ImageKind::Depth).is_err());
        let wrong = Image::filled(8, 8, 3, 0.5);
        assert!(m.embed_image(&ps, &wrong, ImageKind::Rgb).is_err());
    }

    #[test]
    fn point_embedding_is_unit_norm() {
        let (m, ps) = PointModel::new(tiny(), 8).unwrap();
        let g = m.embed_cloud(&ps, &cloud(64), 0).unwrap();
        assert_eq!(g.len(), 8);
        let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn momentum_ids_cover_the_query_path_only() {
        let (m, ps) = PointModel::new(tiny(), 0).unwrap();
        let ids = m.momentum_ids(&ps);
        assert!(ids.iter().any(|&i| ps.name(i) == "encoder.0.qkv.w"));
        assert!(ids.iter().any(|&i| ps.name(i) == "moco_head.w"));
        assert!(!ids.iter().any(|&i| ps.name(i).starts_with("tta.") || ps.name(i).starts_with("rgb.")));
        m.check_store(&ps).unwrap();
    }
}
