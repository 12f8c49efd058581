//! Central finite-difference checks of every hand-written gradient.
//!
//! Each op builds a small random instance from its seed, evaluates a scalar
//! function of one parameter block at a time, and compares the analytic
//! gradient with `(f(x + h) − f(x − h)) / 2h` entry by entry.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{EncoderConfig, ImageKind, Mode, ModelConfig, PointModel};
use crate::data::{Image, CAMERA_RADIUS};
use crate::geometry::{generate_camera_poses, CameraPose, PointCloud, Vec3, NUM_POSES};
use crate::losses::{
    chamfer_with_grad, cross_modal_nce_with_grad, dr_loss, dr_loss_with_grad, moco_loss_with_grad,
    token_ce_with_grad, ChamferVariant, ContrastiveHead, EmbeddingBatch, Modality, MocoState,
};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::renderer::{render, render_views, render_views_vjp, render_vjp, saturated_voxels, DepthImage, RenderConfig};
use crate::rng::stream;

/// Denominator floor of the relative error, so entries that are zero in
/// both gradients compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Entries sampled per parameter block of the backbone check.
const BACKBONE_ENTRIES: usize = 12;
/// Attempts at drawing a renderer instance without a kink inside the stencil.
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradOp {
    /// Vector–Jacobian product of a single render.
    Render,
    /// Rendering loss over several views, through the renderer.
    DrLoss,
    Chamfer,
    Nce,
    Moco,
    TokenCe,
    /// Tape gradients of the whole network on a tiny configuration.
    Backbone,
}

impl GradOp {
    pub const ALL: [GradOp; 7] = [
        GradOp::Render,
        GradOp::DrLoss,
        GradOp::Chamfer,
        GradOp::Nce,
        GradOp::Moco,
        GradOp::TokenCe,
        GradOp::Backbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Render => "render",
            GradOp::DrLoss => "dr_loss",
            GradOp::Chamfer => "chamfer",
            GradOp::Nce => "nce",
            GradOp::Moco => "moco",
            GradOp::TokenCe => "token_ce",
            GradOp::Backbone => "backbone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Instances discarded because a finite-difference stencil crossed a
    /// non-differentiable boundary.
    pub redrawn: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: GradOp,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{}/{}: max_rel_err={:.3e} over {} entries{} {}",
                self.op.name(),
                b.name,
                b.max_rel_err,
                b.entries,
                if b.redrawn > 0 {
                    format!(" ({} instances redrawn at kinks)", b.redrawn)
                } else {
                    String::new()
                },
                if b.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Test hooks: `corrupt` edits each analytic gradient before comparison and
/// `zero_upstream` scales the upstream cotangent to zero.
#[derive(Default)]
pub struct CheckOptions<'a> {
    pub corrupt: Option<&'a dyn Fn(&mut [f64])>,
    pub zero_upstream: bool,
}

pub fn finite_difference_check(op: GradOp, seed: u64, h: f64, tol: f64) -> GradReport {
    finite_difference_check_with(op, seed, h, tol, &CheckOptions::default())
}

pub fn finite_difference_check_with(op: GradOp, seed: u64, h: f64, tol: f64, opts: &CheckOptions) -> GradReport {
    let mut rng = stream(seed, &[0x6772_6164]);
    let mut ctx = Checker {
        h,
        tol,
        opts,
        upstream: if opts.zero_upstream { 0.0 } else { 1.0 },
        blocks: Vec::new(),
        redrawn: 0,
    };
    match op {
        GradOp::Render => check_render(&mut ctx, &mut rng),
        GradOp::DrLoss => check_dr_loss(&mut ctx, &mut rng),
        GradOp::Chamfer => check_chamfer(&mut ctx, &mut rng),
        GradOp::Nce => check_nce(&mut ctx, &mut rng),
        GradOp::Moco => check_moco(&mut ctx, &mut rng),
        GradOp::TokenCe => check_token_ce(&mut ctx, &mut rng),
        GradOp::Backbone => check_backbone(&mut ctx, &mut rng),
    }
    GradReport { op, blocks: ctx.blocks }
}

struct Checker<'a> {
    h: f64,
    tol: f64,
    opts: &'a CheckOptions<'a>,
    /// Scale of the upstream cotangent (0 under `zero_upstream`).
    upstream: f64,
    blocks: Vec<BlockReport>,
    /// Redraw count attached to the next block.
    redrawn: usize,
}

impl Checker<'_> {
    /// Compares `analytic[k]` with the central difference of `f` along
    /// `x[entries[k]]`.
    fn block(&mut self, name: &str, x: &[f64], entries: &[usize], mut analytic: Vec<f64>, f: impl Fn(&[f64]) -> f64) {
        if let Some(c) = self.opts.corrupt {
            c(&mut analytic);
        }
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for (k, &i) in entries.iter().enumerate() {
            xp[i] = x[i] + self.h;
            let fp = f(&xp);
            xp[i] = x[i] - self.h;
            let fm = f(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * self.h);
            let a = analytic[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
            // NaN never passes
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        self.blocks.push(BlockReport {
            name: name.into(),
            entries: entries.len(),
            max_rel_err: worst,
            pass: worst <= self.tol,
            redrawn: std::mem::take(&mut self.redrawn),
        });
    }

    /// True when `regime` is constant over every `x ± h` stencil.
    fn stencil_is_smooth<R: PartialEq>(&self, x: &[f64], regime: impl Fn(&[f64]) -> R) -> bool {
        let base = regime(x);
        let mut xp = x.to_vec();
        (0..x.len()).all(|i| {
            let ok = [x[i] + self.h, x[i] - self.h].iter().all(|&v| {
                xp[i] = v;
                regime(&xp) == base
            });
            xp[i] = x[i];
            ok
        })
    }

    fn full_block(&mut self, name: &str, x: &[f64], analytic: Vec<f64>, f: impl Fn(&[f64]) -> f64) {
        let entries: Vec<usize> = (0..x.len()).collect();
        self.block(name, x, &entries, analytic, f)
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..3 * n).map(|_| rng.random_range(-r..r)).collect()
}

fn cloud(x: &[f64]) -> PointCloud {
    PointCloud::from_flat(x).expect("finite test points")
}

fn flat(v: Vec<Vec3>) -> Vec<f64> {
    v.into_iter().flatten().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Small grid used by the renderer checks: 16 slices, 8×8 pixels.
pub fn gradcheck_render_config() -> RenderConfig {
    RenderConfig {
        grid_depth: 16,
        image_width: 8,
        image_height: 8,
        ..RenderConfig::default()
    }
}

fn rig() -> Vec<CameraPose> {
    generate_camera_poses(CAMERA_RADIUS).expect("camera rig")
}

/// Clamp pattern of every view; the render is smooth while it is fixed.
fn saturation(x: &[f64], poses: &[CameraPose], cfg: &RenderConfig) -> Vec<Vec<bool>> {
    poses.iter().map(|p| saturated_voxels(&cloud(x), p, cfg)).collect()
}

fn check_render(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let cfg = gradcheck_render_config();
    let (pose, x) = loop {
        let pose = rig()[rng.random_range(0..NUM_POSES)];
        let x = random_points(rng, 5, 0.5);
        if c.redrawn >= MAX_REDRAWS || c.stencil_is_smooth(&x, |x| saturation(x, &[pose], &cfg)) {
            break (pose, x);
        }
        c.redrawn += 1;
    };
    let up: Vec<f64> = (0..cfg.pixels()).map(|_| c.upstream * rng.random_range(-1.0..1.0)).collect();
    let analytic = flat(render_vjp(&cloud(&x), &pose, &cfg, &up).expect("upstream size"));
    c.full_block("points", &x, analytic, |x| dot(&up, &render(&cloud(x), &pose, &cfg).pixels));
}

fn check_dr_loss(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let cfg = gradcheck_render_config();
    let all = rig();
    // the loss has kinks where the clamp switches and where a rendered pixel
    // crosses its target
    let regime = |x: &[f64], poses: &[CameraPose], gt: &[DepthImage]| {
        let signs: Vec<Vec<i8>> = render_views(&cloud(x), poses, &cfg)
            .iter()
            .zip(gt)
            .map(|(p, g)| p.pixels.iter().zip(&g.pixels).map(|(a, b)| (a - b).signum() as i8 * (a != b) as i8).collect())
            .collect();
        (saturation(x, poses, &cfg), signs)
    };
    let (poses, x, gt) = loop {
        let poses: Vec<CameraPose> = index::sample(rng, NUM_POSES, 4).into_iter().map(|i| all[i]).collect();
        let x = random_points(rng, 5, 0.5);
        let gt = render_views(&cloud(&random_points(rng, 5, 0.5)), &poses, &cfg);
        if c.redrawn >= MAX_REDRAWS || c.stencil_is_smooth(&x, |x| regime(x, &poses, &gt)) {
            break (poses, x, gt);
        }
        c.redrawn += 1;
    };
    let (_, gimg) = dr_loss_with_grad(&render_views(&cloud(&x), &poses, &cfg), &gt).expect("matching stacks");
    let gimg: Vec<Vec<f64>> = gimg
        .into_iter()
        .map(|g| g.into_iter().map(|v| v * c.upstream).collect())
        .collect();
    let analytic = flat(render_views_vjp(&cloud(&x), &poses, &cfg, &gimg).expect("one image per pose"));
    let s = c.upstream;
    c.full_block("points", &x, analytic, |x| {
        s * dr_loss(&render_views(&cloud(x), &poses, &cfg), &gt).expect("matching stacks")
    });
}

fn check_chamfer(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let x = random_points(rng, 16, 1.0);
    let q = cloud(&random_points(rng, 12, 1.0));
    for (name, variant) in [("l1", ChamferVariant::L1), ("l2", ChamferVariant::L2)] {
        let s = c.upstream;
        let (_, g) = chamfer_with_grad(&cloud(&x), &q, variant).expect("non-empty");
        let analytic = flat(g).into_iter().map(|v| v * s).collect();
        c.full_block(name, &x, analytic, |x| {
            s * chamfer_with_grad(&cloud(x), &q, variant).expect("non-empty").0
        });
    }
}

/// Row-normalizes `x` (`rows × dim`).
fn normalize_rows(x: &[f64], dim: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for r in y.chunks_exact_mut(dim) {
        let n = dot(r, r).sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    y
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
fn normalize_rows_vjp(x: &[f64], g: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (xr, gr) in x.chunks_exact(dim).zip(g.chunks_exact(dim)) {
        let n = dot(xr, xr).sqrt();
        let yg: f64 = xr.iter().zip(gr).map(|(a, b)| a / n * b).sum();
        out.extend(xr.iter().zip(gr).map(|(a, b)| (b - a / n * yg) / n));
    }
    out
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn check_nce(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let (b, dim) = (4, 6);
    let xa = gaussian_rows(rng, b * dim);
    let xb = gaussian_rows(rng, b * dim);
    let lt = 0.1f64.ln();
    let s = c.upstream;
    let loss = |xa: &[f64], xb: &[f64], lt: f64| {
        let a = EmbeddingBatch::new(Modality::Rgb, dim, normalize_rows(xa, dim)).expect("unit rows");
        let bb = EmbeddingBatch::new(Modality::Depth, dim, normalize_rows(xb, dim)).expect("unit rows");
        cross_modal_nce_with_grad(&a, &bb, &ContrastiveHead { log_tau: lt }).expect("matching batches")
    };
    let (_, g) = loss(&xa, &xb, lt);
    let ga = normalize_rows_vjp(&xa, &g.a, dim).into_iter().map(|v| v * s).collect();
    let gb = normalize_rows_vjp(&xb, &g.b, dim).into_iter().map(|v| v * s).collect();
    c.full_block("a", &xa, ga, |x| s * loss(x, &xb, lt).0);
    c.full_block("b", &xb, gb, |x| s * loss(&xa, x, lt).0);
    c.full_block("log_tau", &[lt], vec![s * g.log_tau], |x| s * loss(&xa, &xb, x[0]).0);
}

fn check_moco(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let (b, dim) = (3, 6);
    let xq = gaussian_rows(rng, b * dim);
    let keys = EmbeddingBatch::normalized(Modality::Point, dim, gaussian_rows(rng, b * dim)).expect("non-zero rows");
    let mut state = MocoState::new(8, dim, 0.999, 0.2).expect("valid MoCo settings");
    state
        .enqueue(&EmbeddingBatch::normalized(Modality::Point, dim, gaussian_rows(rng, 8 * dim)).expect("non-zero rows"))
        .expect("queue width");
    let s = c.upstream;
    let loss = |xq: &[f64]| {
        let q = EmbeddingBatch::new(Modality::Point, dim, normalize_rows(xq, dim)).expect("unit rows");
        moco_loss_with_grad(&q, &keys, &state).expect("matching batches")
    };
    let (_, g) = loss(&xq);
    let analytic = normalize_rows_vjp(&xq, &g, dim).into_iter().map(|v| v * s).collect();
    c.full_block("query", &xq, analytic, |x| s * loss(x).0);
}

fn check_token_ce(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let (g, v) = (6, 5);
    let logits: Vec<f64> = (0..g * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<usize> = (0..g).map(|_| rng.random_range(0..v)).collect();
    let mut mask: Vec<bool> = (0..g).map(|_| rng.random::<bool>()).collect();
    mask[0] = true;
    let s = c.upstream;
    let (_, grad) = token_ce_with_grad(&logits, v, &targets, &mask).expect("valid tokens");
    let analytic = grad.into_iter().map(|x| x * s).collect();
    c.full_block("logits", &logits, analytic, |x| {
        s * token_ce_with_grad(x, v, &targets, &mask).expect("valid tokens").0
    });
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn_ratio: 2,
            droppath_rate: 0.0,
        },
        group_count: 8,
        group_size: 8,
        vocab: 5,
        image_size: 16,
    }
}

fn check_backbone(c: &mut Checker, rng: &mut ChaCha8Rng) {
    let cfg = tiny_model_config();
    let (model, mut ps) = PointModel::new(cfg, rng.random()).expect("valid tiny config");
    // move away from the near-zero head outputs of the initialization, where
    // the final normalization is too curved for a central difference
    for id in ps.ids().collect::<Vec<_>>() {
        ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let pts = cloud(&random_points(rng, 64, 1.0));
    let tokens = model.group(&pts, rng.random()).expect("enough points");
    let visible = [0, 2, 3, 5, 6];
    let masked = [1, 4, 7];
    let image = |rng: &mut ChaCha8Rng, ch: usize| {
        let n = cfg.image_size;
        Image::new(n, n, ch, (0..n * n * ch).map(|_| rng.random()).collect()).expect("values in [0, 1]")
    };
    let (rgb, depth) = (image(rng, 3), image(rng, 1));
    let dim = cfg.encoder.dim;
    let k = cfg.group_size;
    let coef = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| c.upstream * rng.random_range(-1.0..1.0)).collect() };
    let cots = [
        coef(rng, dim),
        coef(rng, masked.len() * cfg.vocab),
        coef(rng, masked.len() * k * 3),
        coef(rng, dim),
        coef(rng, dim),
    ];

    // scalar = Σ cotangent ⊙ output over every head of the network
    let forward = |ps: &ParamStore, grads: bool| -> (f64, Option<Vec<Option<Tensor>>>) {
        let mut t = Tape::new(ps);
        let emb = model.embed_groups(&mut t, &tokens);
        let all: Vec<usize> = (0..cfg.group_count).collect();
        let enc = model.encode(&mut t, emb, &all, Mode::Eval, 0).expect("width");
        let gp = model.point_embedding(&mut t, enc);
        let enc_v = model.encode(&mut t, emb, &visible, Mode::Eval, 0).expect("width");
        let logits = model.decode_tokens(&mut t, enc_v, emb, &masked).expect("masked groups");
        let rec = model.decode_points(&mut t, enc_v, emb, &tokens, &masked).expect("masked groups");
        let gr = model.image_encoder(ImageKind::Rgb).forward(&mut t, &rgb).expect("image size");
        let gd = model.image_encoder(ImageKind::Depth).forward(&mut t, &depth).expect("image size");
        let outs = [gp, logits, rec, gr, gd];
        let value: f64 = outs.iter().zip(&cots).map(|(v, c)| dot(t.value(*v).data(), c)).sum();
        let g = grads.then(|| {
            let seeds: Vec<(crate::nn::Var, Tensor)> = outs
                .iter()
                .zip(&cots)
                .map(|(v, c)| (*v, Tensor::from_vec(t.value(*v).shape(), c.clone()).expect("matching size")))
                .collect();
            t.backward(&seeds).into_params()
        });
        (value, g)
    };
    let (_, grads) = forward(&ps, true);
    let grads = grads.expect("requested");
    let blocks = [
        "embed.fc1.w",
        "embed.fc2.b",
        "pos.fc1.w",
        "cls_token",
        "encoder.0.qkv.w",
        "encoder.1.ffn.fc2.w",
        "encoder.1.ln1.g",
        "norm.b",
        "tta.mask",
        "tta.0.proj.w",
        "tta.head.w",
        "pta.mask",
        "pta.3.ffn.fc1.w",
        "pta.head.b",
        "point_head.fc2.w",
        "rgb.conv0.w",
        "rgb.head.fc1.w",
        "depth.conv3.w",
        "depth.head.fc2.b",
    ];
    for name in blocks {
        let id = ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let x = ps.get(id).data().to_vec();
        let entries = index::sample(rng, x.len(), BACKBONE_ENTRIES.min(x.len())).into_vec();
        let analytic: Vec<f64> = match &grads[id.0] {
            Some(g) => entries.iter().map(|&i| g.data()[i]).collect(),
            None => vec![0.0; entries.len()],
        };
        c.block(name, &x, &entries, analytic, |xv| {
            let mut p = ps.clone();
            p.get_mut(id).data_mut().copy_from_slice(xv);
            forward(&p, false).0
        });
    }
}
