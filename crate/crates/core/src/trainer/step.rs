//! One optimizer step over a batch of triplets.
//!
//! Each sample builds its own tape (in parallel); the batch-level
//! contrastive losses are evaluated outside the tapes and their gradients
//! seed each sample's backward pass. Gradients are summed in sample order,
//! so results do not depend on the thread count.

use rayon::prelude::*;

use super::{adamw_update, base_cloud, scheduled_lr, warmup_steps, StepMetrics, TrainConfig, TrainState};
use crate::backbone::{mask_tokens, momentum_update, Mode, PointModel, Tokenizer};
use crate::data::{augment_rgb, CloudAugment, Triplet};
use crate::error::{domain, Error, Result};
use crate::geometry::{CameraPose, PointCloud, Vec3};
use crate::losses::{
    chamfer_with_grad, cross_modal_nce_with_grad, dr_loss_with_grad, moco_loss_with_grad, token_ce_with_grad,
    total_loss, ContrastiveHead, EmbeddingBatch, LossParts, Modality, MocoState,
};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::renderer::{render_views, render_views_vjp, render_vjp};
use crate::rng::{derive_seed, stream, tag};

/// Read-only inputs shared by every sample of a step.
struct StepCtx<'a> {
    cfg: &'a TrainConfig,
    model: &'a PointModel,
    params: &'a ParamStore,
    key_params: &'a ParamStore,
    tokenizer: &'a Tokenizer,
    moco: &'a MocoState,
    poses: &'a [CameraPose],
    step: u64,
    batch_len: usize,
}

/// Forward pass of one sample, kept alive for its backward pass.
struct SampleWork<'p> {
    tape: Tape<'p>,
    /// `(L_MoCo + L_CE + L_DR + L_CD) / B`.
    loss: Var,
    g_p: Var,
    g_r: Var,
    g_d: Var,
    l_moco: f64,
    l_ce: f64,
    l_dr: f64,
    l_cd: f64,
    key: Vec<f64>,
}

fn flat(points: Vec<Vec3>) -> Vec<f64> {
    points.into_iter().flatten().collect()
}

fn world_points(tokens: &crate::backbone::GroupedTokens, groups: &[usize]) -> Vec<Vec3> {
    groups.iter().flat_map(|&g| tokens.world_points(g)).collect()
}

fn forward_sample<'p>(ctx: &StepCtx<'p>, triplet: &Triplet) -> Result<SampleWork<'p>> {
    let (cfg, model) = (ctx.cfg, ctx.model);
    let s = derive_seed(cfg.seed, &[ctx.step, triplet.object_id]);
    let base = base_cloud(triplet, cfg.seed)?;
    let view_a = CloudAugment::sample(&mut stream(s, &[tag::AUG_A])).apply(&base);
    let view_b = CloudAugment::sample(&mut stream(s, &[tag::AUG_B])).apply(&base);
    let tok_a = model.group(&view_a, derive_seed(s, &[tag::AUG_A]))?;
    let tok_b = model.group(&view_b, derive_seed(s, &[tag::AUG_B]))?;
    let tok_c = model.group(&base, derive_seed(s, &[tag::MASK_PTA]))?;
    let g = tok_a.num_groups();
    let all: Vec<usize> = (0..g).collect();
    let dim = model.dim();

    // key encoder: second view, no gradient
    let key = {
        let mut kt = Tape::new(ctx.key_params);
        let emb = model.embed_groups(&mut kt, &tok_b);
        let enc = model.encode(&mut kt, emb, &all, Mode::Eval, 0)?;
        let k = model.moco_embedding(&mut kt, enc);
        kt.value(k).data().to_vec()
    };

    let mut t = Tape::new(ctx.params);

    // full view A: point embedding and MoCo query
    let emb_a = model.embed_groups(&mut t, &tok_a);
    let enc_full = model.encode(&mut t, emb_a, &all, Mode::Train, derive_seed(s, &[tag::DROP_PATH, 0]))?;
    let g_p = model.point_embedding(&mut t, enc_full);
    let q = model.moco_embedding(&mut t, enc_full);
    let (l_moco, gq) = moco_loss_with_grad(
        &EmbeddingBatch::new(Modality::Point, dim, t.value(q).data().to_vec())?,
        &EmbeddingBatch::new(Modality::Point, dim, key.clone())?,
        ctx.moco,
    )?;
    let moco_node = t.scalar_with_grad(q, l_moco, gq);

    // token-level auto-encoder on view A
    let (vis, masked) = mask_tokens(g, cfg.mask_ratio, derive_seed(s, &[tag::MASK_TTA]))?;
    let enc_v = model.encode(&mut t, emb_a, &vis, Mode::Train, derive_seed(s, &[tag::DROP_PATH, 1]))?;
    let logits = model.decode_tokens(&mut t, enc_v, emb_a, &masked)?;
    let ids = ctx.tokenizer.tokenize(&tok_a);
    let targets: Vec<usize> = masked.iter().map(|&i| ids[i]).collect();
    let (l_ce, gl) = token_ce_with_grad(
        t.value(logits).data(),
        cfg.codebook_size,
        &targets,
        &vec![true; masked.len()],
    )?;
    let ce_node = t.scalar_with_grad(logits, l_ce, gl);

    // point-level auto-encoder on the unaugmented cloud
    let emb_c = model.embed_groups(&mut t, &tok_c);
    let (vis_c, masked_c) = mask_tokens(g, cfg.mask_ratio, derive_seed(s, &[tag::MASK_PTA]))?;
    let enc_c = model.encode(&mut t, emb_c, &vis_c, Mode::Train, derive_seed(s, &[tag::DROP_PATH, 2]))?;
    let rec = model.decode_points(&mut t, enc_c, emb_c, &tok_c, &masked_c)?;
    let rec_cloud = PointCloud::from_flat(t.value(rec).data())?;
    let target = PointCloud::new(world_points(&tok_c, &masked_c))?;
    let (l_cd, gcd) = chamfer_with_grad(&rec_cloud, &target, cfg.chamfer)?;
    let cd_node = t.scalar_with_grad(rec, l_cd, flat(gcd));

    // completed cloud = visible original points + reconstruction
    let visible = flat(world_points(&tok_c, &vis_c));
    let visible = t.constant(Tensor::matrix(visible.len() / 3, 3, visible));
    let completed = t.concat_rows(&[visible, rec]);
    let completed_cloud = PointCloud::from_flat(t.value(completed).data())?;
    let gt_cloud = PointCloud::new(world_points(&tok_c, &all))?;
    let rc = cfg.render;
    let pred = render_views(&completed_cloud, ctx.poses, &rc);
    let gt = render_views(&gt_cloud, ctx.poses, &rc);
    let (l_dr, gimg) = dr_loss_with_grad(&pred, &gt)?;
    let gpts = render_views_vjp(&completed_cloud, ctx.poses, &rc, &gimg)?;
    let dr_node = t.scalar_with_grad(completed, l_dr, flat(gpts));

    // one depth view of the completed cloud feeds the depth encoder
    let view = triplet.depth_view_index;
    let pose = ctx.poses[view];
    let depth_value = Tensor::from_vec(&[1, rc.image_height, rc.image_width], pred[view].pixels.clone())?;
    let depth_in = t.custom(completed, depth_value, move |up, input| {
        let cloud = PointCloud::from_flat(input).expect("completed cloud stays finite");
        flat(render_vjp(&cloud, &pose, &rc, up).expect("upstream matches the image size"))
    });
    let g_d = model.depth.forward_var(&mut t, depth_in)?;

    let size = cfg.image_size;
    let rgb = augment_rgb(&triplet.rgb, cfg.rgb_jitter, derive_seed(s, &[tag::AUG_RGB])).resized(size, size);
    let g_r = model.rgb.forward(&mut t, &rgb)?;

    let w = 1.0 / ctx.batch_len as f64;
    let loss = t.weighted_sum(&[(moco_node, w), (ce_node, w), (dr_node, w), (cd_node, w)]);
    Ok(SampleWork {
        tape: t,
        loss,
        g_p,
        g_r,
        g_d,
        l_moco,
        l_ce,
        l_dr,
        l_cd,
        key,
    })
}

fn stack(works: &[SampleWork], pick: impl Fn(&SampleWork) -> Var, modality: Modality, dim: usize) -> Result<EmbeddingBatch> {
    let data = works.iter().flat_map(|w| w.tape.value(pick(w)).data().to_vec()).collect();
    EmbeddingBatch::new(modality, dim, data)
}

fn row(g: &[f64], i: usize, dim: usize) -> &[f64] {
    &g[i * dim..(i + 1) * dim]
}

/// Runs one optimizer step on `batch` and advances `state`.
///
/// On error (including a non-finite loss or gradient) the state is left
/// untouched.
pub fn pretrain_step(state: &mut TrainState, batch: &[&Triplet]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(domain("pre-training step needs a non-empty batch"));
    }
    let cfg = &state.config;
    let total = state.total_steps();
    let lr = scheduled_lr(state.step, total, cfg.lr, warmup_steps(cfg, total));
    let poses = crate::geometry::generate_camera_poses(crate::data::CAMERA_RADIUS)?;
    let dim = state.model.dim();
    let ctx = StepCtx {
        cfg,
        model: &state.model,
        params: &state.params,
        key_params: &state.key_params,
        tokenizer: &state.tokenizer,
        moco: &state.moco,
        poses: &poses,
        step: state.step,
        batch_len: batch.len(),
    };
    let works: Vec<SampleWork> = batch
        .par_iter()
        .map(|tr| forward_sample(&ctx, tr))
        .collect::<Result<_>>()?;

    let p = stack(&works, |w| w.g_p, Modality::Point, dim)?;
    let r = stack(&works, |w| w.g_r, Modality::Rgb, dim)?;
    let d = stack(&works, |w| w.g_d, Modality::Depth, dim)?;
    let head = ContrastiveHead {
        log_tau: state.params.get(state.model.log_tau).data()[0],
    };
    let (l_rd, g_rd) = cross_modal_nce_with_grad(&r, &d, &head)?;
    let (l_rp, g_rp) = cross_modal_nce_with_grad(&r, &p, &head)?;
    let (l_pd, g_pd) = cross_modal_nce_with_grad(&p, &d, &head)?;
    let n = works.len() as f64;
    let parts = LossParts {
        l_rd,
        l_rp,
        l_pd,
        l_moco: works.iter().map(|w| w.l_moco).sum::<f64>() / n,
        l_ce: works.iter().map(|w| w.l_ce).sum::<f64>() / n,
        l_dr: works.iter().map(|w| w.l_dr).sum::<f64>() / n,
        l_cd: works.iter().map(|w| w.l_cd).sum::<f64>() / n,
    };
    let lw = cfg.loss_weights;
    let total_value = total_loss(&parts, &lw)?;

    let combine = |terms: [(&[f64], f64); 2], i: usize| -> Tensor {
        let mut v = vec![0.0; dim];
        for (g, c) in terms {
            v.iter_mut().zip(row(g, i, dim)).for_each(|(a, b)| *a += c * b);
        }
        Tensor::matrix(1, dim, v)
    };
    let per_sample: Vec<Vec<Option<Tensor>>> = works
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let seeds = [
                (w.loss, Tensor::scalar(1.0)),
                (w.g_r, combine([(&g_rd.a, lw.alpha), (&g_rp.a, lw.beta)], i)),
                (w.g_d, combine([(&g_rd.b, lw.alpha), (&g_pd.b, lw.theta)], i)),
                (w.g_p, combine([(&g_rp.b, lw.beta), (&g_pd.a, lw.theta)], i)),
            ];
            w.tape.backward(&seeds).into_params()
        })
        .collect();
    let mut grads: Vec<Option<Tensor>> = (0..state.params.len()).map(|_| None).collect();
    for sample in per_sample {
        for (acc, g) in grads.iter_mut().zip(sample) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let dtau = lw.alpha * g_rd.log_tau + lw.beta * g_rp.log_tau + lw.theta * g_pd.log_tau;
    let tau_id = state.model.log_tau.0;
    match grads[tau_id].as_mut() {
        Some(g) => g.data_mut()[0] += dtau,
        None => grads[tau_id] = Some(Tensor::from_vec(&[1], vec![dtau])?),
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.data().iter().any(|v| !v.is_finite()) {
                let name = state.params.name(crate::nn::ParamId(i));
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    let keys: Vec<f64> = works.iter().flat_map(|w| w.key.iter().copied()).collect();
    drop(works);

    let (wd, t) = (state.config.weight_decay, state.step + 1);
    adamw_update(&mut state.params, &grads, &mut state.adam_m, &mut state.adam_v, t, lr, wd);
    state.clamp_log_tau();
    let ids = state.model.momentum_ids(&state.params);
    momentum_update(&mut state.key_params, &state.params, &ids, state.config.moco.momentum)?;
    state.moco.enqueue(&EmbeddingBatch::new(Modality::Point, dim, keys)?)?;
    state.step = t;
    Ok(StepMetrics {
        step: t,
        lr,
        l_rd,
        l_rp,
        l_pd,
        l_moco: parts.l_moco,
        l_ce: parts.l_ce,
        l_dr: parts.l_dr,
        l_cd: parts.l_cd,
        total: total_value,
    })
}
