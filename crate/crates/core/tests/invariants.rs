use proptest::prelude::*;

use drpoint::geometry::{camera_to_world, generate_camera_poses, normalize_cloud, norm, world_to_camera};
use drpoint::losses::{
    chamfer, cross_modal_nce, dr_loss, fscore, moco_loss, ChamferVariant, ContrastiveHead, EmbeddingBatch, Modality,
    MocoState,
};
use drpoint::renderer::{ray_termination, render, OccupancyGrid};
use drpoint::trainer::scheduled_lr;
use drpoint::{PointCloud, RenderConfig, Vec3};

fn point(r: f64) -> impl Strategy<Value = Vec3> {
    [-r..r, -r..r, -r..r]
}

fn cloud(max: usize, r: f64) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(r), 1..=max).prop_map(|p| PointCloud::new(p).unwrap())
}

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * dim).prop_filter("non-zero rows", move |v| {
        v.chunks(dim).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_clouds_are_centered_in_the_unit_ball(c in cloud(40, 5.0)) {
        let n = normalize_cloud(&c).unwrap();
        let pts = n.cloud.points();
        let len = pts.len() as f64;
        for k in 0..3 {
            prop_assert!((pts.iter().map(|p| p[k]).sum::<f64>() / len).abs() < 1e-9);
        }
        let r = pts.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        prop_assert!(n.degenerate || (r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn camera_transform_round_trips(c in cloud(20, 1.0), t in 0usize..32) {
        let pose = generate_camera_poses(2.0).unwrap()[t];
        let back = camera_to_world(&world_to_camera(&c, &pose), &pose);
        for (a, b) in c.points().iter().zip(back.points()) {
            prop_assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn ray_probabilities_sum_to_one(
        (d, h, w, values) in (1usize..12, 1usize..5, 1usize..5)
            .prop_flat_map(|(d, h, w)| (Just(d), Just(h), Just(w), prop::collection::vec(0.0..=1.0f64, d * h * w)))
    ) {
        let term = ray_termination(&OccupancyGrid::new(d, h, w, values).unwrap());
        for pix in 0..h * w {
            let s: f64 = (0..d).map(|k| term.values[k * h * w + pix]).sum::<f64>() + term.residual[pix];
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..d).all(|k| term.values[k * h * w + pix] >= 0.0));
        }
    }

    #[test]
    fn rendered_depth_stays_in_range(c in cloud(12, 1.0), t in 0usize..32) {
        let pose = generate_camera_poses(2.0).unwrap()[t];
        let img = render(&c, &pose, &RenderConfig::cube(8));
        prop_assert_eq!(img.pixels.len(), 64);
        prop_assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(dr_loss(&[img.clone()], &[img]).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_is_symmetric_and_vanishes_on_itself(p in cloud(20, 1.0), q in cloud(20, 1.0)) {
        for v in [ChamferVariant::L1, ChamferVariant::L2] {
            let (pq, qp) = (chamfer(&p, &q, v).unwrap(), chamfer(&q, &p, v).unwrap());
            prop_assert!(pq >= 0.0 && (pq - qp).abs() < 1e-12);
            prop_assert_eq!(chamfer(&p, &p, v).unwrap(), 0.0);
        }
        let f = fscore(&p, &q, 0.1).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(fscore(&p, &p, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn nce_is_invariant_to_joint_row_permutation(a in rows(4, 3), b in rows(4, 3), tau in 0.02..1.0f64) {
        let a = EmbeddingBatch::normalized(Modality::Rgb, 3, a).unwrap();
        let b = EmbeddingBatch::normalized(Modality::Point, 3, b).unwrap();
        let head = ContrastiveHead::with_tau(tau);
        let base = cross_modal_nce(&a, &b, &head).unwrap();
        let perm = [2, 0, 3, 1];
        let moved = cross_modal_nce(&a.permuted(&perm), &b.permuted(&perm), &head).unwrap();
        prop_assert!(base >= 0.0 && (base - moved).abs() < 1e-10);
        prop_assert!((base - cross_modal_nce(&b, &a, &head).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn moco_queue_is_bounded_and_order_free(keys in rows(7, 3), cap in 1usize..6) {
        let keys = EmbeddingBatch::normalized(Modality::Point, 3, keys).unwrap();
        let mut q = MocoState::new(cap, 3, 0.999, 0.07).unwrap();
        q.enqueue(&keys).unwrap();
        prop_assert_eq!(q.len(), cap.min(7));
        let newest: Vec<&[f64]> = q.keys().collect();
        prop_assert_eq!(*newest.last().unwrap(), keys.row(6));

        let query = keys.permuted(&[0]);
        let mut reversed = MocoState::new(cap, 3, 0.999, 0.07).unwrap();
        let order: Vec<usize> = (7 - cap.min(7)..7).rev().collect();
        reversed.enqueue(&keys.permuted(&order)).unwrap();
        let (x, y) = (moco_loss(&query, &query, &q).unwrap(), moco_loss(&query, &query, &reversed).unwrap());
        prop_assert!(x >= 0.0 && (x - y).abs() < 1e-10);
    }

    #[test]
    fn learning_rate_schedule_is_bounded(total in 1u64..500, warm in 0u64..50, step_frac in 0.0..1.0f64) {
        let step = (step_frac * total as f64) as u64;
        let lr = scheduled_lr(step, total, 5e-4, warm.min(total));
        prop_assert!((0.0..=5e-4).contains(&lr));
    }
}
