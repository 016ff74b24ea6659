use avitmp_core::gradsuite::check_block;
use avitmp_core::losses::{giou_loss, giou_loss_var, lbhinge, total_loss, LossConfig};
use avitmp_core::numerics::{Tape, Tensor};
use avitmp_core::{BBox, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `1 − GIoU` from corner coordinates.
fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    1.0 - (inter / union - (hull - union) / hull)
}

fn corners(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.x + b.w, b.y + b.h]
}

#[test]
fn lbhinge_per_cell_oracle() {
    let y = Tensor::new([2, 3], vec![1.0, 0.5, 0.05, 0.04, 0.0, 0.2]).unwrap();
    let p = Tensor::new([2, 3], vec![0.8, -0.3, -0.1, -2.0, 0.7, 0.2]).unwrap();
    // fg: y ≥ 0.05 uses the raw prediction, bg hinges it at zero
    let cells = [
        (0.8f64 - 1.0).powi(2),
        (-0.3f64 - 0.5).powi(2),
        (-0.1f64 - 0.05).powi(2),
        (0.0f64 - 0.04).powi(2),
        (0.7f64 - 0.0).powi(2),
        (0.2f64 - 0.2).powi(2),
    ];
    let want = cells.iter().sum::<f64>() / 6.0;
    assert!((lbhinge(&p, &y, 0.05).unwrap() - want).abs() < 1e-15);

    let negatives = Tensor::filled([2, 3], -4.0);
    assert_eq!(lbhinge(&negatives, &Tensor::zeros([2, 3]), 0.05).unwrap(), 0.0);
    assert!(lbhinge(&p, &Tensor::zeros([3, 2]), 0.05).is_err());
}

#[test]
fn giou_worked_example_and_identity() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
    assert!((giou_loss(&a, &b).unwrap() - 68.0 / 63.0).abs() < 1e-12);
    assert!((giou_oracle(corners(&a), corners(&b)) - 68.0 / 63.0).abs() < 1e-12);
    assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
    assert!(giou_loss(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
}

#[test]
fn giou_matches_oracle_and_is_translation_invariant() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let rnd_box = |r: &mut ChaCha8Rng| {
        BBox::new(
            r.random_range(-50.0..50.0),
            r.random_range(-50.0..50.0),
            r.random_range(0.5..40.0),
            r.random_range(0.5..40.0),
        )
    };
    for _ in 0..1000 {
        let (a, b) = (rnd_box(&mut r), rnd_box(&mut r));
        let l = giou_loss(&a, &b).unwrap();
        assert!((l - giou_oracle(corners(&a), corners(&b))).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&l));
        let (dx, dy) = (r.random_range(-100.0..100.0), r.random_range(-100.0..100.0));
        let moved = giou_loss(&a.translate(dx, dy), &b.translate(dx, dy)).unwrap();
        assert!((l - moved).abs() < 1e-9);
    }
}

#[test]
fn giou_var_averages_cells() {
    let t = Tape::new();
    let ltrb = t.constant(&Tensor::new([2, 4], vec![0.1, 0.1, 0.1, 0.1, 0.05, 0.2, 0.15, 0.0]).unwrap());
    let centers = [(0.3, 0.3), (0.6, 0.4)];
    let gt = BBox::new(0.25, 0.2, 0.3, 0.2);
    let l = t.scalar(giou_loss_var(&t, ltrb, &centers, &gt).unwrap());
    let a = giou_oracle([0.2, 0.2, 0.4, 0.4], corners(&gt));
    let b = giou_oracle([0.55, 0.2, 0.75, 0.4], corners(&gt));
    assert!((l - (a + b) / 2.0).abs() < 1e-12);
}

fn label_and_maps(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor, Tensor, BBox) {
    let g = cfg.grid();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let gt = BBox::new(20.0, 24.0, 22.0, 18.0);
    let y = avitmp_core::encoder::gaussian_label(&gt, cfg, cfg.sigma_factor).unwrap();
    let score = Tensor::from_fn([g * g, 1], |_| r.random_range(-1.0..1.0));
    let ltrb = Tensor::from_fn([g * g, 4], |_| r.random_range(0.05..0.3));
    (y, score, ltrb, gt)
}

#[test]
fn total_loss_recomposes() {
    let cfg = ModelConfig::desk();
    let g = cfg.grid();
    let (y, score, ltrb, gt) = label_and_maps(&cfg, 1);
    let lc = LossConfig::default();
    let t = Tape::new();
    let terms = total_loss(&t, t.constant(&score), &y, t.constant(&ltrb), &gt, &cfg, &lc).unwrap();
    let cls = lbhinge(&score.reshape([g, g]).unwrap(), &y, lc.hinge_threshold).unwrap();

    let side = cfg.frame_side as f64;
    let mut reg = Vec::new();
    for i in 0..g * g {
        if y.data()[i] < lc.hinge_threshold {
            continue;
        }
        let (xc, yc) = (((i % g) as f64 + 0.5) * 8.0, ((i / g) as f64 + 0.5) * 8.0);
        let d = &ltrb.data()[i * 4..i * 4 + 4];
        let pred = [xc - d[0] * side, yc - d[1] * side, xc + d[2] * side, yc + d[3] * side];
        reg.push(giou_oracle(pred, corners(&gt)));
    }
    let reg = reg.iter().sum::<f64>() / reg.len() as f64;
    assert!((t.scalar(terms.cls) - cls).abs() < 1e-12);
    assert!((t.scalar(terms.reg) - reg).abs() < 1e-12);
    assert!((t.scalar(terms.total) - (200.0 * cls + reg)).abs() < 1e-9);
}

#[test]
fn total_loss_is_linear_in_lambda() {
    let cfg = ModelConfig::desk();
    let (y, score, ltrb, gt) = label_and_maps(&cfg, 2);
    let at = |lambda: f64| {
        let lc = LossConfig {
            lambda_cls: lambda,
            ..LossConfig::default()
        };
        let t = Tape::new();
        let terms = total_loss(&t, t.constant(&score), &y, t.constant(&ltrb), &gt, &cfg, &lc).unwrap();
        t.scalar(terms.total)
    };
    let (a, b, c) = (at(1.0), at(2.0), at(3.0));
    assert!(((b - a) - (c - b)).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for block in ["lbhinge", "giou", "total_loss"] {
        for seed in 0..20 {
            let rep = check_block(block, seed, None).unwrap();
            assert!(rep.pass, "{block} seed {seed}: {}", rep.max_rel_error());
        }
    }
}
