use avitmp_core::synthworld::{
    evaluate, generate_sequence, load_sequence, read_frame, save_sequence, success_thresholds, write_frame,
    OcclusionEvent, WorldConfig, OCCLUDER_VALUE,
};
use avitmp_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn same_seed_same_sequence() {
    let cfg = WorldConfig::distractor();
    let a = generate_sequence(&cfg, 11).unwrap();
    let b = generate_sequence(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_sequence(&cfg, 12).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn lone_target_moves_rigidly() {
    let cfg = WorldConfig {
        jitter: 0.0,
        ..WorldConfig::easy()
    };
    let seq = generate_sequence(&cfg, 3).unwrap();
    let patch = |t: usize| {
        let b = seq.gt[t];
        let (x0, y0) = (b.x as usize, b.y as usize);
        let mut v = Vec::new();
        for y in y0..y0 + b.h as usize {
            for x in x0..x0 + b.w as usize {
                for c in 0..3 {
                    v.push(seq.frames[t].at(&[y, x, c]).to_bits());
                }
            }
        }
        v
    };
    let first = patch(0);
    let mut moved = false;
    for t in 1..cfg.length {
        assert_eq!(patch(t), first, "frame {t}");
        moved |= seq.gt[t] != seq.gt[0];
    }
    assert!(moved);
}

#[test]
fn boxes_stay_inside_the_frame() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for k in 0..1000 {
        let side = r.random_range(32..96);
        let cfg = WorldConfig {
            frame_side: side,
            length: r.random_range(1..6),
            objects: r.random_range(1..4),
            similarity: r.random_range(0.0..=1.0),
            speed: r.random_range(0.0..8.0),
            jitter: r.random_range(0.0..3.0),
            scale_drift: r.random_range(-0.2..0.2),
            target_size: r.random_range(4.0..side as f64 / 2.0),
            ..WorldConfig::easy()
        };
        let seq = generate_sequence(&cfg, k).unwrap();
        let s = side as f64;
        assert_eq!(seq.frames.len(), seq.gt.len());
        for b in seq.gt.iter().chain(seq.distractors.iter().flatten()) {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= s && b.y2() <= s, "config {k}: {b:?}");
            assert!(b.w >= 1.0 && b.h >= 1.0);
        }
        for f in &seq.frames {
            assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v) && (v * 255.0).fract() == 0.0));
        }
    }
}

#[test]
fn event_log_matches_occluded_pixels() {
    let cfg = WorldConfig {
        occlusions: vec![
            OcclusionEvent {
                start: 5,
                end: 9,
                coverage: 0.6,
            },
            OcclusionEvent {
                start: 15,
                end: 18,
                coverage: 0.3,
            },
        ],
        ..WorldConfig::easy()
    };
    let seq = generate_sequence(&cfg, 8).unwrap();
    let mut heavy = Vec::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let b = seq.gt[t];
        let mut dark = 0;
        for y in b.y as usize..b.y2() as usize {
            for x in b.x as usize..b.x2() as usize {
                if (0..3).all(|c| f.at(&[y, x, c]) == OCCLUDER_VALUE) {
                    dark += 1;
                }
            }
        }
        let measured = dark as f64 / b.area();
        assert!((measured - seq.events[t].occluded_fraction).abs() < 1e-12, "frame {t}");
        if measured >= 0.5 {
            heavy.push(t);
        }
    }
    let logged: Vec<usize> = seq.events.iter().filter(|e| e.occluded_fraction >= 0.5).map(|e| e.frame).collect();
    assert_eq!(heavy, logged);
    assert_eq!(logged, vec![5, 6, 7, 8]);
}

fn metrics_oracle(pred: &[BBox], gt: &[BBox]) -> (f64, f64, usize) {
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| {
        let iw = (p.x2().min(g.x2()) - p.x.max(g.x)).max(0.0);
        let ih = (p.y2().min(g.y2()) - p.y.max(g.y)).max(0.0);
        let i = iw * ih;
        i / (p.w * p.h + g.w * g.h - i)
    }).collect();
    let mut auc = 0.0;
    for k in 0..=20 {
        let th = k as f64 / 20.0;
        auc += ious.iter().filter(|v| **v >= th).count() as f64 / ious.len() as f64;
    }
    let prec = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (a, b) = (p.center(), g.center());
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= 20.0
        })
        .count() as f64
        / gt.len() as f64;
    let mut runs = 0;
    for (i, v) in ious.iter().enumerate() {
        if *v == 0.0 && (i == 0 || ious[i - 1] != 0.0) {
            runs += 1;
        }
    }
    (auc / 21.0, prec, runs)
}

#[test]
fn metrics_match_direct_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = r.random_range(1..30);
        let mut rb = || BBox::new(r.random_range(0.0..60.0), r.random_range(0.0..60.0), r.random_range(1.0..30.0), r.random_range(1.0..30.0));
        let gt: Vec<BBox> = (0..n).map(|_| rb()).collect();
        let pred: Vec<BBox> = (0..n).map(|_| rb()).collect();
        let m = evaluate(&pred, &gt).unwrap();
        let (auc, prec, runs) = metrics_oracle(&pred, &gt);
        assert!((m.auc - auc).abs() < 1e-12);
        assert!((m.precision - prec).abs() < 1e-12);
        assert_eq!(m.failures, runs);
        assert!((0.0..=1.0).contains(&m.auc));

        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let p2: Vec<BBox> = perm.iter().map(|&i| pred[i]).collect();
        let g2: Vec<BBox> = perm.iter().map(|&i| gt[i]).collect();
        let m2 = evaluate(&p2, &g2).unwrap();
        assert!((m.auc - m2.auc).abs() < 1e-12);
        let permuted: Vec<f64> = perm.iter().map(|&i| m.iou[i]).collect();
        assert_eq!(m2.iou, permuted);
    }
}

#[test]
fn metric_boundaries() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(5.0, 5.0, 4.0, 4.0)];
    let m = evaluate(&gt, &gt).unwrap();
    assert_eq!((m.auc, m.precision, m.failures), (1.0, 1.0, 0));
    let far = vec![BBox::new(50.0, 50.0, 3.0, 3.0); 2];
    let m = evaluate(&far, &gt).unwrap();
    assert!((m.auc - 1.0 / 21.0).abs() < 1e-15);
    assert_eq!(m.failures, 1);
    assert_eq!(success_thresholds().len(), 21);
    assert!(evaluate(&far[..1], &gt).is_err());
    assert!(evaluate(&[], &[]).is_err());

    // round-off from crop mapping must not cost the top threshold
    let g = BBox::new(77.0, 92.0, 29.0, 20.0);
    let p = BBox::new(77.0, 92.0 + 1e-12, 29.0, 20.0 - 1e-12);
    assert!(p.iou(&g) < 1.0);
    assert_eq!(evaluate(&[p], &[g]).unwrap().auc, 1.0);
}

#[test]
fn sequence_directory_round_trips() {
    let seq = generate_sequence(&WorldConfig::distractor(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&seq, dir.path()).unwrap();
    assert!(dir.path().join("config.txt").is_file());
    assert!(dir.path().join("gt.csv").is_file());
    let back = load_sequence(dir.path()).unwrap();
    assert_eq!(back, seq);

    let mut buf = Vec::new();
    write_frame(&seq.frames[0], &mut buf).unwrap();
    assert_eq!(&buf[..4], b"AVFR");
    assert_eq!(buf.len(), 16 + 128 * 128 * 3);
    assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), seq.frames[0]);
    buf[0] = b'X';
    assert!(read_frame(&mut buf.as_slice()).is_err());
    assert!(load_sequence(&dir.path().join("missing")).is_err());
}

#[test]
fn config_validation() {
    assert!(WorldConfig::easy().validate().is_ok());
    let bad = WorldConfig {
        similarity: 1.5,
        ..WorldConfig::easy()
    };
    assert!(bad.validate().is_err());
    assert!(generate_sequence(&WorldConfig { length: 0, ..WorldConfig::easy() }, 1).is_err());
}
