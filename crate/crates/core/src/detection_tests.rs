use super::*;
use crate::params::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ann(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Annotation {
    Annotation { class_id, bbox: BBox::new(x0, y0, x1, y1) }
}

fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
    Detection { class_id, score, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
}

fn toy_geometry(side: usize) -> Vec<LevelGeometry> {
    let cfg = HeadConfig::default();
    [8, 4, 2]
        .iter()
        .zip(&cfg.scale_ranges)
        .map(|(&stride, &range)| LevelGeometry {
            height: side / stride,
            width: side / stride,
            stride,
            range,
        })
        .collect()
}

#[test]
fn centerness_closed_forms() {
    assert_eq!(centerness(&[2.0, 3.0, 2.0, 3.0]), 1.0);
    assert!((centerness(&[1.0, 1.0, 3.0, 3.0]) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn box_iou_closed_forms() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(a.iou(&a), 1.0);
    assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
}

#[test]
fn annotations_are_validated() {
    assert!(ann(0, 1.0, 1.0, 4.0, 4.0).validate(2, 8, 8).is_ok());
    assert!(ann(2, 1.0, 1.0, 4.0, 4.0).validate(2, 8, 8).is_err());
    assert!(ann(0, 4.0, 1.0, 4.0, 4.0).validate(2, 8, 8).is_err());
    assert!(ann(0, 1.0, 1.0, 9.0, 4.0).validate(2, 8, 8).is_err());
    assert!(ann(0, -1.0, 1.0, 4.0, 4.0).validate(2, 8, 8).is_err());
    assert!(ann(0, f64::NAN, 1.0, 4.0, 4.0).validate(2, 8, 8).is_err());
}

#[test]
fn assignment_respects_boxes_ranges_and_area_ties() {
    let geom = vec![LevelGeometry { height: 8, width: 8, stride: 2, range: (0.0, 6.0) }];
    // location (2, 2) has center (5, 5)
    let big = ann(0, 0.0, 0.0, 10.0, 10.0);
    let small = ann(1, 4.0, 4.0, 8.0, 8.0);
    let t = assign_targets(&[vec![big, small]], &geom, 2);
    assert_eq!(t.locations, 64);
    let at = |i: usize, j: usize| t.positives.iter().position(|&p| p == i * 8 + j);
    let k = at(2, 2).expect("center (5, 5) lies in both boxes");
    assert_eq!(t.matched[k], 1, "smaller box wins");
    assert_eq!(t.reg[k], [1.0, 1.0, 3.0, 3.0]);
    assert!((t.ctr[k] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(&t.cls[(2 * 8 + 2) * 2..(2 * 8 + 2) * 2 + 2], &[0.0, 1.0]);
    // (0, 0) lies only in the big box, whose largest distance 9 exceeds the range
    assert!(at(0, 0).is_none());
    // (7, 7) has center (15, 15): outside every box
    assert!(at(7, 7).is_none());
    assert!(t.cls[(7 * 8 + 7) * 2..].iter().all(|&v| v == 0.0));
    // a box edge through a center is not "inside"
    let edge = assign_targets(&[vec![ann(0, 1.0, 1.0, 5.0, 5.0)]], &geom, 1);
    assert_eq!(edge.positives, vec![9]);
}

#[test]
fn assignment_flattens_level_image_row_col() {
    let geom = toy_geometry(16);
    let anns = vec![vec![], vec![ann(0, 6.0, 6.0, 10.0, 10.0)]];
    let t = assign_targets(&anns, &geom, 1);
    assert_eq!(t.locations, 2 * (4 + 16 + 64));
    // only the stride-2 level accepts a distance of at most 4; image 1 rows
    // 3..=4 and cols 3..=4 have centers 7 and 9 inside (6, 10)
    let base = 2 * (4 + 16) + 64;
    assert_eq!(t.positives, vec![base + 27, base + 28, base + 35, base + 36]);
    assert!(t.ctr.iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15 || c == 1.0));
}

fn single_location(cls_logit: f64, reg: [f64; 4], ctr_logit: f64) -> (Tape<f64>, DetOutputs) {
    let mut tape = Tape::new();
    let cls = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![cls_logit]).unwrap());
    let reg = tape.constant(Tensor::new(&[1, 1, 1, 4], reg.to_vec()).unwrap());
    let ctr = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![ctr_logit]).unwrap());
    let geometry = vec![LevelGeometry { height: 1, width: 1, stride: 4, range: (0.0, f64::INFINITY) }];
    (tape, DetOutputs { levels: vec![LevelOutputs { cls, reg, ctr }], geometry, batch: 1 })
}

#[test]
fn focal_term_for_confident_positive() {
    // center (2, 2) sits at the middle of the box: centerness target 1
    let anns = vec![vec![ann(0, 0.0, 0.0, 4.0, 4.0)]];
    let (mut tape, out) = single_location(9f64.ln(), [2.0, 2.0, 2.0, 2.0], 40.0);
    let t = assign_targets(&anns, &out.geometry, 1);
    let l = detection_loss(&mut tape, &out, &t, &HeadConfig::default()).unwrap();
    let want = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
    assert!((tape.value(l.cls).item().unwrap() - want).abs() < 1e-15);
    assert!((want - 2.634e-4).abs() < 1e-7);
    assert_eq!(tape.value(l.reg).item().unwrap(), 0.0);
    assert!(tape.value(l.ctr).item().unwrap() < 1e-15);
}

#[test]
fn perfect_predictions_give_zero_losses() {
    let anns = vec![vec![ann(0, 0.0, 0.0, 4.0, 4.0)]];
    let (mut tape, out) = single_location(60.0, [2.0, 2.0, 2.0, 2.0], 60.0);
    let t = assign_targets(&anns, &out.geometry, 1);
    let l = detection_loss(&mut tape, &out, &t, &HeadConfig::default()).unwrap();
    for v in [l.cls, l.reg, l.ctr] {
        let x = tape.value(v).item().unwrap();
        assert!((0.0..1e-20).contains(&x), "{x}");
    }
}

#[test]
fn iou_loss_closed_form() {
    // boxes (0,0,2,2) and (1,1,3,3) seen from the shared point (1.5, 1.5)
    let anns = vec![vec![ann(0, 1.0, 1.0, 3.0, 3.0)]];
    let mut tape = Tape::<f64>::new();
    let cls = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let reg = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![1.5, 1.5, 0.5, 0.5]).unwrap());
    let ctr = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let geometry = vec![LevelGeometry { height: 1, width: 1, stride: 3, range: (0.0, 10.0) }];
    let out = DetOutputs { levels: vec![LevelOutputs { cls, reg, ctr }], geometry, batch: 1 };
    let t = assign_targets(&anns, &out.geometry, 1);
    assert_eq!(t.reg, vec![[0.5, 0.5, 1.5, 1.5]]);
    let l = detection_loss(&mut tape, &out, &t, &HeadConfig::default()).unwrap();
    assert!((tape.value(l.reg).item().unwrap() - 6.0 / 7.0).abs() < 1e-15);
}

#[test]
fn no_positives_gives_zero_box_losses() {
    let (mut tape, out) = single_location(-3.0, [1.0; 4], 0.0);
    let t = assign_targets(&[vec![]], &out.geometry, 1);
    let l = detection_loss(&mut tape, &out, &t, &HeadConfig::default()).unwrap();
    assert_eq!(tape.value(l.reg).item().unwrap(), 0.0);
    assert_eq!(tape.value(l.ctr).item().unwrap(), 0.0);
    assert!(tape.value(l.cls).item().unwrap() > 0.0);
}

#[test]
fn losses_are_nonnegative_for_random_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let geom = toy_geometry(16);
        let mut tape = Tape::<f64>::new();
        let mut levels = Vec::new();
        for g in &geom {
            let (h, w) = (g.height, g.width);
            let mut r = |shape: &[usize], lo: f64, hi: f64| {
                tape.constant(Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)))
            };
            let cls = r(&[1, h, w, 3], -4.0, 4.0);
            let reg = r(&[1, h, w, 4], 0.1, 12.0);
            let ctr = r(&[1, h, w, 1], -4.0, 4.0);
            levels.push(LevelOutputs { cls, reg, ctr });
        }
        let out = DetOutputs { levels, geometry: geom.clone(), batch: 1 };
        let anns = vec![vec![ann(1, 1.0, 2.0, 7.0, 6.0), ann(2, 8.0, 8.0, 15.0, 16.0)]];
        let t = assign_targets(&anns, &geom, 3);
        let l = detection_loss(&mut tape, &out, &t, &HeadConfig::default()).unwrap();
        for v in [l.cls, l.reg, l.ctr] {
            assert!(tape.value(v).item().unwrap() >= 0.0);
        }
    }
}

#[test]
fn head_starts_at_the_class_prior() {
    let mut store = ParamStore::<f64>::new();
    let cfg = HeadConfig { width: 8, ..HeadConfig::default() };
    let head = DetectionHead::init(&mut Init::new(&mut store, 4), "head", &cfg, &[12, 6, 4], 3).unwrap();
    let mut tape = Tape::with_params(&store);
    let feats = [(2, 12, 8), (4, 6, 4), (8, 4, 2)];
    let pyramid: Vec<(Var, usize)> = feats
        .iter()
        .map(|&(s, c, stride)| (tape.constant(Tensor::zeros(&[2, s, s, c])), stride))
        .collect();
    let out = head_forward(&mut tape, &head, &cfg, &pyramid).unwrap();
    assert_eq!(out.batch, 2);
    for (lv, &(s, _, stride)) in out.levels.iter().zip(&feats) {
        assert_eq!(tape.shape(lv.cls), &[2, s, s, 3]);
        // zero features: the towers see zeros, so outputs are the biases
        for &v in tape.value(lv.cls).data() {
            assert!((1.0 / (1.0 + (-v).exp()) - 0.01).abs() < 1e-12);
        }
        assert!(tape.value(lv.reg).data().iter().all(|&d| (d - stride as f64).abs() < 1e-12));
    }
    assert_eq!(out.geometry[2], LevelGeometry { height: 8, width: 8, stride: 2, range: (0.0, 6.0) });
    assert!(head_forward(&mut tape, &head, &cfg, &pyramid[..2]).is_err());
}

#[test]
fn detection_loss_gradients_match_finite_differences() {
    use crate::gradcheck::{check, GradCheckOptions};
    let geom = toy_geometry(16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inputs = Vec::new();
    for g in &geom {
        let (h, w) = (g.height, g.width);
        inputs.push(Tensor::from_fn(&[1, h, w, 2], |_| rng.gen_range(-2.0..2.0)));
        inputs.push(Tensor::from_fn(&[1, h, w, 4], |_| rng.gen_range(0.5..6.0)));
        inputs.push(Tensor::from_fn(&[1, h, w, 1], |_| rng.gen_range(-2.0..2.0)));
    }
    let anns = vec![vec![ann(0, 1.0, 2.0, 6.0, 7.0), ann(1, 6.0, 6.0, 16.0, 16.0)]];
    let t = assign_targets(&anns, &geom, 2);
    assert!(!t.positives.is_empty());
    let checked: Vec<usize> = (0..inputs.len()).collect();
    let opts = GradCheckOptions { points: 30, floor: 1e-6, ..GradCheckOptions::default() };
    let r = check("detection_loss", &inputs, &checked, opts, |tape, v| {
        let levels = v.chunks(3).map(|c| LevelOutputs { cls: c[0], reg: c[1], ctr: c[2] }).collect();
        let out = DetOutputs { levels, geometry: geom.clone(), batch: 1 };
        let l = detection_loss(tape, &out, &t, &HeadConfig::default())?;
        let a = tape.add(l.cls, l.reg)?;
        tape.add(a, l.ctr)
    })
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn nms_keeps_single_and_drops_duplicates() {
    let one = det(0, 0.7, [1.0, 2.0, 5.0, 6.0]);
    assert_eq!(nms(vec![one], 0.5), vec![one]);
    for thresh in [0.0, 0.3, 0.5, 0.99] {
        let kept = nms(vec![det(0, 0.8, [0.0, 0.0, 4.0, 4.0]), det(0, 0.9, [0.0, 0.0, 4.0, 4.0])], thresh);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }
    // other classes are never suppressed
    let kept = nms(vec![det(0, 0.8, [0.0, 0.0, 4.0, 4.0]), det(1, 0.9, [0.0, 0.0, 4.0, 4.0])], 0.5);
    assert_eq!(kept.len(), 2);
}

#[test]
fn decode_round_trips_planted_boxes() {
    let side = 32;
    let geom = toy_geometry(side);
    let planted = vec![
        ann(0, 2.0, 3.0, 7.0, 9.0),
        ann(1, 12.0, 4.0, 22.0, 13.0),
        ann(2, 20.0, 18.0, 31.0, 30.0),
        ann(3, 4.0, 20.0, 8.0, 24.0),
    ];
    let t = assign_targets(std::slice::from_ref(&planted), &geom, 4);
    let mut levels: Vec<LevelPrediction> = geom
        .iter()
        .map(|g| LevelPrediction {
            geometry: *g,
            cls: vec![-10.0; g.locations() * 4],
            reg: vec![1.0; g.locations() * 4],
            ctr: vec![-10.0; g.locations()],
        })
        .collect();
    let mut offset = 0;
    let mut level_of = Vec::new();
    for (l, g) in geom.iter().enumerate() {
        level_of.push((offset, offset + g.locations(), l));
        offset += g.locations();
    }
    for (k, &flat) in t.positives.iter().enumerate() {
        let &(start, _, l) = level_of.iter().find(|&&(s, e, _)| flat >= s && flat < e).unwrap();
        let loc = flat - start;
        let class = planted[t.matched[k]].class_id;
        levels[l].cls[loc * 4 + class] = 6.0;
        levels[l].reg[loc * 4..loc * 4 + 4].copy_from_slice(&t.reg[k]);
        levels[l].ctr[loc] = 6.0;
    }
    let dets = decode(&levels, (side, side), &HeadConfig::default());
    assert_eq!(dets.len(), planted.len());
    for a in &planted {
        let d = dets.iter().find(|d| d.class_id == a.class_id).unwrap();
        for (x, y) in d.bbox.key().iter().zip(a.bbox.key()) {
            assert!((x - y).abs() <= 1.0);
        }
    }
    let report = map_at_50(&[dets], &[planted], 4).unwrap();
    assert_eq!(report.map, 1.0);
}

#[test]
fn map_trivial_cases() {
    let gts = vec![vec![ann(0, 0.0, 0.0, 4.0, 4.0), ann(1, 5.0, 5.0, 9.0, 9.0)], vec![ann(0, 1.0, 1.0, 3.0, 3.0)]];
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|img| img.iter().map(|a| Detection { class_id: a.class_id, score: 0.9, bbox: a.bbox }).collect())
        .collect();
    assert_eq!(map_at_50(&perfect, &gts, 3).unwrap().map, 1.0);
    let report = map_at_50(&[vec![], vec![]], &gts, 3).unwrap();
    assert_eq!(report.map, 0.0);
    assert_eq!(report.per_class, vec![Some(0.0), Some(0.0), None]);
    assert_eq!(map_at_50(&[vec![]], &[vec![]], 3).unwrap().map, 0.0);
    assert!(map_at_50(&[vec![]], &gts, 3).is_err());
}

#[test]
fn map_tp_fp_tp_example() {
    let gts = vec![vec![ann(0, 0.0, 0.0, 4.0, 4.0), ann(0, 10.0, 10.0, 14.0, 14.0)]];
    let dets = vec![vec![
        det(0, 0.9, [0.0, 0.0, 4.0, 4.0]),
        det(0, 0.8, [20.0, 20.0, 24.0, 24.0]),
        det(0, 0.7, [10.0, 10.0, 14.0, 14.0]),
    ]];
    let ap = map_at_50(&dets, &gts, 1).unwrap().map;
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    assert!((pr_oracle(&dets, &gts, 0) - 5.0 / 6.0).abs() < 1e-15);
}

/// Exhaustive PR-curve oracle: evaluate precision and recall at every rank
/// cutoff, then integrate the upper envelope over each recall increment.
fn pr_oracle(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], class_id: usize) -> f64 {
    let num_gt: usize = gts.iter().flatten().filter(|a| a.class_id == class_id).count();
    if num_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, Detection)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class_id) {
            ranked.push((img, *d));
        }
    }
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    let mut points = Vec::new();
    for cut in 1..=ranked.len() {
        // replay matching from scratch for the prefix
        let mut taken = vec![vec![false; 64]; gts.len()];
        let mut tp = 0;
        for (img, d) in &ranked[..cut] {
            let mut best = (-1.0, usize::MAX);
            for (k, a) in gts[*img].iter().enumerate() {
                if a.class_id == class_id {
                    let iou = a.bbox.iou(&d.bbox);
                    if iou > best.0 {
                        best = (iou, k);
                    }
                }
            }
            if best.0 >= 0.5 && !taken[*img][best.1] {
                taken[*img][best.1] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / cut as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let images = rng.gen_range(1..4);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..images {
        let mut g = Vec::new();
        for _ in 0..rng.gen_range(0..5) {
            let (x, y) = (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64);
            let (w, h) = (rng.gen_range(2..8) as f64, rng.gen_range(2..8) as f64);
            g.push(ann(rng.gen_range(0..3), x, y, x + w, y + h));
        }
        let mut d = Vec::new();
        for a in &g {
            if rng.gen_bool(0.7) {
                let j = rng.gen_range(-1.5..1.5);
                d.push(det(a.class_id, rng.gen_range(0.0..1.0), [a.bbox.x_min + j, a.bbox.y_min, a.bbox.x_max + j, a.bbox.y_max]));
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let (x, y) = (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64);
            d.push(det(rng.gen_range(0..3), rng.gen_range(0.0..1.0), [x, y, x + 4.0, y + 4.0]));
        }
        gts.push(g);
        dets.push(d);
    }
    (dets, gts)
}

#[test]
fn map_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let (dets, gts) = random_instance(&mut rng);
        let report = map_at_50(&dets, &gts, 3).unwrap();
        for (c, ap) in report.per_class.iter().enumerate() {
            if let Some(ap) = ap {
                assert!((ap - pr_oracle(&dets, &gts, c)).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform4(0.0f64..20.0), b in prop::array::uniform4(0.0f64..20.0)) {
        let x = BBox::new(a[0], a[1], a[0] + a[2] + 0.1, a[1] + a[3] + 0.1);
        let y = BBox::new(b[0], b[1], b[0] + b[2] + 0.1, b[1] + b[3] + 0.1);
        prop_assert_eq!(x.iou(&y), y.iou(&x));
        prop_assert!((0.0..=1.0).contains(&x.iou(&y)));
        prop_assert_eq!(x.iou(&x), 1.0);
        if x != y {
            prop_assert!(x.iou(&y) < 1.0);
        }
    }

    #[test]
    fn map_depends_only_on_ranking(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let scaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: x.score * scale, ..*x }).collect())
            .collect();
        let a = map_at_50(&dets, &gts, 3).unwrap();
        let b = map_at_50(&scaled, &gts, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nms_output_is_a_separated_subset(seed in 0u64..500, thresh in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<Detection> = (0..rng.gen_range(0..30))
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
                det(rng.gen_range(0..2), rng.gen_range(0.0..1.0), [x, y, x + rng.gen_range(1.0..6.0), y + rng.gen_range(1.0..6.0)])
            })
            .collect();
        let kept = nms(dets.clone(), thresh);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(a.bbox.iou(&b.bbox) < thresh);
                }
            }
            if i > 0 {
                prop_assert!(kept[i - 1].score >= a.score);
            }
        }
    }
}
