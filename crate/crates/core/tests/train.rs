use std::collections::BTreeSet;

use ftvp_core::network::{init_params, NetConfig};
use ftvp_core::params::ParamStore;
use ftvp_core::raster::{ClassMask, UNOBSERVED};
use ftvp_core::rng::Rng;
use ftvp_core::synth::{generate, GridConfig, Pose, SynthConfig};
use ftvp_core::train::{
    average_precision, evaluate, one_hot, poly_lr, run_ablation, stitch_panorama, train, Adam, AdamConfig, Evaluator,
    Suite, TrainConfig, TrainSample,
};
use ftvp_core::{Error, Tensor};
use proptest::prelude::*;

fn scalar_store(v: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(&[v.len()], v.to_vec()).unwrap());
    s
}

#[test]
fn adam_first_step_and_zero_grad() {
    let lr = 0.01;
    for g in [3.0, -0.2, 1e-3] {
        let mut p = scalar_store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &scalar_store(&[g]), lr).unwrap();
        let delta = p.get("x").unwrap().data()[0] - 1.0;
        assert!((delta + lr * g.signum()).abs() < 1e-7 * lr.max(1.0), "g {g}: {delta}");
    }
    let mut p = scalar_store(&[0.5, -2.0]);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..3 {
        adam.step(&mut p, &scalar_store(&[0.0, 0.0]), 0.1).unwrap();
    }
    assert_eq!(p.get("x").unwrap().data(), &[0.5, -2.0]);
    let err = adam.step(&mut p, &scalar_store(&[1.0]), 0.1).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn adam_finds_the_bottom_of_a_bowl() {
    // f(x) = Σ a_i (x_i − c_i)², minimum at c
    let a = [1.0, 4.0, 0.5];
    let c = [1.0, -2.0, 3.0];
    let mut p = scalar_store(&[0.0; 3]);
    let mut adam = Adam::new(AdamConfig::default());
    for it in 0..400 {
        let x = p.get("x").unwrap().data().to_vec();
        let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
        adam.step(&mut p, &scalar_store(&g), poly_lr(it, 400, 0.5, 0.9).unwrap()).unwrap();
    }
    for (x, c) in p.get("x").unwrap().data().iter().zip(c) {
        assert!((x - c).abs() < 1e-3, "{x} vs {c}");
    }
}

#[test]
fn poly_schedule_examples() {
    assert_eq!(poly_lr(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
    assert_eq!(poly_lr(100, 100, 1e-4, 0.9).unwrap(), 0.0);
    let half = poly_lr(50, 100, 1.0, 0.9).unwrap();
    assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((half - 0.5359).abs() < 1e-4);
    assert_eq!(poly_lr(101, 100, 1.0, 0.9), Err(Error::IterOutOfRange { iter: 101, total: 100 }));
}

/// Set-arithmetic IoU and threshold-sweep AP.
struct BruteForce {
    iou: Vec<Option<f64>>,
    ap: Vec<Option<f64>>,
}

/// Per-class scores, prediction and truth of one sample.
type Scored = (Vec<Vec<f64>>, Vec<u8>, Vec<u8>);

fn brute_force(samples: &[Scored], k: usize) -> BruteForce {
    let mut iou = Vec::new();
    let mut ap = Vec::new();
    for c in 0..k {
        // pixels are (sample, index) pairs
        let mut pred = BTreeSet::new();
        let mut truth = BTreeSet::new();
        let mut scored = Vec::new();
        for (s, (scores, p, t)) in samples.iter().enumerate() {
            for i in 0..p.len() {
                if p[i] as usize == c {
                    pred.insert((s, i));
                }
                if t[i] as usize == c {
                    truth.insert((s, i));
                }
                scored.push(((s, i), scores[c][i]));
            }
        }
        let union = pred.union(&truth).count();
        let inter = pred.intersection(&truth).count();
        iou.push((union > 0).then(|| inter as f64 / union as f64));

        if truth.is_empty() {
            ap.push(None);
            continue;
        }
        let mut thresholds: Vec<f64> = scored.iter().map(|s| s.1).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev = 0.0;
        for t in thresholds {
            let kept: BTreeSet<_> = scored.iter().filter(|s| s.1 >= t).map(|s| s.0).collect();
            let hits = kept.intersection(&truth).count();
            let recall = hits as f64 / truth.len() as f64;
            area += (recall - prev) * (hits as f64 / kept.len() as f64);
            prev = recall;
        }
        ap.push(Some(area));
    }
    BruteForce { iou, ap }
}

fn mean_pct(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v[1..].iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        100.0 * d.iter().sum::<f64>() / d.len() as f64
    }
}

#[test]
fn metrics_match_brute_force_oracle() {
    let k = 4;
    let (w, h) = (5, 4);
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let n_samples = 1 + rng.int_inclusive(0, 2);
        let mut samples = Vec::new();
        let mut ev = Evaluator::new(k);
        for _ in 0..n_samples {
            // coarse score levels force ties
            let scores: Vec<Vec<f64>> =
                (0..k).map(|_| (0..w * h).map(|_| rng.int_inclusive(0, 5) as f64 / 5.0).collect()).collect();
            let pred: Vec<u8> = (0..w * h).map(|_| rng.int_inclusive(0, k - 1) as u8).collect();
            let truth: Vec<u8> = (0..w * h).map(|_| rng.int_inclusive(0, k - 1) as u8).collect();
            let t = Tensor::new(&[k, h, w], scores.concat()).unwrap();
            ev.add(&t, &ClassMask::new(w, h, pred.clone()).unwrap(), &ClassMask::new(w, h, truth.clone()).unwrap())
                .unwrap();
            samples.push((scores, pred, truth));
        }
        let report = ev.report().unwrap();
        let oracle = brute_force(&samples, k);
        assert_eq!(report.iou, oracle.iou, "seed {seed}");
        assert_eq!(report.ap, oracle.ap, "seed {seed}");
        assert!((report.miou - mean_pct(&oracle.iou)).abs() < 1e-9, "seed {seed}");
        assert!((report.map - mean_pct(&oracle.ap)).abs() < 1e-9, "seed {seed}");
        let pixels = (n_samples * w * h) as u64;
        assert!(report.confusion.iter().all(|c| c.tp + c.fp + c.fn_ + c.tn == pixels));
    }
}

fn eval_masks(pred: &ClassMask, truth: &ClassMask, k: usize) -> ftvp_core::train::EvalReport {
    let mut ev = Evaluator::new(k);
    ev.add(&one_hot(pred, k).unwrap(), pred, truth).unwrap();
    ev.report().unwrap()
}

#[test]
fn analytic_metric_cases() {
    let truth = ClassMask::new(4, 2, vec![0, 1, 1, 2, 2, 1, 0, 0]).unwrap();
    let r = eval_masks(&truth, &truth, 3);
    assert_eq!((r.miou, r.map, r.pixel_accuracy), (100.0, 100.0, 1.0));

    let a = ClassMask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
    let b = ClassMask::new(4, 1, vec![0, 0, 1, 1]).unwrap();
    assert_eq!(eval_masks(&a, &b, 2).iou[1], Some(0.0));

    // two equal areas overlapping in half of each
    let p = ClassMask::new(6, 1, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let t = ClassMask::new(6, 1, vec![0, 0, 1, 1, 1, 1]).unwrap();
    assert_eq!(eval_masks(&p, &t, 2).iou[1], Some(1.0 / 3.0));

    // a class absent from both is skipped in the mean
    let r = eval_masks(&a, &a, 3);
    assert_eq!((r.iou[2], r.ap[2], r.miou), (None, None, 100.0));
    assert!(matches!(Evaluator::new(3).report(), Err(Error::Empty(_))));
}

#[test]
fn evaluation_ignores_dataset_order() {
    let net = NetConfig { input_size: 32, widths: vec![4, 4, 8], ftvp_scales: vec![2], ..NetConfig::default() };
    let params = init_params::<f32>(&net, 3).unwrap();
    let data: Vec<TrainSample> =
        generate(4, 5, &SynthConfig::for_image(32)).unwrap().iter().map(TrainSample::from_scene).collect();
    let forward = evaluate(&params, &net, &data).unwrap();
    let mut reversed = data.clone();
    reversed.reverse();
    reversed.swap(0, 2);
    assert_eq!(forward, evaluate(&params, &net, &reversed).unwrap());
    assert_eq!(forward.samples, 5);
    assert!(matches!(evaluate(&params, &net, &[]), Err(Error::Empty(_))));
}

proptest! {
    #[test]
    fn poly_is_non_increasing(total in 1usize..500, power in 0.0f64..3.0, lr0 in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for it in 0..=total {
            let lr = poly_lr(it, total, lr0, power).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn separated_scores_give_perfect_ap(labels in prop::collection::vec(any::<bool>(), 2..60), seed in 0u64..1000) {
        prop_assume!(labels.iter().any(|&l| l));
        let mut rng = Rng::new(seed);
        let mut scored: Vec<(f64, bool)> =
            labels.iter().map(|&l| (if l { rng.range(0.51, 1.0) } else { rng.range(0.0, 0.5) }, l)).collect();
        prop_assert_eq!(average_precision(&mut scored), Some(1.0));
    }
}

fn random_mask(side: usize, seed: u64) -> ClassMask {
    let mut rng = Rng::new(seed);
    ClassMask::new(side, side, (0..side * side).map(|_| rng.int_inclusive(0, 2) as u8).collect()).unwrap()
}

#[test]
fn single_and_repeated_frames_reproduce_the_frame() {
    let grid = GridConfig::default();
    let m = random_mask(grid.side, 1);
    let pano = stitch_panorama(std::slice::from_ref(&m), &[Pose::default()], &grid).unwrap();
    assert_eq!(pano.mask, m);
    let twice = stitch_panorama(&[m.clone(), m.clone()], &[Pose::default(); 2], &grid).unwrap();
    assert_eq!(twice.mask, m);
    assert!(matches!(stitch_panorama(&[], &[], &grid), Err(Error::Empty(_))));
    assert!(stitch_panorama(&[m], &[], &grid).is_err());
}

/// Forward compositor: push every frame cell, in frame order, to the global
/// cell under its world centre.
fn forward_composite(
    masks: &[ClassMask],
    poses: &[Pose],
    grid: &GridConfig,
    pano: &ftvp_core::train::Panorama,
) -> ClassMask {
    let res = grid.resolution();
    let mut out = ClassMask::filled(pano.mask.width(), pano.mask.height(), UNOBSERVED);
    for (m, p) in masks.iter().zip(poses) {
        for row in 0..grid.side {
            for col in 0..grid.side {
                let w = p.apply(grid.cell_center(col, row));
                let gr = ((pano.origin[0] - w[0]) / res).floor() as usize;
                let gc = ((pano.origin[1] - w[1]) / res).floor() as usize;
                out.set(gc, gr, m.get(col, row));
            }
        }
    }
    out
}

#[test]
fn one_cell_shift_matches_forward_compositor() {
    let grid = GridConfig::default();
    let res = grid.resolution();
    let masks = [random_mask(grid.side, 2), random_mask(grid.side, 3)];
    for shift in [[res, 0.0], [0.0, -res], [-res, res]] {
        let poses = [Pose::default(), Pose::new(shift[0], shift[1], 0.0)];
        let pano = stitch_panorama(&masks, &poses, &grid).unwrap();
        assert_eq!(pano.mask, forward_composite(&masks, &poses, &grid, &pano));
        let n = grid.side + 1;
        assert_eq!(
            (pano.mask.width(), pano.mask.height()),
            (if shift[1] == 0.0 { n - 1 } else { n }, if shift[0] == 0.0 { n - 1 } else { n })
        );
        // latest frame wins where they overlap
        let c = pano.cell_center(pano.mask.width() / 2, pano.mask.height() / 2);
        let (fc, fr) = grid.cell_of(poses[1].apply_inverse(c)).unwrap();
        assert_eq!(pano.mask.get(pano.mask.width() / 2, pano.mask.height() / 2), masks[1].get(fc, fr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn stitching_is_translation_equivariant(
        dx in -40i32..40, dy in -40i32..40, quarter in 0i32..4, tx in -30i32..30, ty in -30i32..30, seed in 0u64..100,
    ) {
        let grid = GridConfig { side: 16, forward: 10.0, lateral: 10.0, near: 0.0 };
        let res = grid.resolution();
        let masks = [random_mask(16, seed), random_mask(16, seed + 1), random_mask(16, seed + 2)];
        let yaw = quarter as f64 * std::f64::consts::FRAC_PI_2;
        let poses = [Pose::default(), Pose::new(dx as f64 * res, dy as f64 * res, yaw), Pose::new(3.0 * res, 0.0, 0.0)];
        let moved: Vec<Pose> = poses.iter().map(|p| Pose::new(p.x + tx as f64 * res, p.y + ty as f64 * res, p.yaw)).collect();
        let a = stitch_panorama(&masks, &poses, &grid).unwrap();
        let b = stitch_panorama(&masks, &moved, &grid).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert!((b.origin[0] - a.origin[0] - tx as f64 * res).abs() < 1e-9);
        prop_assert!((b.origin[1] - a.origin[1] - ty as f64 * res).abs() < 1e-9);
        prop_assert_eq!(a.mask.clone(), forward_composite(&masks, &poses, &grid, &a));
    }
}

fn tiny_net() -> NetConfig {
    NetConfig { input_size: 32, widths: vec![4, 8, 8], ftvp_scales: vec![1, 2], ..NetConfig::default() }
}

fn tiny_data(seed: u64, n: usize) -> Vec<TrainSample> {
    generate(seed, n, &SynthConfig::for_image(32)).unwrap().iter().map(TrainSample::from_scene).collect()
}

#[test]
fn training_is_deterministic_and_fits_one_sample() {
    let net = tiny_net();
    let data = tiny_data(1, 1);
    let tc = TrainConfig { lr0: 3e-3, batch_size: 1, epochs: 60, seed: 5, ..TrainConfig::default() };
    let mut due = 0;
    let a = train(&net, &tc, &data, Some(&data), &mut |e| {
        due += e.checkpoint_due as usize;
        assert!(e.eval.is_some());
        Ok(())
    })
    .unwrap();
    assert_eq!(due, 6);
    let b = train(&net, &tc, &data, None, &mut |_| Ok(())).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), 60);
    assert_eq!(a.history[59].iter, 60);
    assert_eq!(a.history[0].seg.len(), net.supervised_heads());
    assert!(a.history[59].total < 0.5 * a.history[0].total);
    let best = a.best.unwrap();
    assert!((1..=60).contains(&best.epoch));
    assert_eq!(evaluate(&best.params, &net, &data).unwrap().miou, best.miou);

    let other = train(&net, &TrainConfig { seed: 6, ..tc.clone() }, &data, None, &mut |_| Ok(())).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn batches_average_sample_gradients() {
    let net = tiny_net();
    let data = tiny_data(2, 7);
    let tc = TrainConfig { lr0: 1e-3, batch_size: 3, epochs: 2, seed: 1, ..TrainConfig::default() };
    let out = train(&net, &tc, &data, None, &mut |_| Ok(())).unwrap();
    assert_eq!(out.history.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![3, 6]);
    assert!(out.history.iter().all(|r| r.cycle_total > 0.0));
    let lr_last = poly_lr(5, 6, 1e-3, 0.9).unwrap();
    assert_eq!(out.history[1].lr, lr_last);
}

#[test]
fn training_rejects_bad_inputs() {
    let net = tiny_net();
    let data = tiny_data(3, 2);
    let run = |tc: &TrainConfig, d: &[TrainSample]| train(&net, tc, d, None, &mut |_| Ok(()));
    assert!(matches!(run(&TrainConfig::default(), &[]), Err(Error::Empty(_))));
    assert!(matches!(run(&TrainConfig { lr0: 0.0, ..TrainConfig::default() }, &data), Err(Error::Config(_))));
    assert!(matches!(run(&TrainConfig { power: -1.0, ..TrainConfig::default() }, &data), Err(Error::Config(_))));
    let mut bad = data.clone();
    bad[0].mask.set(0, 0, 9);
    assert!(matches!(run(&TrainConfig::default(), &bad), Err(Error::InvalidClass { .. })));
    // a diverging step is caught
    let wild = TrainConfig { lr0: 1e30, epochs: 3, batch_size: 1, ..TrainConfig::default() };
    assert!(matches!(run(&wild, &data), Err(Error::NonFinite { .. } | Error::NonFiniteParam(_))));
}

#[test]
fn ablation_suites_have_the_expected_rows() {
    let base = tiny_net();
    let acc = Suite::Accretion.variants(&base);
    let labels: Vec<&str> = acc.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "Baseline",
            "+ MLP",
            "+ Cross-view Correlation",
            "+ Cycle Structure",
            "+ Feature Selection",
            "+ Multi-scale FTVPs",
            "+ Deep Supervision"
        ]
    );
    let names = |net: &NetConfig| init_params::<f32>(net, 0).unwrap().names().map(String::from).collect::<Vec<_>>();
    assert!(names(&acc[0].net).iter().all(|n| !n.starts_with("ftvp")));
    assert!(names(&acc[1].net).iter().all(|n| !n.contains(".cvt.") && !n.contains(".bwd.")));
    assert!(names(&acc[2].net).iter().any(|n| n.contains(".cvt.")));
    assert!(names(&acc[3].net).iter().any(|n| n.contains(".bwd.")));
    assert_eq!(acc[6].net, NetConfig { deep_supervision: true, ..base.clone() });
    assert_eq!(acc[5].net.supervised_heads(), 1);
    for v in &acc {
        v.net.validate().unwrap();
    }

    let kv = Suite::KvCombos.variants(&base);
    let labels: Vec<&str> = kv.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(labels, ["K=X' V=X'", "K=X'' V=X''", "K=X V=X", "K=X'' V=X", "K=X V=X''"]);
    assert_eq!(kv[4].net, base);

    let data = tiny_data(4, 3);
    let tc = TrainConfig { epochs: 1, batch_size: 3, ..TrainConfig::default() };
    let mut seen = 0;
    let rows = run_ablation(Suite::KvCombos, &base, &tc, &data, &data, &mut |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!((rows.len(), seen), (5, 5));
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.miou) && (0.0..=100.0).contains(&r.map)));
    assert_eq!(Suite::parse("kv_combos").unwrap(), Suite::KvCombos);
    assert!(Suite::parse("tables").is_err());
}

#[test]
fn cycle_term_lowers_the_cycle_loss() {
    for seed in 0..3 {
        let data = tiny_data(seed, 8);
        let tc = TrainConfig { lr0: 3e-3, batch_size: 2, epochs: 10, seed, ..TrainConfig::default() };
        let cycle_at_10 = |lambda: f64| {
            let net = NetConfig { lambda_cycle: lambda, ..tiny_net() };
            train(&net, &tc, &data, None, &mut |_| Ok(())).unwrap().history[9].cycle_total
        };
        let (on, off) = (cycle_at_10(0.001), cycle_at_10(0.0));
        assert!(on < off, "seed {seed}: {on} vs {off}");
    }
}
