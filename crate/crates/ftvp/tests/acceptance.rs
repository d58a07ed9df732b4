//! Acceptance checks, one line each. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 2 7`.
#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ftvp_core::ftvp::{cvt_forward, CvtIntermediates, CvtOptions, CvtVars, KvMode};
use ftvp_core::network::{forward, init_params, NetConfig};
use ftvp_core::params::{Ctx, ParamStore};
use ftvp_core::raster::{ClassMask, UNOBSERVED};
use ftvp_core::rng::Rng;
use ftvp_core::synth::{drive, generate, rasterize_bev, DriveConfig, SynthConfig};
use ftvp_core::train::{evaluate, one_hot, stitch_panorama, train, Evaluator, Suite, TrainConfig, TrainSample};
use ftvp_core::verify::gradcheck_suite;
use ftvp_core::{Tape, Tensor};
use oracle::Fm;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;
/// Per-class scores, prediction and truth of one sample.
type Scored = (Vec<Vec<f64>>, Vec<u8>, Vec<u8>);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rand(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(-scale, scale))
}

fn dataset(seed: u64, n: usize, size: usize) -> Result<Vec<TrainSample>, String> {
    Ok(generate(seed, n, &SynthConfig::for_image(size)).map_err(err)?.iter().map(TrainSample::from_scene).collect())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut prim, mut comp, mut n) = (0.0f64, 0.0f64, 0);
    for seed in 0..10 {
        for case in gradcheck_suite(seed).map_err(err)? {
            check(case.passed(), || {
                format!(
                    "{} seed {seed}: rel err {:.2e} over {} entries",
                    case.name, case.report.max_rel_error, case.report.checked
                )
            })?;
            let worst = if case.composed { &mut comp } else { &mut prim };
            *worst = worst.max(case.report.max_rel_error);
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!("{n} checks, worst primitive {prim:.1e}, composed block {comp:.1e}"))
}

struct Toy {
    x: Tensor<f64>,
    x1: Tensor<f64>,
    x2: Tensor<f64>,
    proj: [Tensor<f64>; 3],
    fuse_w: Tensor<f64>,
    fuse_b: Tensor<f64>,
}

fn toy(seed: u64) -> Toy {
    let (c, h, w) = (8, 4, 4);
    let mut rng = Rng::new(seed);
    Toy {
        x: rand(&mut rng, &[c, h, w], 1.0),
        x1: rand(&mut rng, &[c, h, w], 1.0),
        x2: rand(&mut rng, &[c, h, w], 1.0),
        proj: [
            rand(&mut rng, &[c, c, 1, 1], 1.0),
            rand(&mut rng, &[c, c, 1, 1], 1.0),
            rand(&mut rng, &[c, c, 1, 1], 1.0),
        ],
        fuse_w: rand(&mut rng, &[c, 2 * c, 3, 3], 0.3),
        fuse_b: rand(&mut rng, &[c], 0.3),
    }
}

fn run_cvt(t: &Toy) -> Result<(Tensor<f64>, CvtIntermediates<f64>), String> {
    let mut tape = Tape::new();
    let x = tape.constant(t.x.clone());
    let x1 = tape.constant(t.x1.clone());
    let x2 = tape.constant(t.x2.clone());
    let p = CvtVars {
        proj_k: tape.constant(t.proj[0].clone()),
        proj_q: tape.constant(t.proj[1].clone()),
        proj_v: tape.constant(t.proj[2].clone()),
        fuse_w: tape.constant(t.fuse_w.clone()),
        fuse_b: tape.constant(t.fuse_b.clone()),
    };
    let (out, trace) = cvt_forward(&mut tape, x, x1, Some(x2), &p, &CvtOptions::default()).map_err(err)?;
    Ok((tape.value(out).clone(), trace.materialize(&tape)))
}

/// Keys come from X under the default wiring, so scaling or moving columns of
/// X acts on the key vectors only.
fn cvt_algebra() -> Outcome {
    assert_eq!(CvtOptions::default().kv, KvMode::FrontCycled);
    let hw = 16;
    for seed in 0..100 {
        let t = toy(seed);
        let (_, base) = run_cvt(&t)?;
        let r = base.relevance.data();
        check(r.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)), || {
            format!("toy {seed}: relevance outside [-1, 1]")
        })?;
        for i in 0..hw {
            check(base.attention.data()[i] == r[i * hw + base.index[i]], || format!("toy {seed}: w_{i} != r_(i,h_i)"))?;
        }

        let mut rng = Rng::derive(seed, 1);
        let loc = rng.int_inclusive(0, hw - 1);
        let alpha = 10f64.powf(rng.range(-2.0, 2.0));
        let mut scaled = toy(seed);
        for ch in 0..8 {
            scaled.x.data_mut()[ch * hw + loc] *= alpha;
        }
        let (_, s) = run_cvt(&scaled)?;
        check(s.index == base.index && s.attention.max_abs_diff(&base.attention) < 1e-9, || {
            format!("toy {seed}: scaling key {loc} by {alpha:.3} changed the selection")
        })?;

        let mut perm: Vec<usize> = (0..hw).collect();
        rng.shuffle(&mut perm);
        let mut moved = toy(seed);
        for ch in 0..8 {
            for j in 0..hw {
                moved.x.data_mut()[ch * hw + perm[j]] = t.x.data()[ch * hw + j];
            }
        }
        let (_, m) = run_cvt(&moved)?;
        for i in 0..hw {
            check(m.index[i] == perm[base.index[i]], || {
                format!("toy {seed}: permuted keys, query {i} picked {}", m.index[i])
            })?;
        }
        check(m.attention.max_abs_diff(&base.attention) < 1e-9, || format!("toy {seed}: permuted keys changed W"))?;

        // disjoint query and key channels make every relevance zero
        let mut blind = toy(seed);
        for (o, row) in blind.proj[1].data_mut().chunks_mut(8).enumerate() {
            row.iter_mut().enumerate().for_each(|(i, v)| *v = if o < 4 && i < 4 { *v } else { 0.0 });
        }
        for (o, row) in blind.proj[0].data_mut().chunks_mut(8).enumerate() {
            row.iter_mut().enumerate().for_each(|(i, v)| *v = if o >= 4 && i >= 4 { *v } else { 0.0 });
        }
        let (out, z) = run_cvt(&blind)?;
        check(z.attention.data().iter().all(|&w| w == 0.0), || format!("toy {seed}: W not identically zero"))?;
        check(out == blind.x1, || format!("toy {seed}: W = 0 but X_out != X'"))?;
    }
    Ok(String::from("100 toys: bounds, w = r(i,h), key scaling, key permutation, W = 0 residual"))
}

fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.range(-0.2, 0.2));
    }
}

/// `None` when two keys of some query tie within 1e-9.
fn network_diff(cfg: &NetConfig, seed: u64) -> Result<Option<f64>, String> {
    let mut store = init_params::<f64>(cfg, seed).map_err(err)?;
    jitter(&mut store, seed + 1000);
    let s = cfg.input_size;
    let mut rng = Rng::new(seed);
    let img = rand(&mut rng, &[3, s, s], 1.0);
    let mut ctx = Ctx::new(&store);
    let x = ctx.tape.constant(img.clone());
    let out = forward(&mut ctx, x, cfg).map_err(err)?;
    for (_, t) in &out.traces {
        let r = ctx.tape.value(t.relevance);
        let n = r.shape()[1];
        for row in r.data().chunks(n) {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() > 1 && sorted[0] - sorted[1] < 1e-9 {
                return Ok(None);
            }
        }
    }
    let lookup = |name: &str| store.get(name).unwrap().data().to_vec();
    let o = oracle::network(
        &Fm::new(3, s, s, img.data().to_vec()),
        &lookup,
        &cfg.widths,
        &cfg.ftvp_scales,
        cfg.num_classes,
    );
    let mut diff = 0.0f64;
    for ((_, v), (_, ov)) in out.logits.iter().zip(&o.logits) {
        diff = ctx.tape.value(*v).data().iter().zip(&ov.v).map(|(a, b)| (a - b).abs()).fold(diff, f64::max);
    }
    for (v, c) in out.cycle_losses.iter().zip(&o.cycle) {
        diff = diff.max((ctx.tape.value(*v).item() - c).abs());
    }
    check(out.logits.len() == o.logits.len() && out.cycle_losses.len() == o.cycle.len(), || {
        String::from("head count")
    })?;
    Ok(Some(diff))
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let t = toy(seed);
        let (out, inter) = run_cvt(&t)?;
        let fm = |x: &Tensor<f64>| Fm::new(8, 4, 4, x.data().to_vec());
        let o = oracle::cvt(
            &fm(&t.x),
            &fm(&t.x1),
            &fm(&t.x2),
            &oracle::CvtParams {
                proj_k: t.proj[0].data(),
                proj_q: t.proj[1].data(),
                proj_v: t.proj[2].data(),
                fuse_w: t.fuse_w.data(),
                fuse_b: t.fuse_b.data(),
            },
        );
        check(inter.index == o.h, || format!("cvt {seed}: selection differs"))?;
        worst = out.data().iter().zip(&o.out.v).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        worst = inter.attention.data().iter().zip(&o.w).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    check(worst < 1e-9, || format!("cvt differs by {worst:.2e}"))?;

    let micro = NetConfig { input_size: 8, widths: vec![4, 4], ftvp_scales: vec![1], ..NetConfig::default() };
    let mut net_worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..100 {
        if compared == 20 {
            break;
        }
        if let Some(d) = network_diff(&micro, seed)? {
            net_worst = net_worst.max(d);
            compared += 1;
        }
    }
    check(compared == 20, || format!("only {compared} untied instances"))?;
    check(net_worst < 1e-9, || format!("micro network differs by {net_worst:.2e}"))?;
    Ok(format!("20 cvt instances ({worst:.1e}), 20 two-scale networks ({net_worst:.1e})"))
}

fn memorization() -> Outcome {
    let net = NetConfig::default();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let start = Instant::now();
        let data = dataset(seed, 1, net.input_size)?;
        let tc = TrainConfig { epochs: 200, seed, ..TrainConfig::default() };
        check(tc.iters_per_epoch(1) == 1, || String::from("one step per epoch"))?;
        let out = train(&net, &tc, &data, None, &mut |_| Ok(())).map_err(err)?;
        let acc = evaluate(&out.params, &net, &data).map_err(err)?.pixel_accuracy;
        let secs = start.elapsed().as_secs_f64();
        check(acc > 0.95 && secs < 300.0, || format!("seed {seed}: accuracy {acc:.4} in {secs:.0}s"))?;
        accs.push(format!("{:.1}% {secs:.0}s", 100.0 * acc));
    }
    Ok(format!("pixel accuracy {}", accs.join(", ")))
}

/// Run at lr 1e-3 with batches of 2.
fn cycle_trend() -> Outcome {
    let net = NetConfig::default();
    let (mut pass, mut ratios) = (0, Vec::new());
    for seed in 0..3 {
        if pass == 2 || ratios.len() - pass == 2 {
            break;
        }
        let data = dataset(seed, 200, net.input_size)?;
        let tc = TrainConfig { lr0: 1e-3, batch_size: 2, epochs: 10, seed, ..TrainConfig::default() };
        let out = train(&net, &tc, &data, None, &mut |_| Ok(())).map_err(err)?;
        let ratio = out.history[9].cycle_total / out.history[0].cycle_total;
        pass += (ratio <= 0.5) as usize;
        ratios.push(format!("{ratio:.3}"));
    }
    let detail = format!("epoch 10 / epoch 1 cycle loss: {}", ratios.join(", "));
    if pass >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 128 px inputs, 15 epochs at lr 1e-3 with batches of 2.
fn ablation_trend() -> Outcome {
    let start = Instant::now();
    let base = NetConfig { input_size: 128, ..NetConfig::default() };
    let accretion = Suite::Accretion.variants(&base);
    let kv = Suite::KvCombos.variants(&base);
    let pick = |vs: &[ftvp_core::train::Variant], f: &dyn Fn(&ftvp_core::train::Variant) -> bool| {
        vs.iter().find(|v| f(v)).cloned().ok_or_else(|| String::from("missing variant"))
    };
    let full = pick(&accretion, &|v| v.label == "+ Deep Supervision")?;
    let mlp = pick(&accretion, &|v| v.label == "+ MLP")?;
    let x_xpp = pick(&kv, &|v| v.kv == Some(KvMode::FrontCycled))?;
    let q_only = pick(&kv, &|v| v.kv == Some(KvMode::QOnly))?;
    check(full.net == x_xpp.net, || String::from("full model and K=X V=X'' differ"))?;

    let (mut a, mut b, mut seeds) = (0, 0, Vec::new());
    for seed in 0..3u64 {
        let n = seeds.len();
        if (a >= 2 && b >= 2) || n - a >= 2 || n - b >= 2 {
            break;
        }
        let all = dataset(seed, 600, base.input_size)?;
        let (train_set, test_set) = all.split_at(500);
        let tc = TrainConfig { lr0: 1e-3, batch_size: 2, epochs: 15, seed, ..TrainConfig::default() };
        let miou = |net: &NetConfig| -> Result<f64, String> {
            let out = train(net, &tc, train_set, None, &mut |_| Ok(())).map_err(err)?;
            Ok(evaluate(&out.params, net, test_set).map_err(err)?.miou)
        };
        let (f, m, q) = (miou(&full.net)?, miou(&mlp.net)?, miou(&q_only.net)?);
        a += (f >= m) as usize;
        b += (f >= q) as usize;
        seeds.push(format!("seed {seed}: full {f:.2} mlp {m:.2} q-only {q:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{} ({secs:.0}s)", seeds.join("; "));
    if a >= 2 && b >= 2 && secs < 7200.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Set-arithmetic IoU and threshold-sweep AP per class.
fn brute_force(samples: &[Scored], k: usize) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let (mut iou, mut ap) = (Vec::new(), Vec::new());
    for c in 0..k {
        let (mut pred, mut truth, mut scored) = (BTreeSet::new(), BTreeSet::new(), Vec::new());
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
        iou.push((union > 0).then(|| pred.intersection(&truth).count() as f64 / union as f64));
        if truth.is_empty() {
            ap.push(None);
            continue;
        }
        let mut thresholds: Vec<f64> = scored.iter().map(|s| s.1).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let (mut area, mut prev) = (0.0, 0.0);
        for t in thresholds {
            let kept: BTreeSet<_> = scored.iter().filter(|s| s.1 >= t).map(|s| s.0).collect();
            let hits = kept.intersection(&truth).count();
            let recall = hits as f64 / truth.len() as f64;
            area += (recall - prev) * (hits as f64 / kept.len() as f64);
            prev = recall;
        }
        ap.push(Some(area));
    }
    (iou, ap)
}

fn mask_report(pred: &[u8], truth: &[u8], k: usize) -> Result<ftvp_core::train::EvalReport, String> {
    let p = ClassMask::new(pred.len(), 1, pred.to_vec()).map_err(err)?;
    let t = ClassMask::new(truth.len(), 1, truth.to_vec()).map_err(err)?;
    let mut ev = Evaluator::new(k);
    ev.add(&one_hot(&p, k).map_err(err)?, &p, &t).map_err(err)?;
    ev.report().map_err(err)
}

fn metric_oracles() -> Outcome {
    let (k, w, h) = (4, 5, 4);
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let mut samples = Vec::new();
        let mut ev = Evaluator::new(k);
        for _ in 0..1 + rng.int_inclusive(0, 2) {
            let scores: Vec<Vec<f64>> =
                (0..k).map(|_| (0..w * h).map(|_| rng.int_inclusive(0, 5) as f64 / 5.0).collect()).collect();
            let pred: Vec<u8> = (0..w * h).map(|_| rng.int_inclusive(0, k - 1) as u8).collect();
            let truth: Vec<u8> = (0..w * h).map(|_| rng.int_inclusive(0, k - 1) as u8).collect();
            let t = Tensor::new(&[k, h, w], scores.concat()).map_err(err)?;
            let pm = ClassMask::new(w, h, pred.clone()).map_err(err)?;
            let tm = ClassMask::new(w, h, truth.clone()).map_err(err)?;
            ev.add(&t, &pm, &tm).map_err(err)?;
            samples.push((scores, pred, truth));
        }
        let report = ev.report().map_err(err)?;
        let (iou, ap) = brute_force(&samples, k);
        check(report.iou == iou, || format!("mask set {seed}: IoU {:?} vs {iou:?}", report.iou))?;
        check(report.ap == ap, || format!("mask set {seed}: AP {:?} vs {ap:?}", report.ap))?;
    }

    let truth = [1, 1, 1, 1, 0, 0];
    let perfect = mask_report(&truth, &truth, 2)?;
    check(perfect.iou == vec![Some(1.0), Some(1.0)] && perfect.ap == vec![Some(1.0), Some(1.0)], || {
        format!("perfect: {:?} {:?}", perfect.iou, perfect.ap)
    })?;
    let half = mask_report(&[0, 0, 1, 1, 1, 1], &truth, 2)?;
    check(half.iou == vec![Some(0.0), Some(1.0 / 3.0)], || format!("disjoint / half overlap: {:?}", half.iou))?;
    Ok(String::from("50 random mask sets match exactly; perfect 1, disjoint 0, half overlap 1/3"))
}

fn panorama() -> Outcome {
    let cfg = SynthConfig::default();
    let grid = cfg.grid;
    let mut cells = 0;
    for seed in 0..3 {
        let d = drive(seed, &cfg, &DriveConfig::default());
        check(d.poses.len() == 20, || String::from("20 frames"))?;
        let masks: Vec<ClassMask> = d.poses.iter().map(|&p| rasterize_bev(&d.scene, &grid, p)).collect();
        let pano = stitch_panorama(&masks, &d.poses, &grid).map_err(err)?;
        for row in 0..pano.mask.height() {
            for col in 0..pano.mask.width() {
                let center = pano.cell_center(col, row);
                let seen = d.poses.iter().any(|p| grid.cell_of(p.apply_inverse(center)).is_some());
                let got = pano.mask.get(col, row);
                check(seen == (got != UNOBSERVED), || {
                    format!("drive {seed}: cell ({col}, {row}) observed {seen}, got {got}")
                })?;
                if seen {
                    let want = d.scene.class_at(center);
                    check(got == want, || format!("drive {seed}: cell ({col}, {row}) is {got}, world says {want}"))?;
                    cells += 1;
                }
            }
        }
    }
    Ok(format!("3 drives of 20 frames, {cells} observed cells match the world map"))
}

fn ftvp(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ftvp")).args(args).env("FTVP_THREADS", threads).output().map_err(err)?;
    check(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    ftvp(&["synth", "--seed", "3", "--count", "8", "--size", "64", "--out", &path("data")], "1")?;
    let data = path("data");
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let out = path(run);
        let args = ["train", "--data", &data, "--seed", "11", "--epochs", "3", "--batch-size", "3", "--out", &out];
        ftvp(&args, threads)?;
    }
    let same = |f: &str| -> Result<bool, String> {
        let read = |run: &str| fs::read(Path::new(&path(run)).join(f)).map_err(err);
        Ok(read("a")? == read("b")?)
    };
    for f in ["loss.csv", "final.ckpt", "best.ckpt", "config.toml"] {
        check(same(f)?, || format!("{f} differs between runs"))?;
    }
    Ok(String::from("loss.csv and checkpoints bitwise equal across two runs (1 and 3 threads)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("gradient oracle", gradients),
        ("cvt algebra", cvt_algebra),
        ("oracle equivalence", oracle_equivalence),
        ("memorization", memorization),
        ("cycle loss trend", cycle_trend),
        ("ablation trend", ablation_trend),
        ("metric oracles", metric_oracles),
        ("panorama", panorama),
        ("determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("criterion {n} {name:<20} {status}  {detail}  [{secs:.1}s]");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
