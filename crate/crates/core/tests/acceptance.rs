//! Acceptance criteria. Prints one PASS/FAIL line per criterion; positional
//! arguments select criteria by number.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use facemark::checks::{self, Scope};
use facemark::cli::{cmd_train, RunConfig};
use facemark::data::{augment::MAX_ROTATION_DEG, make_example, parse_pts, scan_standard, synth_faces, write_pts, AugmentParams, Example, FaceSample, Split};
use facemark::geometry::{crop_box, nmse, LandmarkSet, Point, Scheme};
use facemark::heatmap::{decode_argmax, encode_gaussian, encode_pwc, onehot, HeatmapStack, MapSize, PwcLabelMap, Semantics};
use facemark::losses::{loss_disc, loss_dist, loss_hybrid, loss_pwc, KlDirection, LossValue};
use facemark::models::{Discriminator, HeadKind, DISC_WIDTHS};
use facemark::training::{collate, early_stop, fit, FitOptions, LossKind, Network, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy_config() -> Result<RunConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    RunConfig::load(&path).map_err(err)
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let results = checks::run(&[Scope::Primitive, Scope::Loss], 5, 1).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let names: BTreeSet<&str> = results.iter().map(|r| r.component.as_str()).collect();
    let required = [
        "conv2d", "deconv2d", "maxpool2", "batchnorm_train", "batchnorm_eval", "fully_connected", "spatial_softmax",
        "channel_softmax", "decode_softargmax", "loss_reg", "loss_dist", "loss_hreg", "loss_pwc", "loss_hybrid",
        "loss_face", "loss_disc", "loss_total",
    ];
    for name in required {
        ensure(names.iter().any(|n| n.starts_with(name)), || format!("{name} not checked"))?;
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        ensure(r.passed() && r.instances >= 5, || format!("{r}"))?;
    }
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} components, worst rel err {worst:.2e}", results.len()))
}

fn discriminator_count() -> Outcome {
    let d = Discriminator::reference(68).map_err(err)?;
    let walked = d.count_params().total;
    let formula = Discriminator::analytic_param_count(68, &DISC_WIDTHS);
    // Dense 136->128 with batchnorm, 128->128 with batchnorm, 128->1.
    let by_hand = (136 * 128 + 128 + 2 * 128) + (128 * 128 + 128 + 2 * 128) + (128 + 1);
    ensure(walked == 34_689 && formula == 34_689 && by_hand == 34_689, || {
        format!("walk {walked}, formula {formula}, hand {by_hand}")
    })?;
    Ok(format!("{walked} parameters"))
}

fn loss_oracles() -> Outcome {
    let (h, w) = (6, 5);
    for k in [2usize, 5, 11] {
        let scheme = Scheme::Generic { count: k - 1 };
        let probs = HeatmapStack::new(h, w, k, vec![1.0 / k as f64; h * w * k], Semantics::PwcProbability, scheme).map_err(err)?;
        let labels: Vec<u32> = (0..h * w).map(|i| (i % k) as u32).collect();
        let labels = PwcLabelMap::new(h, w, labels, scheme).map_err(err)?;
        let v = loss_pwc(&probs, &labels).map_err(err)?.value;
        ensure((v - (k as f64).ln()).abs() <= 1e-9, || format!("pwc K={k}: {v}"))?;
    }
    let n = h * w;
    let scheme = Scheme::Generic { count: 1 };
    let uniform = HeatmapStack::new(h, w, 1, vec![1.0 / n as f64; n], Semantics::Distribution, scheme).map_err(err)?;
    let mut hot = vec![0.0; n];
    hot[7] = 1.0;
    let hot = HeatmapStack::new(h, w, 1, hot, Semantics::Distribution, scheme).map_err(err)?;
    let v = loss_dist(&uniform, &hot, KlDirection::Forward).map_err(err)?.value;
    ensure((v - (n as f64).ln()).abs() <= 1e-9, || format!("dist: {v}"))?;
    let v = loss_disc(&[0.5], &[0.5]).map_err(err)?.value;
    ensure((v - 2.0 * 2f64.ln()).abs() <= 1e-9, || format!("disc: {v}"))?;
    let v = loss_hybrid(&LossValue::leaf("pwc", 0.8), &LossValue::leaf("reg", 0.4), 1.0, 0.25).map_err(err)?.value;
    ensure(v == 0.9, || format!("hybrid: {v}"))?;
    Ok("pwc log K, dist log n, disc 2 log 2, hybrid 0.9".into())
}

fn codec_roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = 32;
    let size = MapSize::square(side);
    let sigma = 1.0;
    let rounded = |p: &Point| (p.x.round(), p.y.round());
    let mut gaussian = 0;
    while gaussian < 1000 {
        let lo = 2.0 * sigma;
        let hi = side as f64 - 1.0 - 2.0 * sigma;
        let pts: Vec<Point> = (0..10).map(|_| Point::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi))).collect();
        let set = LandmarkSet::new(Scheme::Generic { count: 10 }, pts).map_err(err)?;
        let maps = encode_gaussian(&set, size, sigma).map_err(err)?;
        for c in 0..maps.channels() {
            let s: f64 = maps.channel(c).iter().sum();
            ensure((s - 1.0).abs() <= 1e-6, || format!("distribution channel sums to {s}"))?;
        }
        let back = decode_argmax(&maps).map_err(err)?;
        for (p, q) in set.points().iter().zip(back.points()) {
            ensure(rounded(p) == (q.x, q.y), || format!("gaussian {p:?} decoded as {q:?}"))?;
        }
        gaussian += set.len();
    }
    let mut pwc = 0;
    while pwc < 1000 {
        let pts: Vec<Point> = (0..10).map(|_| Point::new(rng.gen_range(-0.49..side as f64 - 0.51), rng.gen_range(-0.49..side as f64 - 0.51))).collect();
        let cells: BTreeSet<(i64, i64)> = pts.iter().map(|p| (p.x.round() as i64, p.y.round() as i64)).collect();
        if cells.len() < pts.len() {
            continue;
        }
        let set = LandmarkSet::new(Scheme::Generic { count: 10 }, pts).map_err(err)?;
        let probs = onehot(&encode_pwc(&set, size, 0), 11).map_err(err)?;
        for px in probs.data().chunks(probs.channels()) {
            let s: f64 = px.iter().sum();
            ensure((s - 1.0).abs() <= 1e-6, || format!("pwc pixel sums to {s}"))?;
        }
        let back = decode_argmax(&probs).map_err(err)?;
        for (p, q) in set.points().iter().zip(back.points()) {
            ensure(rounded(p) == (q.x, q.y), || format!("pwc {p:?} decoded as {q:?}"))?;
        }
        pwc += set.len();
    }
    Ok(format!("{gaussian} gaussian and {pwc} pwc landmarks exact"))
}

fn random_face68(rng: &mut ChaCha8Rng) -> Result<LandmarkSet, String> {
    let pts = (0..68).map(|_| Point::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0))).collect();
    LandmarkSet::new(Scheme::Face68, pts).map_err(err)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (d, t) = (random_face68(&mut rng)?, random_face68(&mut rng)?);
        let (dp, tp) = (d.points(), t.points());
        let iod = ((tp[36].x - tp[45].x).powi(2) + (tp[36].y - tp[45].y).powi(2)).sqrt();
        let mut sum = 0.0;
        for i in 0..68 {
            sum += ((dp[i].x - tp[i].x).powi(2) + (dp[i].y - tp[i].y).powi(2)).sqrt() / iod;
        }
        let expected = sum / 68.0;
        worst = worst.max((nmse(&d, &t).map_err(err)? - expected).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let mut truth = vec![Point::new(0.0, 0.0); 68];
    truth[45] = Point::new(10.0, 0.0);
    for (i, p) in truth.iter_mut().enumerate().filter(|(i, _)| *i != 36 && *i != 45) {
        *p = Point::new(i as f64, 2.0 * i as f64);
    }
    let moved: Vec<Point> = truth.iter().map(|p| Point::new(p.x + 3.0, p.y + 4.0)).collect();
    let hand = nmse(&LandmarkSet::new(Scheme::Face68, moved).map_err(err)?, &LandmarkSet::new(Scheme::Face68, truth).map_err(err)?).map_err(err)?;
    ensure(hand == 0.5, || format!("hand case {hand}"))?;
    Ok(format!("max deviation {worst:.1e}, hand case 0.5"))
}

fn procedure_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let s = random_face68(&mut rng)?;
        let xs: Vec<f64> = s.points().iter().map(|p| p.x).collect();
        let ys: Vec<f64> = s.points().iter().map(|p| p.y).collect();
        let span = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
        let side = 1.3 * span(&xs).max(span(&ys));
        let (cx, cy) = (xs.iter().sum::<f64>() / 68.0, ys.iter().sum::<f64>() / 68.0);
        let b = crop_box(&s).map_err(err)?;
        ensure((b.side - side).abs() < 1e-9 && (b.center.x - cx).abs() < 1e-9 && (b.center.y - cy).abs() < 1e-9, || {
            format!("crop {b:?} vs side {side} center ({cx}, {cy})")
        })?;
    }
    let draws: Vec<AugmentParams> = (0..10_000).map(|_| AugmentParams::sample(&mut rng)).collect();
    ensure(draws.iter().all(|d| d.angle_deg.abs() <= MAX_ROTATION_DEG && (0.6..=1.0).contains(&d.scale)), || "draw out of range".into())?;
    let mean_angle = draws.iter().map(|d| d.angle_deg).sum::<f64>() / 1e4;
    let mean_scale = draws.iter().map(|d| d.scale).sum::<f64>() / 1e4;
    // The angle midpoint is zero, so its tolerance is 2% of the interval width.
    ensure(mean_angle.abs() <= 0.02 * 60.0 && (mean_scale - 0.8).abs() <= 0.02 * 0.8, || {
        format!("means angle {mean_angle:.3}, scale {mean_scale:.4}")
    })?;
    for lead in 0..4 {
        let mut h: Vec<f64> = (0..lead).map(|i| 10.0 - i as f64).collect();
        h.push(1.0);
        let mut stopped_at = None;
        for k in 1..=15 {
            h.push(1.0 + 0.1 * (k % 3) as f64);
            if stopped_at.is_none() && early_stop(&h, 10) {
                stopped_at = Some(k);
            }
        }
        ensure(stopped_at == Some(10), || format!("stopped after {stopped_at:?} non-improvements"))?;
        h.push(0.5);
        ensure(!early_stop(&h, 10), || "improvement did not reset patience".into())?;
    }
    Ok(format!("crop exact on 100 shapes, mean angle {mean_angle:.2}, mean scale {mean_scale:.4}, stop at 10"))
}

fn batch_of(faces: &[FaceSample], cfg: &TrainConfig) -> Result<facemark::training::Batch, String> {
    let spec = cfg.model_spec(faces[0].landmarks.scheme());
    let ex: Vec<Example> = faces
        .iter()
        .map(|f| make_example(f, spec.input_size, spec.map_size(), cfg.head, cfg.target))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let refs: Vec<&Example> = ex.iter().collect();
    collate(&refs).map_err(err)
}

fn adversarial_schedule() -> Outcome {
    let faces = synth_faces(4, 64, 7).map_err(err)?;
    let cfg = TrainConfig { loss: LossKind::HybridDisc, batch_size: 4, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg.clone(), cfg.model_spec(faces[0].landmarks.scheme())).map_err(err)?;
    t.instrument();
    let batch = batch_of(&faces, &cfg)?;
    let steps = 3;
    for _ in 0..steps {
        t.train_step(&batch).map_err(err)?;
    }
    let disc_names: BTreeSet<String> = t.adversary.as_ref().ok_or("no discriminator")?.net.layout().params().iter().map(|p| p.name.clone()).collect();
    let log = t.updates.clone().unwrap_or_default();
    ensure(log.len() == 3 * steps, || format!("{} updates in {steps} steps", log.len()))?;
    for (step, calls) in log.chunks(3).enumerate() {
        let order: Vec<Network> = calls.iter().map(|u| u.network).collect();
        ensure(order == [Network::Discriminator, Network::Detector, Network::Detector], || format!("step {step}: {order:?}"))?;
        ensure(calls.iter().all(|u| u.step == step as u64), || format!("step {step}: mislabeled updates"))?;
        for u in calls {
            ensure(!u.params.is_empty(), || "empty update".into())?;
            let in_disc = u.params.iter().filter(|n| disc_names.contains(*n)).count();
            let expected = if u.network == Network::Discriminator { u.params.len() } else { 0 };
            ensure(in_disc == expected, || format!("{:?} update touches the other network", u.network))?;
        }
    }
    Ok(format!("{steps} steps of 1 discriminator + 2 detector updates, disjoint parameters"))
}

fn convergence() -> Outcome {
    let base = toy_config()?.train_config().map_err(err)?;
    let faces = synth_faces(500, 64, 1234).map_err(err)?;
    let (train, val): (Vec<_>, Vec<_>) = faces.into_iter().partition(|f| f.meta.split == Split::Train);
    let t0 = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..5 {
        let mut pair = [0.0; 2];
        for (slot, loss) in [LossKind::Pwc, LossKind::Hybrid].into_iter().enumerate() {
            let cfg = TrainConfig { loss, seed, ..base.clone() };
            let r = fit(&cfg, &train, &val, &FitOptions::default()).map_err(err)?;
            pair[slot] = r.report.best_val_nmse.ok_or("no validation ran")?;
            eprintln!("  seed {seed} {:<6} nmse {:.4} ({:.0}s)", loss.name(), pair[slot], r.report.train_seconds);
        }
        rows.push(pair);
    }
    let wins = rows.iter().filter(|[p, h]| h <= p).count();
    let fmt = |i: usize| rows.iter().map(|r| format!("{:.4}", r[i])).collect::<Vec<_>>().join(" ");
    let detail = format!("pwc [{}] hybrid [{}] hybrid<=pwc {wins}/5", fmt(0), fmt(1));
    ensure(rows.iter().all(|r| r[0] < 0.08), || format!("pwc above 0.08: {detail}"))?;
    ensure(rows.iter().all(|r| r[1] < 0.05), || format!("hybrid above 0.05: {detail}"))?;
    ensure(wins >= 4, || format!("ordering: {detail}"))?;
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    ensure(minutes < 30.0, || format!("took {minutes:.1} min: {detail}"))?;
    Ok(detail)
}

fn overfit() -> Outcome {
    let faces = synth_faces(4, 64, 99).map_err(err)?;
    let mut reached = Vec::new();
    for head in HeadKind::ALL {
        let mut cfg = TrainConfig::for_head(head);
        cfg.adam.lr = 1e-3;
        cfg.batch_size = 4;
        cfg.augment = false;
        let spec = cfg.model_spec(faces[0].landmarks.scheme());
        if head == HeadKind::Cascaded {
            ensure(spec.cascade_stages == 3, || format!("{} cascade stages", spec.cascade_stages))?;
        }
        let mut t = Trainer::new(cfg.clone(), spec).map_err(err)?;
        let batch = batch_of(&faces, &cfg)?;
        let first = t.train_step(&batch).map_err(err)?.loss.value;
        let hit = (1..2000).find_map(|s| match t.train_step(&batch) {
            Ok(o) if o.loss.value < 0.01 * first => Some(Ok(s)),
            Ok(_) => None,
            Err(e) => Some(Err(err(e))),
        });
        let step = hit.ok_or_else(|| format!("{} did not reach 1% in 2000 steps", head.name()))??;
        reached.push(format!("{} {step}", head.name()));
    }
    Ok(format!("steps to 1%: {}", reached.join(", ")))
}

fn determinism() -> Outcome {
    let mut cfg = toy_config()?;
    for (k, v) in [("data.synth_count", "40"), ("train.max_steps", "20"), ("train.val_interval", "10")] {
        cfg.set(k, v).map_err(err)?;
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let run = |name: &str, cfg: &RunConfig| -> Result<(String, Vec<u8>), String> {
        let out = dir.path().join(name);
        cmd_train(cfg, &out).map_err(err)?;
        let log = std::fs::read_to_string(out.join("train_log.csv")).map_err(err)?;
        Ok((log, std::fs::read(out.join("best.ckpt")).map_err(err)?))
    };
    let a = run("a", &cfg)?;
    let b = run("b", &cfg)?;
    ensure(a.0 == b.0, || "loss logs differ".into())?;
    ensure(a.1 == b.1, || "checkpoints differ".into())?;
    cfg.set("train.seed", "1").map_err(err)?;
    let c = run("c", &cfg)?;
    ensure(c.0 != a.0, || "seed has no effect".into())?;
    Ok(format!("logs and {}-byte checkpoints identical", a.1.len()))
}

const LAYOUT: [(&str, usize); 10] = [
    ("afw", 337),
    ("helen/trainset", 2000),
    ("helen/testset", 330),
    ("lfpw/trainset", 811),
    ("lfpw/testset", 224),
    ("300W/01_Indoor", 300),
    ("300W/02_Outdoor", 300),
    ("ibug", 135),
    ("cofw/test", 507),
    ("other", 3),
];

fn data_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let s = random_face68(&mut rng)?;
        let text = write_pts(&s);
        let back = parse_pts(&text).map_err(err)?;
        for (p, q) in s.points().iter().zip(back.points()) {
            ensure(format!("{:.6} {:.6}", p.x, p.y) == format!("{:.6} {:.6}", q.x, q.y), || format!("{p:?} came back as {q:?}"))?;
        }
        ensure(write_pts(&back) == text, || "second write differs".into())?;
    }
    let root = tempfile::tempdir().map_err(err)?;
    let mut helen_test: Vec<PathBuf> = Vec::new();
    for (dir, n) in LAYOUT {
        let d = root.path().join(dir);
        std::fs::create_dir_all(&d).map_err(err)?;
        for i in 0..n {
            std::fs::write(d.join(format!("{i}.pts")), "").map_err(err)?;
            let img = d.join(format!("{i}.jpg"));
            std::fs::write(&img, "").map_err(err)?;
            if dir == "helen/testset" {
                helen_test.push(img);
            }
        }
    }
    let scan = scan_standard(root.path()).map_err(err)?;
    let report = scan.manifest.check_counts(&scan.missing);
    ensure(report.is_exact(), || format!("complete tree reported discrepancies:\n{report}"))?;
    ensure(scan.unrecognized.len() == 3, || format!("{} unrecognized", scan.unrecognized.len()))?;
    let counts = scan.manifest.counts();
    let got = |ds: &str, s: Split| counts.get(&(ds.to_string(), s)).copied().unwrap_or(0);
    ensure(got("Helen", Split::Train) == 2000 && got("Helen", Split::Val) == 330 && got("COFW", Split::Val) == 507, || {
        "standard counts".into()
    })?;
    for img in &helen_test[..4] {
        std::fs::remove_file(img).map_err(err)?;
    }
    let scan = scan_standard(root.path()).map_err(err)?;
    let report = scan.manifest.check_counts(&scan.missing);
    let bad: Vec<String> = report.discrepancies().map(|r| format!("{} {} {}/{}", r.dataset, r.split.name(), r.found, r.expected)).collect();
    ensure(bad == ["Helen val 326/330"] && report.missing.len() == 4, || format!("{bad:?}, {} missing", report.missing.len()))?;
    ensure(report.to_string().contains("missing 4"), || report.to_string())?;
    Ok("pts exact at 6 decimals, counts exact, removed images reported".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "discriminator parameter count", discriminator_count),
        (3, "loss oracles", loss_oracles),
        (4, "codec roundtrips", codec_roundtrips),
        (5, "metric oracle", metric_oracle),
        (6, "procedure fidelity", procedure_fidelity),
        (7, "adversarial schedule", adversarial_schedule),
        (8, "desk-scale convergence", convergence),
        (9, "overfit smoke test", overfit),
        (10, "determinism", determinism),
        (11, "data fidelity", data_fidelity),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
