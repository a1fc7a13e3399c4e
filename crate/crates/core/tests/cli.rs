use std::path::Path;

use facemark::cli::{self, cmd_gradcheck, cmd_synth, help_text, main_with, KEYS};
use facemark::checks::Scope;
use facemark::data::{parse_pts, synth_faces, Manifest};

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("facemark").chain(args.iter().copied()))
}

fn toy_config(dir: &Path) -> String {
    let p = dir.join("toy.cfg");
    std::fs::write(
        &p,
        "[data]\nsynth_count = 20   # tiny\n\n[train]\nbatch_size = 4\nval_interval = 5\nlr = 0.001\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn train_respects_overrides_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = run(&["train", "--config", &cfg, "--set", "train.max_steps=10", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,split,loss"));
    assert_eq!(log.lines().filter(|l| l.contains(",train,")).count(), 10);
    assert_eq!(log, std::fs::read_to_string(b.join("train_log.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("best.ckpt")).unwrap(), std::fs::read(b.join("best.ckpt")).unwrap());

    let code = run(&["eval", "--config", &cfg, "--set", "eval.svg=true", "--out", a.to_str().unwrap()]);
    assert_eq!(code, 0);
    let table = std::fs::read_to_string(a.join("nmse_table.txt")).unwrap();
    assert!(table.contains("Total") && table.contains("eye anchors") && table.contains("Detection rate"));
    let ecdf = std::fs::read_to_string(a.join("ecdf_pwc_total.csv")).unwrap();
    assert!(ecdf.starts_with("threshold,fraction"));
    assert!(ecdf.trim_end().ends_with(",1"));
    assert!(a.join("ecdf_pwc.svg").exists());
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_ne!(run(&["train", "--set", "data.source=manifest", "--out", o]), 0);
    assert_ne!(run(&["train", "--set", "train.no_such_key=1", "--out", o]), 0);
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[train]\nsteps = 3\n").unwrap();
    assert_ne!(run(&["train", "--config", bad.to_str().unwrap(), "--out", o]), 0);
    assert_ne!(run(&["eval", "--out", o]), 0);
    assert_eq!(run(&["frobnicate"]), 2);
}

#[test]
fn missing_data_path_names_the_key() {
    let mut c = cli::RunConfig::default();
    c.apply_override("data.source=scan").unwrap();
    let e = c.data_source().unwrap_err().to_string();
    assert!(e.contains("data.root"), "{e}");
}

#[test]
fn help_documents_every_key() {
    let h = help_text();
    for verb in ["train", "eval", "gradcheck", "synth", "--config", "--set", "--out", "--seed"] {
        assert!(h.contains(verb), "{verb}");
    }
    for k in KEYS {
        let line = h.lines().find(|l| l.split_whitespace().next() == Some(k.name)).unwrap_or_else(|| panic!("{}", k.name));
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        assert!(line.contains(default), "{line}");
    }
}

#[test]
fn synth_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth(10, 48, 3, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 10);
    let back = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(back.entries.len(), 10);
    let truth = synth_faces(10, 48, 3).unwrap();
    for (e, f) in back.entries.iter().zip(&truth) {
        let pts = parse_pts(&std::fs::read_to_string(&e.pts).unwrap()).unwrap();
        for (p, q) in pts.points().iter().zip(f.landmarks.points()) {
            assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6);
        }
        assert!(e.image.exists());
    }
    let again = tempfile::tempdir().unwrap();
    cmd_synth(10, 48, 3, again.path()).unwrap();
    for e in &m.entries {
        let name = e.image.file_name().unwrap();
        assert_eq!(std::fs::read(&e.image).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
    let code = run(&["synth", "--count", "3", "--size", "32", "--seed", "9", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(Manifest::read(&dir.path().join("s/manifest.csv")).unwrap().entries.len(), 3);
}

#[test]
fn trained_on_synth_files_via_manifest() {
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(10, 64, 4, &dir.path().join("faces")).unwrap();
    let manifest = dir.path().join("faces/manifest.csv");
    let out = dir.path().join("run");
    let code = run(&[
        "train",
        "--set",
        "data.source=manifest",
        "--set",
        &format!("data.manifest={}", manifest.display()),
        "--set",
        "train.max_steps=2",
        "--set",
        "train.batch_size=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn gradcheck_scope_filtering() {
    let r = cmd_gradcheck(&["loss".into()], 1, 0).unwrap();
    assert!(!r.is_empty() && r.iter().all(|c| c.scope == Scope::Loss));
    assert!(r.iter().all(|c| c.passed()));
    assert!(cmd_gradcheck(&["nope".into()], 1, 0).is_err());
    assert_eq!(run(&["gradcheck", "--scope", "primitive", "--instances", "1"]), 0);
}
