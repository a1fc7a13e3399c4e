//! Command-line verbs: `train`, `eval`, `gradcheck` and `synth`.

pub mod config;
pub mod report;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::autodiff::Checkpoint;
use crate::checks::{self, CheckResult, Scope};
use crate::data::manifest::read_id_list;
use crate::data::{make_example, scan_standard, synth_faces, write_pts, Example, FaceSample, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::training::{fit, FitOptions, FitReport, Trainer};

pub use config::{keys_help, DataSource, RunConfig, KEYS};
pub use report::{evaluate, format_tables, EvalSample, ModelEval};

#[derive(Parser, Debug)]
#[command(name = "facemark", version, about = "Facial landmark detection: train, evaluate, gradient-check, synthesize data")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    /// Configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set train.max_steps=10 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed override: train.seed for train, data.synth_seed for synth.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Train a detector; writes train_log.csv, report.json and best.ckpt.
    Train,
    /// Evaluate checkpoints on the validation split; writes tables and ECDF CSVs.
    Eval,
    /// Finite-difference gradient checks; nonzero exit on any failure.
    Gradcheck {
        /// Comma-separated scopes: primitive, loss, model.
        #[arg(long, value_delimiter = ',', default_value = "primitive,loss,model")]
        scope: Vec<String>,
        /// Random instances per component.
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Write synthetic faces as PPM images, pts files and a manifest.
    Synth {
        /// Number of faces (default data.synth_count).
        #[arg(long)]
        count: Option<usize>,
        /// Image side in pixels (default data.synth_size).
        #[arg(long)]
        size: Option<usize>,
    },
}

/// Resolves the config file and `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

/// Train and validation samples of the configured source.
pub fn load_samples(cfg: &RunConfig) -> Result<(Vec<FaceSample>, Vec<FaceSample>)> {
    let occluded = match cfg.occluded_list()? {
        Some(p) => read_id_list(&p)?,
        None => BTreeSet::new(),
    };
    let samples = match cfg.data_source()? {
        DataSource::Synthetic { count, size, seed } => {
            let mut s = synth_faces(count, size, seed)?;
            for f in &mut s {
                f.meta.occluded = occluded.contains(&f.meta.id);
            }
            s
        }
        DataSource::Manifest(path) => load_manifest(&Manifest::read(&path)?, &occluded)?,
        DataSource::Scan(root) => {
            let scan = scan_standard(&root)?;
            let report = scan.manifest.check_counts(&scan.missing);
            eprint!("{report}");
            load_manifest(&scan.manifest, &occluded)?
        }
    };
    Ok(samples.into_iter().partition(|s| s.meta.split == Split::Train))
}

fn load_manifest(m: &Manifest, occluded: &BTreeSet<String>) -> Result<Vec<FaceSample>> {
    m.entries.iter().map(|e| Manifest::load(e, occluded)).collect()
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<FitReport> {
    let tc = cfg.train_config()?;
    let (train, val) = load_samples(cfg)?;
    let res = fit(&tc, &train, &val, &FitOptions { out_dir: Some(out.to_path_buf()), verbose: true })?;
    Ok(res.report)
}

/// Predictions of `trainer` on `samples`; samples that cannot be cropped
/// or give non-finite output count as not detected.
pub fn predict_samples(trainer: &Trainer, samples: &[FaceSample]) -> Result<Vec<EvalSample>> {
    let spec = trainer.spec();
    let mut out = Vec::with_capacity(samples.len());
    let mut pending: Vec<(usize, Example)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.landmarks.scheme() != spec.scheme {
            return Err(Error::Config(format!(
                "scheme mismatch: checkpoint is {}, sample {} is {}",
                spec.scheme.name(),
                s.meta.id,
                s.landmarks.scheme().name()
            )));
        }
        let ex = make_example(s, spec.input_size, spec.map_size(), spec.head, trainer.config.target);
        let truth = ex.as_ref().map(|e| e.crop_landmarks.clone()).unwrap_or_else(|_| s.landmarks.clone());
        out.push(EvalSample { id: s.meta.id.clone(), dataset: s.meta.dataset.clone(), occluded: s.meta.occluded, truth, pred: None });
        if let Ok(ex) = ex {
            pending.push((i, ex));
        }
    }
    let refs: Vec<&Example> = pending.iter().map(|(_, e)| e).collect();
    let preds = if refs.is_empty() { Vec::new() } else { trainer.predict(&refs)? };
    for ((i, _), p) in pending.iter().zip(preds) {
        if p.points().iter().all(|q| q.x.is_finite() && q.y.is_finite()) {
            out[*i].pred = Some(p);
        }
    }
    Ok(out)
}

/// Evaluation of every configured checkpoint; writes `nmse_table.txt`,
/// `eval.json` and ECDF files to `out`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<ModelEval>> {
    let mut ckpts = cfg.checkpoints();
    if ckpts.is_empty() {
        ckpts.push(out.join("best.ckpt"));
    }
    let (_, val) = load_samples(cfg)?;
    if val.is_empty() {
        return Err(Error::Config("no validation samples in the configured data".into()));
    }
    let with_occlusion = cfg.occluded_list()?.is_some();
    let decode = cfg.eval_decode()?;
    let mut models: Vec<ModelEval> = Vec::new();
    for path in &ckpts {
        let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
        trainer.config.decode = decode;
        let mut name = trainer.config.loss.name().to_string();
        let dup = models.iter().filter(|m| m.name == name || m.name.starts_with(&format!("{name}#"))).count();
        if dup > 0 {
            name = format!("{name}#{}", dup + 1);
        }
        models.push(evaluate(&name, &predict_samples(&trainer, &val)?, with_occlusion)?);
    }
    write_eval(out, &models, cfg.svg()?)?;
    Ok(models)
}

fn write(path: PathBuf, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, body).map_err(|e| Error::io(path, e))
}

/// Writes the tables, a JSON summary and the ECDF files of `models`.
pub fn write_eval(out: &Path, models: &[ModelEval], svg: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(out.join("nmse_table.txt"), format_tables(models))?;
    let summary: Vec<serde_json::Value> = models
        .iter()
        .map(|m| {
            let rows: Vec<serde_json::Value> = m
                .rows
                .iter()
                .map(|(r, all, eye)| {
                    serde_json::json!({
                        "row": r,
                        "nmse": if all.detected > 0 { Some(all.mean) } else { None },
                        "eye_anchor_nmse": if eye.detected > 0 { Some(eye.mean) } else { None },
                        "detected": all.detected,
                        "total": all.total,
                        "detection_rate": all.detection_rate(),
                    })
                })
                .collect();
            serde_json::json!({ "model": m.name, "rows": rows })
        })
        .collect();
    write(out.join("eval.json"), serde_json::to_string_pretty(&summary).expect("eval json"))?;
    for m in models {
        for (name, body) in report::ecdf_files(m, svg)? {
            write(out.join(name), body)?;
        }
        write(out.join(format!("nmse_{}.csv", report::slug(&m.name))), m.total().to_csv())?;
    }
    Ok(())
}

pub fn cmd_gradcheck(scopes: &[String], instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let scopes = scopes
        .iter()
        .map(|s| Scope::parse(s.trim()).ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck scope `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    checks::run(&scopes, instances, seed)
}

/// Writes `count` synthetic faces under `out` and returns their manifest.
pub fn cmd_synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(count);
    for f in synth_faces(count, size, seed)? {
        let image = out.join(format!("{}.ppm", f.meta.id));
        let pts = out.join(format!("{}.pts", f.meta.id));
        f.source().save_ppm(&image)?;
        write(pts.clone(), write_pts(&f.landmarks))?;
        entries.push(ManifestEntry { image, pts, dataset: f.meta.dataset.clone(), split: f.meta.split });
    }
    let m = Manifest { entries };
    m.write(&out.join("manifest.csv"))?;
    Ok(m)
}

fn run(cli: &Cli) -> Result<bool> {
    let mut cfg = resolve_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.verb {
        Verb::Train => {
            if let Some(s) = cli.seed {
                cfg.set("train.seed", &s.to_string())?;
            }
            let r = cmd_train(&cfg, &out)?;
            println!(
                "steps {}  best step {}  best val loss {}  best val nmse {}  stop {:?}",
                r.steps_run,
                r.best_step.map_or("-".into(), |v| v.to_string()),
                r.best_val_loss.map_or("-".into(), |v| format!("{v:.6}")),
                r.best_val_nmse.map_or("-".into(), |v| format!("{v:.5}")),
                r.stop_reason
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Verb::Eval => {
            let models = cmd_eval(&cfg, &out)?;
            print!("{}", format_tables(&models));
            Ok(true)
        }
        Verb::Gradcheck { scope, instances } => {
            let results = cmd_gradcheck(scope, *instances, cli.seed.unwrap_or(0))?;
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed()).collect();
            for r in &failed {
                eprintln!("FAILED {} {}: max relative error {:.3e}", r.scope.name(), r.component, r.max_rel_error);
            }
            Ok(failed.is_empty())
        }
        Verb::Synth { count, size } => {
            if let Some(s) = cli.seed {
                cfg.set("data.synth_seed", &s.to_string())?;
            }
            let (default_count, default_size, seed) = match cfg.get("data.synth_count").parse().ok().zip(cfg.get("data.synth_size").parse().ok()) {
                Some((c, s)) => (c, s, cfg.get("data.synth_seed").parse().map_err(|_| Error::Config("data.synth_seed: not an integer".into()))?),
                None => return Err(Error::Config("data.synth_count and data.synth_size must be integers".into())),
            };
            let m = cmd_synth(count.unwrap_or(default_count), size.unwrap_or(default_size), seed, &out)?;
            println!("wrote {} faces to {}", m.entries.len(), out.display());
            Ok(true)
        }
    }
}

fn command() -> clap::Command {
    Cli::command().after_help(keys_help())
}

/// Full `--help` text.
pub fn help_text() -> String {
    command().render_help().to_string()
}

/// Parses `args` (program name first) and runs the verb; returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
