//! Command-line front end. [`run`] parses arguments, executes one command and
//! maps the outcome to a process exit code.

mod args;

pub use args::{Baseline, Cli, Command, EvalArgs, FuseArgs, GenDataArgs, GradcheckArgs, TrainArgs};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_holdout, generate_sets, load_image_dirs, load_png, save_png, save_sets, IdentitySet};
use crate::engine::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use crate::engine::OpKind;
use crate::error::{Error, Result};
use crate::eval::{emit_report, eval_samples, grid_image, Infer};
use crate::nets::{Checkpoint, CopyFirst, CopySecond};
use crate::trainer::{TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit code for an error surfaced by a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Data { .. } | Error::Load(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Dimension { .. } | Error::Contract(_) | Error::Config(_) | Error::Spec(_) => EXIT_USAGE,
    }
}

/// What a command produced; written to `<out>/manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            dataset_hash: None,
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            artifacts: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    fn write(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        for p in self.checkpoints.iter().chain(&self.metrics).chain(&self.artifacts) {
            if !p.exists() {
                return Err(Error::data(p, "listed artifact is missing"));
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// SHA-256 over every file under `root`, visited in sorted path order, mixing
/// in each relative path before its bytes.
pub fn content_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.sets < 2 {
        return Err(Error::Config(format!("--sets must be >= 2 (got {})", a.sets)));
    }
    let sets = if a.holdout {
        generate_holdout(a.sets, a.per_set, a.res, a.seed)?
    } else {
        generate_sets(a.sets, a.per_set, a.res, a.seed)?
    };
    create_dir(&a.out)?;
    save_sets(&sets, &a.out)?;
    let images: usize = sets.iter().map(IdentitySet::len).sum();
    println!(
        "wrote {} sets, {images} images at {}x{} to {}",
        sets.len(),
        a.res,
        a.res,
        a.out.display()
    );
    Ok(())
}

/// Defaults, then `--config`, then explicit flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(iters => iters, seed => seed, alpha => alpha, beta => beta, pool_k => pool_k, lr_g => lr_g,
         lr_d => lr_d, width => width, sets => n_sets, per_set => n_per_set, res => res,
         phase2_steps => phase2_steps, log_every => log_every, checkpoint_every => checkpoint_every,
         eval_every => eval_every, eval_samples => eval_samples);
    if a.min_patch {
        cfg.min_patch = true;
    }
    if a.no_min_patch {
        cfg.min_patch = false;
    }
    if a.no_s1 {
        cfg.use_s1 = false;
    }
    if a.no_s2a {
        cfg.use_s2a = false;
    }
    if a.no_s2b {
        cfg.use_s2b = false;
    }
    if a.literal_max {
        cfg.literal_max = true;
    }
    if a.stop_inner {
        cfg.stop_inner = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_train_config(a)?;
    create_dir(&a.out)?;
    let dataset_hash;
    let sets = match &a.data {
        Some(root) => {
            dataset_hash = Some(content_hash(root)?);
            let sets = load_image_dirs(root)?;
            // the dataset decides its own shape unless a flag says otherwise
            if a.res.is_none() {
                cfg.res = sets[0].resolution().unwrap_or(cfg.res);
            }
            cfg.n_sets = sets.len();
            cfg.n_per_set = sets.iter().map(IdentitySet::len).min().unwrap_or(0);
            cfg.validate()?;
            sets
        }
        None => {
            let sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, cfg.seed)?;
            let data_dir = a.out.join("data");
            create_dir(&data_dir)?;
            save_sets(&sets, &data_dir)?;
            dataset_hash = Some(content_hash(&data_dir)?);
            sets
        }
    };
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).expect("config serialises"));
    manifest.dataset_hash = dataset_hash;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, sets, Some(cfg.clone()))?,
        None => Trainer::new(cfg.clone(), sets)?,
    };
    if let Some(root) = &a.eval_data {
        let held = load_image_dirs(root)?;
        trainer.set_eval_samples(eval_samples(&held, cfg.eval_samples, cfg.seed)?);
    }
    let run = trainer.run(Some(&a.out))?;
    manifest.checkpoints = run.checkpoints;
    manifest.artifacts.push(a.out.join("history.jsonl"));
    let last = run.history.last();
    println!(
        "trained to iteration {}; last L_I(D) {:.4}, L_I(G) {:.4}",
        trainer.iteration(),
        last.map_or(f64::NAN, |r| r.identity_d),
        last.map_or(f64::NAN, |r| r.identity_g)
    );
    manifest.write(&a.out)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(dir, "no PNG images"));
    }
    Ok(files)
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let g = ck.generator;
    let res = ck.net.res;
    let load = |p: &Path| -> Result<crate::engine::Tensor> {
        let t = load_png(p)?;
        if t.shape()[1] != res || t.shape()[2] != res {
            return Err(Error::Config(format!(
                "{} is {}x{}, checkpoint expects {res}x{res}",
                p.display(),
                t.shape()[1],
                t.shape()[2]
            )));
        }
        Ok(t)
    };
    let (xs, ys) = match (&a.x, &a.y, &a.x_dir, &a.y_dir) {
        (Some(x), Some(y), None, None) => {
            let out = g.infer(&load(x)?, &load(y)?)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_png(&out, &a.out)?;
            println!("wrote {}", a.out.display());
            return Ok(());
        }
        (Some(x), None, None, Some(dir)) => (vec![x.clone()], png_files(dir)?),
        (None, Some(y), Some(dir), None) => (png_files(dir)?, vec![y.clone()]),
        _ => {
            return Err(Error::Config(
                "give --x and --y, --x with --y-dir, or --x-dir with --y".into(),
            ))
        }
    };
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(
        "fuse",
        serde_json::json!({"checkpoint": a.checkpoint, "x": xs, "y": ys}),
    );
    let mut rows = Vec::new();
    let n = xs.len().max(ys.len());
    for i in 0..n {
        let xp = &xs[i.min(xs.len() - 1)];
        let yp = &ys[i.min(ys.len() - 1)];
        let (x, y) = (load(xp)?, load(yp)?);
        let out = g.infer(&x, &y)?;
        let path = a.out.join(format!("fused_{i}.png"));
        save_png(&out, &path)?;
        manifest.artifacts.push(path);
        rows.push(vec![x, y, out]);
    }
    let grid = a.out.join("grid.png");
    save_png(&grid_image(&rows)?, &grid)?;
    manifest.artifacts.push(grid);
    println!("wrote {n} fused images and grid.png to {}", a.out.display());
    manifest.write(&a.out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.n_samples == 0 {
        return Err(Error::Config("--n-samples must be positive".into()));
    }
    let sets = load_image_dirs(&a.data)?;
    if sets.iter().any(|s| s.identity.is_none()) {
        return Err(Error::data(&a.data, "evaluation needs specs.json records in every set"));
    }
    let samples = eval_samples(&sets, a.n_samples, a.seed)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "baseline": a.baseline.map(|b| format!("{b:?}")),
            "n_samples": a.n_samples,
            "seed": a.seed,
        }),
    );
    manifest.dataset_hash = Some(content_hash(&a.data)?);
    let none: &[serde_json::Value] = &[];
    let metrics = match (a.baseline, &a.checkpoint) {
        (Some(Baseline::CopyX), _) => emit_report(none, &samples, &CopyFirst, &a.out, 0)?,
        (Some(Baseline::CopyY), _) => emit_report(none, &samples, &CopySecond, &a.out, 0)?,
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            manifest.checkpoints.push(path.clone());
            emit_report(none, &samples, &ck.generator, &a.out, ck.iteration)?
        }
        (None, None) => return Err(Error::Config("give --checkpoint or --baseline".into())),
    };
    manifest.metrics.push(a.out.join("metrics.json"));
    manifest.artifacts.push(a.out.join("grid.png"));
    println!(
        "oracle L1 {:.4} (copy-x {:.4}, copy-y {:.4}); OKS {:.3} (copy-x {:.3}); identity {:.3}",
        metrics.oracle_l1_gen,
        metrics.oracle_l1_copy_x,
        metrics.oracle_l1_copy_y,
        metrics.mean_oks,
        metrics.mean_oks_copy_x,
        metrics.identity_score
    );
    manifest.write(&a.out)
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::from_name(name).ok_or_else(|| {
        let known: Vec<_> = OpKind::ALL.iter().map(|o| o.name()).collect();
        Error::Config(format!("unknown op {name}; known ops: {}", known.join(", ")))
    })
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let only = a.op.as_deref().map(parse_op).transpose()?;
    let fault = a.inject_fault.as_deref().map(parse_op).transpose()?;
    let reports = run_suite(a.seed, only, fault)?;
    println!("{:<20} {:>9} {:>14}  result", "op", "instances", "max rel err");
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(DEFAULT_TOLERANCE);
        ok &= pass;
        println!(
            "{:<20} {:>9} {:>14.3e}  {}",
            r.op.name(),
            r.instances,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if !ok {
        for r in reports.iter().filter(|r| !r.passed(DEFAULT_TOLERANCE)) {
            eprintln!(
                "gradcheck failed: {} max relative error {:.3e} >= {:.0e}",
                r.op.name(),
                r.max_rel_error,
                DEFAULT_TOLERANCE
            );
        }
    }
    Ok(ok)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Fuse(a) => fuse(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
