//! The alternating training loop: a cross-set phase (identity updates for
//! both networks, then the cycle shape update) followed by same-set
//! reconstruction updates.

mod config;

pub use config::TrainConfig;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, generate_sets, sample_companion, sample_pair, FusionSample, IdentitySet};
use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::losses::{cycle_losses, identity_loss_d, identity_loss_g, shape_loss_s1};
use crate::nets::{init_params, Checkpoint, Discriminator, Fuse, Generator};

/// Loss values from one cross-set phase, each taken just before its update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Losses {
    pub identity_g: f64,
    pub identity_d: f64,
    pub s2a: Option<f64>,
    pub s2b: Option<f64>,
}

/// One history line. Disabled terms are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub identity_d: f64,
    pub identity_g: f64,
    pub s1: Option<f64>,
    pub s2a: Option<f64>,
    pub s2b: Option<f64>,
    pub metrics: Option<Metrics>,
    pub elapsed_s: f64,
}

impl StepRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        StepRecord {
            elapsed_s: 0.0,
            ..self.clone()
        } == StepRecord {
            elapsed_s: 0.0,
            ..other.clone()
        }
    }
}

fn finite(v: f64, term: &'static str, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

/// Cross-set phase: generator identity update, discriminator identity update,
/// then the weighted cycle update of the generator. The discriminator sees the
/// generator output from before the first update.
pub fn train_step_phase1(
    g: &mut Generator,
    d: &mut Discriminator,
    sample: &FusionSample,
    x_hat: &Tensor,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<Phase1Losses> {
    if sample.same_identity() {
        return Err(Error::Contract("cross-set phase needs a cross-identity pair".into()));
    }

    let (identity_g, fake) = {
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let bd = d.bind(&mut tape, false);
        let x = tape.constant(sample.x.clone());
        let y = tape.constant(sample.y.clone());
        let out = bg.fuse(&mut tape, x, y)?;
        let loss = identity_loss_g(&mut tape, &bd, x, out, cfg.objective())?;
        let value = finite(tape.value(loss).item(), "identity_g", iteration)?;
        let fake = tape.value(out).clone();
        let vars = bg.vars().to_vec();
        tape.backward(loss)?;
        g.params_mut().adam_step(&mut tape, &vars, &cfg.adam_g())?;
        (value, fake)
    };

    let identity_d = {
        let mut tape = Tape::new();
        let bd = d.bind(&mut tape, true);
        let x = tape.constant(sample.x.clone());
        let xh = tape.constant(x_hat.clone());
        let f = tape.constant(fake);
        let loss = identity_loss_d(&mut tape, &bd, x, xh, f)?;
        let value = finite(tape.value(loss).item(), "identity_d", iteration)?;
        let vars = bd.vars().to_vec();
        tape.backward(loss)?;
        d.params_mut().adam_step(&mut tape, &vars, &cfg.adam_d())?;
        value
    };

    let (mut s2a, mut s2b) = (None, None);
    if cfg.use_s2a || cfg.use_s2b {
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let x = tape.constant(sample.x.clone());
        let y = tape.constant(sample.y.clone());
        let (a, b) = cycle_losses(&mut tape, &bg, x, y, cfg.stop_inner, (cfg.use_s2a, cfg.use_s2b))?;
        if let Some(a) = a {
            s2a = Some(finite(tape.value(a).item(), "s2a", iteration)?);
        }
        if let Some(b) = b {
            s2b = Some(finite(tape.value(b).item(), "s2b", iteration)?);
        }
        let weight = cfg.beta * cfg.alpha;
        if weight > 0.0 {
            let total = match (a, b) {
                (Some(a), Some(b)) => tape.add(a, b)?,
                (Some(t), None) | (None, Some(t)) => t,
                (None, None) => unreachable!("at least one cycle term is enabled"),
            };
            let total = tape.scale(total, weight)?;
            let vars = bg.vars().to_vec();
            tape.backward(total)?;
            g.params_mut().adam_step(&mut tape, &vars, &cfg.adam_g())?;
        }
    }

    Ok(Phase1Losses {
        identity_g,
        identity_d,
        s2a,
        s2b,
    })
}

/// Same-set phase: one generator update on `beta * L_S1`. Returns `None` when
/// the term is disabled.
pub fn train_step_phase2(g: &mut Generator, sample: &FusionSample, cfg: &TrainConfig, iteration: u64) -> Result<Option<f64>> {
    if !sample.same_identity() {
        return Err(Error::Contract("same-set phase needs a same-identity pair".into()));
    }
    if !cfg.use_s1 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let bg = g.bind(&mut tape, true);
    let x = tape.constant(sample.x.clone());
    let y = tape.constant(sample.y.clone());
    let loss = shape_loss_s1(&mut tape, &bg, x, y)?;
    let value = finite(tape.value(loss).item(), "s1", iteration)?;
    if cfg.beta > 0.0 {
        let scaled = tape.scale(loss, cfg.beta)?;
        let vars = bg.vars().to_vec();
        tape.backward(scaled)?;
        g.params_mut().adam_step(&mut tape, &vars, &cfg.adam_g())?;
    }
    Ok(Some(value))
}

/// Training state: both networks, the data, and the last finished iteration.
pub struct Trainer {
    cfg: TrainConfig,
    g: Generator,
    d: Discriminator,
    sets: Vec<IdentitySet>,
    eval: Vec<FusionSample>,
    iteration: u64,
}

impl Trainer {
    /// Fresh networks initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig, sets: Vec<IdentitySet>) -> Result<Self> {
        cfg.validate()?;
        check_sets(&sets, cfg.res)?;
        let (g, d) = init_params(cfg.seed, cfg.net())?;
        Ok(Self {
            cfg,
            g,
            d,
            sets,
            eval: Vec::new(),
            iteration: 0,
        })
    }

    /// Continues from a checkpoint; the stored config is used unless `cfg`
    /// overrides it (only the iteration budget and logging may differ).
    pub fn resume(ck: Checkpoint, sets: Vec<IdentitySet>, cfg: Option<TrainConfig>) -> Result<Self> {
        let stored: TrainConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Load(format!("stored config: {e}")))?;
        let cfg = match cfg {
            Some(c) => {
                let comparable = |t: &TrainConfig| TrainConfig {
                    iters: 0,
                    log_every: 1,
                    checkpoint_every: 0,
                    eval_every: 0,
                    eval_samples: 0,
                    ..t.clone()
                };
                if comparable(&c) != comparable(&stored) {
                    return Err(Error::Config("resume config differs from the checkpoint's".into()));
                }
                c
            }
            None => stored,
        };
        cfg.validate()?;
        check_sets(&sets, cfg.res)?;
        if ck.net != cfg.net() {
            return Err(Error::Load("checkpoint architecture differs from config".into()));
        }
        Ok(Self {
            cfg,
            g: ck.generator,
            d: ck.discriminator,
            sets,
            eval: Vec::new(),
            iteration: ck.iteration,
        })
    }

    /// Samples scored whenever `eval_every` divides the iteration.
    pub fn set_eval_samples(&mut self, samples: Vec<FusionSample>) {
        self.eval = samples;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.g
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.d
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            net: self.cfg.net(),
            config: serde_json::to_value(&self.cfg).expect("config serialises"),
            generator: self.g.clone(),
            discriminator: self.d.clone(),
        }
    }

    /// Runs iteration `self.iteration + 1`. All randomness comes from
    /// `(seed, iteration)`, so resuming needs no stored RNG state.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let it = self.iteration + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 0x7a1, it]));
        let cross = sample_pair(&self.sets, false, &mut rng)?;
        let x_hat = sample_companion(&self.sets, cross.x_set, cross.x_index, &mut rng);
        let p1 = train_step_phase1(&mut self.g, &mut self.d, &cross, &x_hat, &self.cfg, it)?;
        let mut s1 = None;
        for _ in 0..self.cfg.phase2_steps {
            let same = sample_pair(&self.sets, true, &mut rng)?;
            s1 = train_step_phase2(&mut self.g, &same, &self.cfg, it)?;
        }
        self.iteration = it;
        let metrics = if self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0 && !self.eval.is_empty() {
            Some(evaluate(&self.g, &self.eval, it)?)
        } else {
            None
        };
        Ok(StepRecord {
            iteration: it,
            identity_d: p1.identity_d,
            identity_g: p1.identity_g,
            s1,
            s2a: p1.s2a,
            s2b: p1.s2b,
            metrics,
            elapsed_s: start.elapsed().as_secs_f64(),
        })
    }

    fn should_log(&self, it: u64) -> bool {
        it % self.cfg.log_every == 0 || it == self.cfg.iters
    }

    /// Trains up to `cfg.iters`. With `out`, appends logged records to
    /// `out/history.jsonl` and writes checkpoints, returning their paths.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunOutput> {
        let mut history = Vec::new();
        let mut checkpoints = Vec::new();
        let mut log = match out {
            Some(dir) => Some(HistoryLog::open(dir, self.iteration)?),
            None => None,
        };
        while self.iteration < self.cfg.iters {
            let record = self.step()?;
            let it = record.iteration;
            if self.should_log(it) || record.metrics.is_some() {
                log::info!(
                    "iter {it}: L_I(D) {:.4} L_I(G) {:.4} S1 {:?} S2a {:?} S2b {:?}",
                    record.identity_d,
                    record.identity_g,
                    record.s1,
                    record.s2a,
                    record.s2b
                );
                if let Some(l) = log.as_mut() {
                    l.append(&record)?;
                }
                history.push(record);
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && it % every == 0) || it == self.cfg.iters {
                    let path = checkpoint_path(dir, it);
                    self.checkpoint().save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        Ok(RunOutput { history, checkpoints })
    }
}

pub struct RunOutput {
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.ckpt"))
}

fn check_sets(sets: &[IdentitySet], res: usize) -> Result<()> {
    if sets.len() < 2 {
        return Err(Error::Config(format!("need at least 2 sets, got {}", sets.len())));
    }
    for s in sets {
        if s.len() < 2 {
            return Err(Error::Config(format!("set {} needs at least 2 images", s.label)));
        }
        if s.resolution() != Some(res) {
            return Err(Error::Config(format!(
                "set {} has resolution {:?}, config expects {res}",
                s.label,
                s.resolution()
            )));
        }
    }
    Ok(())
}

/// JSON-lines history writer. Opening at iteration `n` keeps only records up
/// to `n`, so a resumed run does not duplicate lines.
struct HistoryLog {
    file: fs::File,
    path: PathBuf,
}

impl HistoryLog {
    fn open(dir: &Path, keep_through: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("history.jsonl");
        let kept = if keep_through > 0 && path.exists() {
            read_history(&path)?
                .into_iter()
                .filter(|r| r.iteration <= keep_through)
                .collect()
        } else {
            Vec::new()
        };
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &kept {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serialises")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn append(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(r).expect("record serialises"))
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(path, e.to_string())))
        .collect()
}

/// Generates the synthetic sets described by `cfg` and trains on them.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<(Trainer, RunOutput)> {
    cfg.validate()?;
    let sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.clone(), sets)?;
    let run = trainer.run(out)?;
    Ok((trainer, run))
}

#[cfg(test)]
mod tests;
