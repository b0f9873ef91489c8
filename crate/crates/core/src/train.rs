//! Training loop, checkpoints and dataset-level evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgq_tensor::{clip_grad_norm, Adam, AdamConfig, ParamStore, Scalar, Tape};

use crate::config::{Config, TrainConfig};
use crate::error::{invalid, Result, SgqError};
use crate::eval::{evaluate_ap, ApReport, EvalConfig, PredScene};
use crate::geom::Scene;
use crate::loss::LossBreakdown;
use crate::model::{Model, Sample};
use crate::synth::SynthParams;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub sample: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl LogEntry {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "iter {:>5} scene {:>3} lr {:.2e} total {:.5} cls {:.5} p2p {:.5} dir {:.5} o2m {:.5} bev {:.5} pv {:.5} |g| {:.3}",
            self.iteration, self.sample, self.lr, l.total, l.cls, l.p2p, l.dir, l.one2many, l.bev, l.pv, self.grad_norm
        )
    }
}

/// Cosine decay from `lr` to `lr / 100` over `total` iterations.
pub fn learning_rate(cfg: &TrainConfig, iteration: usize) -> f64 {
    if cfg.iterations <= 1 {
        return cfg.lr;
    }
    let t = iteration as f64 / (cfg.iterations - 1) as f64;
    let floor = cfg.lr * 0.01;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn config_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".config");
    PathBuf::from(p)
}

/// Writes parameters to `path` and the configuration beside it as
/// `<path>.config`.
pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, cfg: &Config, store: &ParamStore<S>) -> Result<()> {
    let path = path.as_ref();
    store.save(path)?;
    fs::write(config_path(path), cfg.to_text())?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Config, ParamStore<S>)> {
    let path = path.as_ref();
    let cfg = Config::load(config_path(path))?;
    let store = ParamStore::<S>::load(path)?;
    Ok((cfg, store))
}

/// Where and how often to write checkpoints during training.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPlan {
    pub path: Option<PathBuf>,
    pub config: Option<Config>,
}

pub struct TrainOutcome<S> {
    pub store: ParamStore<S>,
    pub log: Vec<LogEntry>,
}

/// Optimises `store` on `samples`, visiting them in a seeded shuffle each
/// pass. A non-finite loss or gradient aborts with the last good parameters
/// written to the checkpoint path.
pub fn train<S: Scalar>(
    model: &Model,
    mut store: ParamStore<S>,
    samples: &[Sample<S>],
    cfg: &TrainConfig,
    seed: u64,
    plan: &CheckpointPlan,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<S>> {
    if samples.is_empty() && cfg.iterations > 0 {
        return Err(invalid("training needs at least one scene"));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let save = |store: &ParamStore<S>| -> Result<()> {
        match (&plan.path, &plan.config) {
            (Some(path), Some(c)) => save_checkpoint(path, c, store),
            (Some(path), None) => save_checkpoint(path, &model.config, store),
            _ => Ok(()),
        }
    };
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = match model.loss(&mut tape, &p, &samples[idx]) {
            Ok(o) => o,
            Err(e) => {
                save(&store)?;
                return Err(abort(it, e));
            }
        };
        let mut grads = tape.backward(out.total)?;
        let mut g = p.collect(&store, &mut grads);
        let grad_norm = clip_grad_norm(&mut g, cfg.grad_clip);
        if !grad_norm.is_finite() {
            save(&store)?;
            return Err(abort(it, SgqError::NonFinite("gradient norm".into())));
        }
        let lr = learning_rate(cfg, it);
        adam.config.lr = lr;
        adam.step(&mut store, &g)?;
        let entry = LogEntry {
            iteration: it,
            sample: idx,
            lr,
            loss: out.breakdown,
            grad_norm,
        };
        on_log(&entry);
        log.push(entry);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            save(&store)?;
        }
    }
    save(&store)?;
    Ok(TrainOutcome { store, log })
}

fn abort(iteration: usize, cause: SgqError) -> SgqError {
    SgqError::NonFinite(format!("training stopped at iteration {iteration}: {cause}; last good parameters kept"))
}

/// Renders every scene into a training sample.
pub fn prepare_samples<S: Scalar>(scenes: &[Scene], cfg: &Config, seed: u64) -> Result<Vec<Sample<S>>> {
    let params = SynthParams::from_config(cfg, seed);
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample::synthesize(&params, s, i as u64, cfg))
        .collect()
}

pub fn predict_all<S: Scalar>(model: &Model, store: &ParamStore<S>, samples: &[Sample<S>]) -> Result<Vec<PredScene>> {
    samples.iter().map(|s| model.predict(store, s)).collect()
}

/// mAP over both threshold sets.
pub fn evaluate_model<S: Scalar>(model: &Model, store: &ParamStore<S>, samples: &[Sample<S>]) -> Result<(ApReport, ApReport)> {
    let preds = predict_all(model, store, samples)?;
    let scenes: Vec<Scene> = samples.iter().map(|s| s.scene.clone()).collect();
    Ok((evaluate_ap(&preds, &scenes, &EvalConfig::map1())?, evaluate_ap(&preds, &scenes, &EvalConfig::map2())?))
}
