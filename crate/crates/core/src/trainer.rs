//! Mini-batch training of the projector over a pair set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{
    backward, forward, gumbel_softmax_backward, gumbel_softmax_with_noise, sample_gumbel,
    save_checkpoint, ProjectorConfig, ProjectorParams,
};
use crate::rate::{batch_loss_grad, LossTerms, RateConfig, DEFAULT_EPSILON_SQ};
use crate::rng::{indexed_substream, restart_seed, substream, Substream};
use crate::store::{EmbeddingMatrix, PairSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// 2000 for 50- and 100-dimensional features, 4000 otherwise.
pub fn default_lambda(d_feat: usize) -> f64 {
    match d_feat {
        50 | 100 => 2000.0,
        _ => 4000.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_pairs: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub epsilon_sq: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub k: usize,
    pub d_feat: usize,
    /// Independent runs from different initializations; the one with the
    /// lowest final-epoch loss is kept.
    pub restarts: usize,
}

impl TrainConfig {
    /// Batch 256, 50 epochs, λ from [`default_lambda`], ε² = 0.5, τ = 1, lr = 1e-3,
    /// a single run.
    pub fn new(d_feat: usize, k: usize, seed: u64) -> Self {
        TrainConfig {
            batch_pairs: 256,
            epochs: 50,
            lambda: default_lambda(d_feat),
            epsilon_sq: DEFAULT_EPSILON_SQ,
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed,
            k,
            d_feat,
            restarts: 1,
        }
    }

    pub fn rate_config(&self) -> RateConfig {
        RateConfig {
            epsilon_sq: self.epsilon_sq,
            lambda: self.lambda,
            temperature: self.temperature,
            clusters: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 {
            return Err(Error::InvalidConfig("batch_pairs must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::InvalidConfig("d_feat must be at least 1".into()));
        }
        self.rate_config().validate()
    }
}

/// Shuffle pair indices for `epoch` and cut them into full batches of `b`.
pub fn make_batches(pairs: usize, b: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > pairs {
        return Err(Error::BatchTooLarge { batch: b, pairs });
    }
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut indexed_substream(seed, Substream::Batches, epoch as u64));
    Ok(order.chunks_exact(b).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ProjectorParams,
    pub v: ProjectorParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ProjectorParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ProjectorParams,
    grads: &ProjectorParams,
    state: &mut AdamState,
    learning_rate: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub rate: f64,
    pub cluster_rate_sum: f64,
    pub similarity: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Which restart these epochs belong to.
    pub restart: usize,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::INFINITY, |r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,R,sumRk,D,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.loss, r.rate, r.cluster_rate_sum, r.similarity, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Where to keep the last good parameters while training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Overwritten after every completed epoch.
    pub checkpoint: Option<PathBuf>,
}

pub fn train(
    embeddings: &EmbeddingMatrix,
    pairs: &PairSet,
    cfg: &TrainConfig,
) -> Result<(ProjectorParams, TrainHistory)> {
    train_with(embeddings, pairs, cfg, &TrainOptions::default())
}

struct StepOutcome {
    terms: LossTerms,
}

fn train_step(
    params: &mut ProjectorParams,
    state: &mut AdamState,
    z: &Array2<f64>,
    noise: &Array2<f64>,
    cfg: &TrainConfig,
    rate_cfg: &RateConfig,
) -> Result<StepOutcome> {
    let pass = forward(params, z.view())?;
    let pi = gumbel_softmax_with_noise(pass.logits.view(), noise.view(), cfg.temperature)?;
    let (terms, grad_features, grad_pi) = batch_loss_grad(pass.features.view(), pi.view(), rate_cfg)?;
    if !terms.loss.is_finite() {
        return Err(Error::NumericalFailure("non-finite loss".into()));
    }
    let grad_logits = gumbel_softmax_backward(pi.view(), grad_pi.view(), cfg.temperature);
    let grads = backward(params, z.view(), &pass, grad_features.view(), grad_logits.view())?;
    if grads.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite gradient".into()));
    }
    adam_step(params, &grads.params, state, cfg.learning_rate);
    Ok(StepOutcome { terms })
}

/// Train a fresh projector with `d_hidden = d_in`. Embeddings are only read.
pub fn train_with(
    embeddings: &EmbeddingMatrix,
    pairs: &PairSet,
    cfg: &TrainConfig,
    options: &TrainOptions,
) -> Result<(ProjectorParams, TrainHistory)> {
    cfg.validate()?;
    pairs.validate(embeddings.count())?;
    let mut best: Option<(ProjectorParams, TrainHistory)> = None;
    for r in 0..cfg.restarts {
        let run_cfg = TrainConfig {
            seed: restart_seed(cfg.seed, r as u64),
            ..*cfg
        };
        let (params, mut history) = train_once(embeddings, pairs, &run_cfg, options)?;
        history.restart = r;
        let better = match &best {
            None => true,
            Some((_, h)) => history.final_loss() < h.final_loss(),
        };
        if better {
            best = Some((params, history));
        }
    }
    let (params, history) = best.expect("at least one restart");
    if let Some(path) = &options.checkpoint {
        save_checkpoint(&params, path)?;
    }
    Ok((params, history))
}

fn train_once(
    embeddings: &EmbeddingMatrix,
    pairs: &PairSet,
    cfg: &TrainConfig,
    options: &TrainOptions,
) -> Result<(ProjectorParams, TrainHistory)> {
    let rate_cfg = cfg.rate_config();
    let proj_cfg = ProjectorConfig {
        d_in: embeddings.dim(),
        d_hidden: embeddings.dim(),
        d_feat: cfg.d_feat,
        k: cfg.k,
        seed: cfg.seed,
    };
    let mut params = ProjectorParams::init(&proj_cfg)?;
    let mut state = AdamState::new(&params);
    let mut gumbel_rng = substream(cfg.seed, Substream::Gumbel);
    let mut history = TrainHistory::default();
    let mut last_good: Option<&Path> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = make_batches(pairs.len(), cfg.batch_pairs, cfg.seed, epoch)?;
        let mut sums = [0.0f64; 4];
        for (step, batch) in batches.iter().enumerate() {
            let mut columns = Vec::with_capacity(2 * batch.len());
            columns.extend(batch.iter().map(|&i| pairs.pairs()[i].a));
            columns.extend(batch.iter().map(|&i| pairs.pairs()[i].b));
            let z = embeddings.gather_f64(&columns);
            let noise = sample_gumbel(cfg.k, columns.len(), &mut gumbel_rng);
            let outcome = train_step(&mut params, &mut state, &z, &noise, cfg, &rate_cfg)
                .map_err(|e| {
                    let at = match last_good {
                        Some(p) => format!("last good checkpoint: {}", p.display()),
                        None => "no checkpoint written yet".to_string(),
                    };
                    Error::NumericalFailure(format!("epoch {} step {step}: {e}; {at}", epoch + 1))
                })?;
            let t = outcome.terms;
            sums[0] += t.loss;
            sums[1] += t.rate;
            sums[2] += t.cluster_rate_sum;
            sums[3] += t.similarity;
        }
        let steps = batches.len() as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: sums[0] / steps,
            rate: sums[1] / steps,
            cluster_rate_sum: sums[2] / steps,
            similarity: sums[3] / steps,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(path) = &options.checkpoint {
            let mut snapshot = params.clone();
            snapshot.round_to_storage();
            save_checkpoint(&snapshot, path)?;
            last_good = Some(path.as_path());
        }
    }
    params.round_to_storage();
    Ok((params, history))
}
