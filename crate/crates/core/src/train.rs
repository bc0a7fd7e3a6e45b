//! Mini-batch training of the unrolled networks with Adam.
//!
//! Each epoch visits the training set in a seeded random order. Per-sequence
//! losses and gradients are computed independently (in parallel under
//! [`Exec::Parallel`]), then reduced in batch order and averaged, so results
//! do not depend on the executor.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::baseline::InitSpec;
use crate::error::{Error, Result};
use crate::eval::average_mse;
use crate::exec::Exec;
use crate::loss::{self, LossConfig};
use crate::model::MixtureInstance;
use crate::unrolled::UnrolledNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Shuffle seed.
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Rescale the averaged gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Evaluate test MSE after every epoch (otherwise only at the end).
    pub eval_every_epoch: bool,
    /// Write a checkpoint every this many epochs when an output directory is set.
    pub checkpoint_every: Option<usize>,
    pub init: InitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 40,
            learning_rate: 1e-4,
            loss: LossConfig::Mse,
            adam: AdamConfig::default(),
            seed: 0,
            train_size: 1000,
            test_size: 100,
            clip_norm: None,
            eval_every_epoch: true,
            checkpoint_every: None,
            init: InitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam constants {a:?}")));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{n} params, {} grads, {} moments", grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powf(state.step as f64);
    let c2 = 1.0 - cfg.beta2.powf(state.step as f64);
    for i in 0..n {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Loss of one sequence and, if requested, its gradient in flattening order.
pub fn sequence_loss<N: UnrolledNet>(
    net: &N,
    inst: &MixtureInstance,
    loss: &LossConfig,
    init: &InitSpec,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let out = net.forward(&mut tape, &bound, &inst.observations, init)?;
    let root = match loss {
        LossConfig::Mse => loss::mse_loss(&mut tape, &out.y, &inst.sources)?,
        LossConfig::RegularizedMse { lambda_reg } => {
            let per_layer: Vec<_> = (0..out.y.len()).map(|k| bound.scalars[k.min(bound.scalars.len() - 1)]).collect();
            loss::regularized_loss(&mut tape, &out.y, &inst.sources, &per_layer, *lambda_reg)?
        }
        LossConfig::Sure { divergence } => {
            check_loss::<N>(loss)?;
            let ctx = loss::sure_context(&inst.mixing, inst.noise_var)?;
            loss::sure_loss(&mut tape, &out.y, &inst.observations, &out.w_used, &ctx, *divergence)?
        }
    };
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::Numerical {
            step: inst.len,
            what: format!("non-finite {} loss", loss.name()),
        });
    }
    let grad = if with_grad {
        let grads = tape.backward(root)?;
        Some(bound.gradient(&tape, &grads))
    } else {
        None
    };
    Ok((value, grad))
}

fn check_loss<N: UnrolledNet>(loss: &LossConfig) -> Result<()> {
    if matches!(loss, LossConfig::Sure { .. }) && !N::SUPPORTS_SURE {
        return Err(Error::Unsupported(format!("SURE loss with {}", N::NAME)));
    }
    Ok(())
}

/// Mean raw MSE `(1/T) Σ‖s - y‖²` over a set of instances.
pub fn test_mse<N: UnrolledNet>(net: &N, data: &[MixtureInstance], init: &InitSpec, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let scores = exec.map(data, |_, inst| average_mse(&net.predict(&inst.observations, init)?, &inst.sources));
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Test MSE before any update.
    pub initial_test_mse: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("epoch,train_loss,test_mse\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        if let Some(t) = self.initial_test_mse {
            text.push_str(&format!("0,,{}\n", fmt(Some(t))));
        }
        for r in &self.epochs {
            text.push_str(&format!("{},{:.16e},{}\n", r.epoch, r.train_loss, fmt(r.test_mse)));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn final_test_mse(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|r| r.test_mse).or(self.initial_test_mse)
    }
}

/// Trains `net` without checkpoints. See [`train_with`].
pub fn train<N: UnrolledNet>(
    net: &N,
    train_set: &[MixtureInstance],
    test_set: &[MixtureInstance],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(N, History)> {
    train_with(net, train_set, test_set, cfg, exec, |_, _| Ok(()))
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch Adam on the batch-mean
/// loss. `on_epoch(epoch, net)` runs after every epoch (1-based).
pub fn train_with<N, F>(
    net: &N,
    train_set: &[MixtureInstance],
    test_set: &[MixtureInstance],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: F,
) -> Result<(N, History)>
where
    N: UnrolledNet,
    F: FnMut(usize, &N) -> Result<()>,
{
    cfg.validate()?;
    net.validate()?;
    check_loss::<N>(&cfg.loss)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut net = net.clone();
    let mut params = net.flatten();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        initial_test_mse: if test_set.is_empty() {
            None
        } else {
            Some(test_mse(&net, test_set, &cfg.init, exec)?)
        },
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = |e: Error| Error::Training {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let results = exec.map(batch, |_, &i| sequence_loss(&net, &train_set[i], &cfg.loss, &cfg.init, true));
            let mut grad = vec![0.0; params.len()];
            for r in results {
                let (value, g) = r.map_err(wrap)?;
                loss_sum += value;
                for (acc, gi) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if let Some(c) = cfg.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(wrap(Error::Numerical {
                    step: 0,
                    what: "non-finite gradient".into(),
                }));
            }
            adam_step(&mut params, &grad, &mut adam, cfg.learning_rate, &cfg.adam)?;
            net.set_flat(&params)?;
        }
        let test = if !test_set.is_empty() && (cfg.eval_every_epoch || epoch == cfg.epochs) {
            Some(test_mse(&net, test_set, &cfg.init, exec).map_err(|e| Error::Training {
                epoch,
                batch: 0,
                source: Box::new(e),
            })?)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            test_mse: test,
        });
        on_epoch(epoch, &net)?;
    }
    Ok((net, history))
}
