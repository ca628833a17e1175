//! The two optimizers used by the training loops: SGD with momentum and
//! weight decay for model weights, Adam for architecture encodings and the
//! recurrent/fusion trainers. Also the shared epoch loop with
//! best-on-validation checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{batch_ranges, epoch_order};
use crate::error::{Error, Result};
use crate::tape::{backward, forward, Bindings, GradientMap, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        // SGD defaults for the convolutional weight updates
        SgdConfig {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state. Slots always mirror parameter shapes.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd {
        cfg: SgdConfig,
        params: Vec<ParamId>,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        cfg: AdamConfig,
        params: Vec<ParamId>,
        step_count: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
    },
}

impl OptimizerState {
    pub fn sgd(cfg: SgdConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let velocity = params
            .iter()
            .map(|&p| vec![0.0; store.tensor(p).numel()])
            .collect();
        OptimizerState::Sgd {
            cfg,
            params,
            velocity,
        }
    }

    pub fn adam(cfg: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|&p| vec![0.0; store.tensor(p).numel()])
            .collect();
        OptimizerState::Adam {
            cfg,
            params,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        match self {
            OptimizerState::Sgd { params, .. } | OptimizerState::Adam { params, .. } => params,
        }
    }

    /// Apply one update from the given gradients. Parameters the loss did
    /// not reach receive a zero gradient (weight decay and momentum still
    /// apply for SGD).
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) -> Result<()> {
        match self {
            OptimizerState::Sgd {
                cfg,
                params,
                velocity,
            } => {
                for (slot, &pid) in params.iter().enumerate() {
                    let grad = grads.get_f64(pid);
                    let tensor = store.tensor_mut(pid);
                    if grad.len() != tensor.numel() {
                        return Err(Error::ShapeMismatch {
                            context: format!("sgd_step param #{pid}"),
                            detail: format!(
                                "grad has {} elements, param has {}",
                                grad.len(),
                                tensor.numel()
                            ),
                        });
                    }
                    let v = &mut velocity[slot];
                    let (lr, mu, wd) = (cfg.lr as f64, cfg.momentum as f64, cfg.weight_decay as f64);
                    for ((p, vi), g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.iter())
                    {
                        *vi = mu * *vi + g + wd * (*p as f64);
                        *p = (*p as f64 - lr * *vi) as f32;
                    }
                }
            }
            OptimizerState::Adam {
                cfg,
                params,
                step_count,
                first_moment,
                second_moment,
            } => {
                *step_count = step_count
                    .checked_add(1)
                    .ok_or(Error::StepCountOverflow)?;
                let t = *step_count as i32;
                let (lr, b1, b2, eps) = (
                    cfg.lr as f64,
                    cfg.beta1 as f64,
                    cfg.beta2 as f64,
                    cfg.epsilon as f64,
                );
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                for (slot, &pid) in params.iter().enumerate() {
                    let grad = grads.get_f64(pid);
                    let tensor = store.tensor_mut(pid);
                    if grad.len() != tensor.numel() {
                        return Err(Error::ShapeMismatch {
                            context: format!("adam_step param #{pid}"),
                            detail: format!(
                                "grad has {} elements, param has {}",
                                grad.len(),
                                tensor.numel()
                            ),
                        });
                    }
                    let m = &mut first_moment[slot];
                    let v = &mut second_moment[slot];
                    for (((p, mi), vi), g) in tensor
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad.iter())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptimizerState::Sgd { .. } => 0,
            OptimizerState::Adam { step_count, .. } => *step_count,
        }
    }
}

// ── Shared epoch loop ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Lower is better: a loss, or a negated accuracy.
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<TrainEpoch>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

/// Mini-batch training with per-epoch validation and best-checkpoint
/// restore: after the final epoch the store holds the parameters of the
/// epoch with the lowest `val_metric`. Shuffling is seeded, so the loop is
/// deterministic end to end.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    tape: &Tape,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    epochs: usize,
    n_train: usize,
    batch_size: usize,
    seed: u64,
    mut train_bindings: impl FnMut(&[usize]) -> Result<Bindings>,
    mut val_metric: impl FnMut(&Tape, &ParamStore) -> Result<f64>,
) -> Result<TrainHistory> {
    if n_train == 0 {
        return Err(Error::InvalidData("train split is empty".into()));
    }
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(epochs),
        best_epoch: 0,
        best_val_metric: f64::INFINITY,
    };
    let mut best_snapshot = store.snapshot();
    for epoch in 0..epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let order = epoch_order(n_train, &mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for range in batch_ranges(n_train, batch_size) {
            let idx: Vec<usize> = order[range].to_vec();
            let bindings = train_bindings(&idx)?;
            let pass = forward(tape, store, &bindings)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
            let loss = pass.scalar("loss")?;
            let grads = backward(pass, store, "loss")?;
            opt.step(store, &grads)?;
            loss_sum += loss;
            steps += 1;
        }
        let metric = val_metric(tape, store)?;
        if metric < history.best_val_metric {
            history.best_val_metric = metric;
            history.best_epoch = epoch;
            best_snapshot = store.snapshot();
        }
        history.epochs.push(TrainEpoch {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_metric: metric,
        });
    }
    if epochs > 0 {
        store.restore(&best_snapshot);
    }
    Ok(history)
}
