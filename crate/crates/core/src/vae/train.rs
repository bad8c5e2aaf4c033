//! Mini-batch Adam training with early stopping on validation loss.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    batch_matrix, draw_noise, loss_and_grad, LossParts, VaeArchitecture, VaeModel, VaeParameters,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::facies::FaciesRealization;
use crate::rng::stream_rng;

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how many workers evaluate them.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Multiplier on the KL term of the total loss.
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.3,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config("kl_weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }

    fn update_params(&mut self, params: &mut VaeParameters, grads: &VaeParameters) {
        let mut flat = params.flat();
        self.update(&mut flat, &grads.flat());
        let mut it = flat.into_iter();
        for l in params.layers_mut() {
            for w in l.w.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.b.iter_mut() {
                *b = it.next().unwrap();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_total: f64,
    pub val_total: f64,
    pub val_reconstruction: f64,
    pub val_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_total,val_total,val_reconstruction,val_kl\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_total, e.val_total, e.val_reconstruction, e.val_kl
            ));
        }
        out
    }
}

/// Loss over a sample set, with gradients summed chunk by chunk when asked.
fn evaluate(
    arch: &VaeArchitecture,
    params: &VaeParameters,
    samples: &[&FaciesRealization],
    noise: &DMatrix<f64>,
    kl_weight: f64,
    want_grad: bool,
    exec: Execution,
) -> Result<(LossParts, Option<VaeParameters>)> {
    let n = samples.len();
    let chunks = n.div_ceil(GRAD_CHUNK);
    let parts = exec.try_map(chunks, |c| {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(n);
        let batch = batch_matrix(&samples[lo..hi]);
        let nz = noise.columns(lo, hi - lo).into_owned();
        let (l, g) = loss_and_grad(arch, params, &batch, &nz, kl_weight, want_grad)?;
        Ok((hi - lo, l, g))
    })?;
    let mut total = LossParts {
        total: 0.0,
        reconstruction: 0.0,
        kl: 0.0,
    };
    let mut grad: Option<VaeParameters> = None;
    for (count, l, g) in parts {
        // Chunk losses and gradients are chunk means; reweight to the full set.
        let w = count as f64 / n as f64;
        total.total += w * l.total;
        total.reconstruction += w * l.reconstruction;
        total.kl += w * l.kl;
        if let Some(mut g) = g {
            for layer in g.layers_mut() {
                layer.w *= w;
                layer.b *= w;
            }
            match grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad = Some(g),
            }
        }
    }
    Ok((total, grad))
}

/// Train a VAE on `training`, holding out `validation_fraction` of it.
/// Returns the parameters with the best validation total loss.
pub fn vae_train(
    arch: &VaeArchitecture,
    cfg: &VaeTrainConfig,
    training: &[FaciesRealization],
    exec: Execution,
) -> Result<(VaeModel, TrainLog)> {
    arch.validate()?;
    cfg.validate()?;
    let grid = *training
        .first()
        .ok_or_else(|| Error::config("VAE training set is empty"))?
        .grid();
    if training.iter().any(|x| !x.grid().same_shape(&grid)) || grid.len() != arch.cells {
        return Err(Error::Dimension {
            what: "training grid vs architecture cells",
            expected: arch.cells,
            got: grid.len(),
        });
    }

    let mut order: Vec<usize> = (0..training.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, "vae-split", 0));
    let (train_idx, val_idx) = if training.len() == 1 {
        (order.clone(), order)
    } else {
        let n_val = ((training.len() as f64 * cfg.validation_fraction).round() as usize)
            .clamp(1, training.len() - 1);
        let (v, t) = order.split_at(n_val);
        (t.to_vec(), v.to_vec())
    };
    let val: Vec<&FaciesRealization> = val_idx.iter().map(|&i| &training[i]).collect();
    let val_noise = draw_noise(arch.latent_dim, val.len(), &mut stream_rng(cfg.seed, "vae-val", 0));

    let mut params = VaeParameters::init(arch, &mut stream_rng(cfg.seed, "vae-init", 0))?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut perm = train_idx.clone();
        perm.shuffle(&mut stream_rng(cfg.seed, "vae-shuffle", epoch as u64));
        let mut train_sum = 0.0;
        for (b, chunk) in perm.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&FaciesRealization> = chunk.iter().map(|&i| &training[i]).collect();
            let mut rng = stream_rng(cfg.seed, "vae-noise", ((epoch as u64) << 32) | b as u64);
            let noise = draw_noise(arch.latent_dim, samples.len(), &mut rng);
            let (loss, grad) =
                evaluate(arch, &params, &samples, &noise, cfg.kl_weight, true, exec)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("non-finite training loss {:?} in batch {b}", loss),
                });
            }
            train_sum += loss.total * samples.len() as f64;
            adam.update_params(&mut params, &grad.unwrap());
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: "non-finite parameters after update".into(),
            });
        }
        let (vl, _) = evaluate(arch, &params, &val, &val_noise, cfg.kl_weight, false, exec)?;
        if !vl.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: format!("non-finite validation loss {vl:?}"),
            });
        }
        epochs.push(EpochLog {
            epoch,
            train_total: train_sum / train_idx.len() as f64,
            val_total: vl.total,
            val_reconstruction: vl.reconstruction,
            val_kl: vl.kl,
        });
        if vl.total < best.0 {
            best = (vl.total, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let model = VaeModel::new(grid, arch.clone(), best.1)?;
    Ok((
        model,
        TrainLog {
            epochs,
            best_epoch: best.2,
            stopped_early,
        },
    ))
}
