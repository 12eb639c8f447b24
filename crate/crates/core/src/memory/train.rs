//! Joint training of the memory module: the recall loss (MSE between the
//! sample and its completion from the noisy latent) supervises the
//! completion net, recall + lambda * entropy supervises the separation
//! net, and the entropy loss alone supervises the entropy model, each
//! with its own Adam optimizer.

use super::nets::{
    completion_forward, separation_forward, PatternCompletionNet, PatternSeparationNet,
};
use crate::codec::{noise_like, EntropyModel};
use crate::data::DatasetHandle;
use crate::rng::{substream, Stream};
use crate::tensor::{OptimizerConfig, ParamStore, Tape};
use crate::{Error, Result};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MemoryTrainConfig {
    /// Separation-net channels; the completion net mirrors them with a
    /// 3-channel output.
    pub channels: [usize; 4],
    pub support_r: i32,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr_nets: f64,
    pub lr_entropy: f64,
}

impl Default for MemoryTrainConfig {
    fn default() -> Self {
        MemoryTrainConfig {
            channels: [128, 128, 128, 192],
            support_r: 32,
            lambda: 1e-2,
            epochs: 40,
            batch: 64,
            lr_nets: 1e-4,
            lr_entropy: 1e-3,
        }
    }
}

impl MemoryTrainConfig {
    /// Full-scale settings (100 epochs).
    pub fn paper() -> Self {
        MemoryTrainConfig {
            epochs: 100,
            ..Default::default()
        }
    }

    pub fn completion_channels(&self) -> [usize; 4] {
        [self.channels[0], self.channels[1], self.channels[2], 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.batch == 0 {
            return Err(Error::Config("memory channels and batch must be nonzero".into()));
        }
        if self.support_r <= 0 {
            return Err(Error::Config("support R must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        OptimizerConfig::adam(self.lr_nets).validate()?;
        OptimizerConfig::adam(self.lr_entropy).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MemoryTrainLog {
    pub loss_recall: Vec<f64>,
    pub loss_entropy: Vec<f64>,
    pub loss_total: Vec<f64>,
}

/// Train separation/completion nets plus the entropy model on one task's
/// raw data. `salt` separates RNG draws across tasks.
pub fn train_memory_module(
    data: &DatasetHandle,
    cfg: &MemoryTrainConfig,
    seed: u64,
    salt: u64,
) -> Result<(
    PatternSeparationNet,
    PatternCompletionNet,
    EntropyModel,
    MemoryTrainLog,
)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("memory-module training set is empty".into()));
    }
    let mut init_rng = substream(seed, Stream::Init, salt.wrapping_mul(3).wrapping_add(1));
    let mut sep = PatternSeparationNet::init(cfg.channels, 3, &mut init_rng);
    let mut com = PatternCompletionNet::init(
        cfg.channels[3],
        cfg.completion_channels(),
        &mut init_rng,
    );
    let em = EntropyModel::new_uniform(cfg.channels[3], cfg.support_r);
    let mut em_store = ParamStore::new();
    let psi_id = em_store.add("em.psi", em.psi().clone(), true);

    let net_opt = OptimizerConfig::adam(cfg.lr_nets);
    let em_opt = OptimizerConfig::adam(cfg.lr_entropy);
    let lambda = cfg.lambda as f32;

    let mut log = MemoryTrainLog::default();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = substream(
            seed,
            Stream::Sampling,
            salt.wrapping_mul(1 << 20).wrapping_add(epoch as u64),
        );
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = substream(
            seed,
            Stream::Noise,
            salt.wrapping_mul(1 << 20).wrapping_add(epoch as u64),
        );
        let mut ep_r = 0.0f64;
        let mut ep_e = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (x, _) = data.batch(chunk);
            let hw = (x.dim(2), x.dim(3));

            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let sep_vars = sep.inject(&mut tape);
            let com_vars = com.inject(&mut tape);
            let psi_var = em_store.leaf(&mut tape, psi_id);

            let z = separation_forward(&mut tape, xv, &sep_vars)?;
            let noise = noise_like(tape.value(z).shape(), &mut noise_rng);
            let nv = tape.leaf(noise);
            let z_noisy = tape.add(z, nv)?;
            let xhat = completion_forward(&mut tape, z_noisy, &com_vars, hw)?;
            let loss_r = tape.mse(xhat, xv)?;
            let loss_e = tape.entropy_nll(psi_var, z_noisy)?;
            let scaled_e = tape.scale(loss_e, lambda);
            let loss_total = tape.add(loss_r, scaled_e)?;

            let lr_val = tape.value(loss_r).item() as f64;
            let le_val = tape.value(loss_e).item() as f64;
            if !lr_val.is_finite() || !le_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("memory-module loss diverged (recall {lr_val}, entropy {le_val})"),
                });
            }
            ep_r += lr_val;
            ep_e += le_val;
            batches += 1;

            // one backward drives both nets: completion sees only the
            // recall term, separation sees recall + lambda * entropy
            let mut wrt = sep_vars.clone();
            wrt.extend_from_slice(&com_vars);
            tape.backward(loss_total, &wrt)?;
            for (var, id) in sep_vars.iter().zip(sep.store.ids()) {
                sep.store.step(id, &tape.grad(*var), &net_opt, epoch);
            }
            for (var, id) in com_vars.iter().zip(com.store.ids()) {
                com.store.step(id, &tape.grad(*var), &net_opt, epoch);
            }
            // entropy model trains on the unscaled entropy loss
            tape.backward(loss_e, &[psi_var])?;
            em_store.step(psi_id, &tape.grad(psi_var), &em_opt, epoch);
        }
        log.loss_recall.push(ep_r / batches as f64);
        log.loss_entropy.push(ep_e / batches as f64);
        log.loss_total
            .push((ep_r + cfg.lambda * ep_e) / batches as f64);
    }

    let em = EntropyModel::from_psi(em_store.value(psi_id).clone(), cfg.support_r)?;
    sep.freeze();
    com.freeze();
    Ok((sep, com, em, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize, hw: usize) -> DatasetHandle {
        // smooth, compressible images
        let mut images = Vec::with_capacity(n * 3 * hw * hw);
        for i in 0..n {
            for c in 0..3 {
                for y in 0..hw {
                    for x in 0..hw {
                        let v = ((x + y + i + c) as f32 / (2 * hw) as f32).fract() * 0.8 + 0.1;
                        images.push(v);
                    }
                }
            }
        }
        DatasetHandle::new(images, vec![0; n], hw, hw).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_freezes_nets() {
        let data = toy_dataset(24, 16);
        let cfg = MemoryTrainConfig {
            channels: [8, 8, 8, 12],
            epochs: 8,
            batch: 8,
            ..Default::default()
        };
        let (sep, com, em, log) = train_memory_module(&data, &cfg, 0, 0).unwrap();
        assert_eq!(log.loss_total.len(), 8);
        assert!(
            log.loss_total.last().unwrap() < log.loss_total.first().unwrap(),
            "loss curve {:?}",
            log.loss_total
        );
        // frozen: optimizer steps must leave parameters bit-identical
        let h_before = sep.store.content_hash();
        assert!(sep.store.ids().all(|id| !sep.store.get(id).trainable));
        assert!(com.store.ids().all(|id| !com.store.get(id).trainable));
        assert_eq!(sep.store.content_hash(), h_before);
        assert_eq!(em.channels(), 12);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = toy_dataset(12, 16);
        let cfg = MemoryTrainConfig {
            channels: [4, 4, 4, 6],
            epochs: 2,
            batch: 6,
            ..Default::default()
        };
        let (s1, c1, e1, _) = train_memory_module(&data, &cfg, 7, 3).unwrap();
        let (s2, c2, e2, _) = train_memory_module(&data, &cfg, 7, 3).unwrap();
        assert_eq!(s1.store.content_hash(), s2.store.content_hash());
        assert_eq!(c1.store.content_hash(), c2.store.content_hash());
        assert_eq!(e1, e2);
        let (s3, ..) = train_memory_module(&data, &cfg, 8, 3).unwrap();
        assert_ne!(s1.store.content_hash(), s3.store.content_hash());
    }
}
