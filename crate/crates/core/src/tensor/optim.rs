//! Named parameter store and optimizer steps (SGD with momentum, Adam)
//! with a multi-step learning-rate schedule.

use super::{hash_f32_slice, CheckpointRecord, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::SgdMomentum,
            lr,
            momentum,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            milestones: Vec::new(),
            decay: 1.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            milestones: Vec::new(),
            decay: 1.0,
        }
    }

    pub fn with_milestones(mut self, milestones: &[usize], decay: f64) -> Self {
        self.milestones = milestones.to_vec();
        self.decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch` (0-based): decayed once per
    /// milestone m with m <= epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(hits as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store's insertion order (stable for the store's
    /// lifetime; used to map parameters to injected tape leaves).
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
    momentum: Option<Vec<f32>>,
    adam_m: Option<Vec<f32>>,
    adam_v: Option<Vec<f32>>,
    adam_t: u64,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order everywhere (injection, checkpointing, hashing), which pins the
/// floating-point and serialization behavior.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<f32>, trainable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            momentum: None,
            adam_m: None,
            adam_v: None,
            adam_t: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<f32>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    /// Overwrite values buffer in place (running-statistic buffers).
    pub fn update_buffer(&mut self, id: ParamId, f: impl FnOnce(&mut [f32])) {
        f(self.params[id.0].value.data_mut());
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn leaf(&self, tape: &mut Tape<f32>, id: ParamId) -> Var {
        tape.leaf(self.params[id.0].value.clone())
    }

    /// Total number of stored values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over every parameter's bytes in insertion order.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            h ^= hash_f32_slice(p.value.data());
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// Hash restricted to parameters whose name starts with `prefix`.
    pub fn content_hash_prefixed(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h ^= hash_f32_slice(p.value.data());
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// One optimizer step on a single parameter. Frozen parameters are
    /// left untouched (buffers included).
    pub fn step(&mut self, id: ParamId, grad: &[f32], cfg: &OptimizerConfig, epoch: usize) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        assert_eq!(p.value.numel(), grad.len());
        let lr = cfg.lr_at(epoch) as f32;
        let wd = cfg.weight_decay as f32;
        match cfg.kind {
            OptimKind::SgdMomentum => {
                let m = cfg.momentum as f32;
                let buf = p
                    .momentum
                    .get_or_insert_with(|| vec![0.0; grad.len()]);
                for ((theta, v), &g) in p.value.data_mut().iter_mut().zip(buf).zip(grad) {
                    *v = m * *v + g + wd * *theta;
                    *theta -= lr * *v;
                }
            }
            OptimKind::Adam => {
                let (b1, b2) = (cfg.betas.0 as f32, cfg.betas.1 as f32);
                let eps = cfg.eps as f32;
                p.adam_t += 1;
                let t = p.adam_t as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let n = grad.len();
                let m = p.adam_m.get_or_insert_with(|| vec![0.0; n]);
                let v = p.adam_v.get_or_insert_with(|| vec![0.0; n]);
                for (((theta, mi), vi), &g0) in
                    p.value.data_mut().iter_mut().zip(m).zip(v).zip(grad)
                {
                    let g = g0 + wd * *theta;
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *theta -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    /// Grow a 2-D parameter by appending rows (classifier expansion).
    /// Optimizer state for existing rows is preserved; new rows start cold.
    pub fn grow_rows(&mut self, id: ParamId, new_rows: Tensor<f32>) {
        let p = &mut self.params[id.0];
        let old_shape = p.value.shape().to_vec();
        assert_eq!(old_shape.len(), new_rows.shape().len());
        assert_eq!(&old_shape[1..], &new_rows.shape()[1..]);
        let added = new_rows.numel();
        let mut data = p.value.data().to_vec();
        data.extend_from_slice(new_rows.data());
        let mut shape = old_shape;
        shape[0] += new_rows.shape()[0];
        p.value = Tensor::from_vec(&shape, data);
        for buf in [&mut p.momentum, &mut p.adam_m, &mut p.adam_v]
            .into_iter()
            .flatten()
        {
            buf.extend(std::iter::repeat(0.0).take(added));
        }
    }

    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        self.params
            .iter()
            .map(|p| CheckpointRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Restore values from checkpoint records; every record must match an
    /// existing parameter. Extra store parameters are left as-is.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        for rec in records {
            let id = self.find(&rec.name).ok_or_else(|| {
                Error::Decode(format!("checkpoint names unknown parameter {}", rec.name))
            })?;
            if self.params[id.0].value.shape() != rec.shape.as_slice() {
                return Err(Error::Decode(format!(
                    "checkpoint shape {:?} mismatches parameter {} {:?}",
                    rec.shape,
                    rec.name,
                    self.params[id.0].value.shape()
                )));
            }
            self.params[id.0].value = Tensor::from_vec(&rec.shape, rec.values.clone());
        }
        Ok(())
    }
}

/// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_milestones() {
        let cfg = OptimizerConfig::sgd(0.1, 0.9, 0.0).with_milestones(&[20, 40], 0.1);
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(19) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(20) - 0.01).abs() < 1e-12);
        assert!((cfg.lr_at(40) - 0.001).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.0, 0.9, 0.0).validate().is_err());
        let mut bad = OptimizerConfig::sgd(0.1, 0.9, 0.0);
        bad.milestones = vec![10, 10];
        assert!(bad.validate().is_err());
        bad.milestones = vec![10, 20];
        bad.decay = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sgd_single_scalar_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0), true);
        let cfg = OptimizerConfig::sgd(0.5, 0.9, 0.01);
        // v = 0.9*0 + g + wd*theta = 1.0 + 0.02 = 1.02; theta = 2 - 0.5*1.02 = 1.49
        store.step(id, &[1.0], &cfg, 0);
        assert!((store.value(id).item() - 1.49).abs() < 1e-6);
        // v = 0.9*1.02 + 1.0 + 0.01*1.49 = 1.9329; theta = 1.49 - 0.5*1.9329
        store.step(id, &[1.0], &cfg, 0);
        assert!((store.value(id).item() - (1.49 - 0.5 * 1.9329)).abs() < 1e-5);
    }

    #[test]
    fn zero_grad_zero_wd_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]), true);
        let cfg = OptimizerConfig::sgd(0.1, 0.0, 0.0);
        store.step(id, &[0.0, 0.0, 0.0], &cfg, 0);
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn frozen_param_bit_unchanged_by_steps() {
        let mut store = ParamStore::new();
        let id = store.add("frozen", Tensor::from_vec(&[2], vec![0.25, -1.5]), false);
        let before = store.content_hash();
        let cfg = OptimizerConfig::adam(0.1);
        for _ in 0..10 {
            store.step(id, &[1.0, 1.0], &cfg, 0);
        }
        assert_eq!(store.content_hash(), before);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // with bias correction, the first Adam step is ~lr * sign(g)
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        let cfg = OptimizerConfig::adam(0.01);
        store.step(id, &[0.37], &cfg, 0);
        assert!((store.value(id).item() - (1.0 - 0.01)).abs() < 1e-4);
    }

    #[test]
    fn grow_rows_preserves_existing() {
        let mut store = ParamStore::new();
        let id = store.add("fc", Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]), true);
        store.grow_rows(id, Tensor::from_vec(&[1, 3], vec![7., 8., 9.]));
        assert_eq!(store.value(id).shape(), &[3, 3]);
        assert_eq!(store.value(id).data(), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    }
}
