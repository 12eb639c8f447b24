//! Reference continual learners sharing the recognition model and the
//! [`ContinualLearner`] interface: plain finetuning, EWC's Fisher-penalty
//! regularization, raw-exemplar replay, and the joint-training oracle.

mod ewc;
mod replay;

pub use ewc::{estimate_fisher_diagonal, EwcLearner, FisherDiagonal};
pub use replay::{ReplayBudget, ReplayLearner};

use crate::data::DatasetHandle;
use crate::learner::{
    augment_batch, check_disjoint, train_ce_epoch, BackboneKind, ContinualLearner,
    RecognitionModel, TaskLog,
};
use crate::rng::{substream, Stream};
use crate::tensor::{OptimizerConfig, Tensor};
use crate::Result;
use rand::seq::SliceRandom;

/// Shared hyperparameters for all baseline trainers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch: usize,
    pub augment: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            backbone: BackboneKind::Resnet8,
            feature_dim: 256,
            epochs_first: 200,
            epochs_later: 70,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 2e-4,
            milestones: vec![],
            decay: 0.1,
            batch: 128,
            augment: false,
        }
    }
}

impl BaselineConfig {
    pub fn opt(&self) -> OptimizerConfig {
        OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay)
            .with_milestones(&self.milestones, self.decay)
    }

    pub fn epochs_for_task(&self, task: u16) -> usize {
        if task == 0 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.opt().validate()
    }
}

/// A task's training pool: images gathered up front so epochs can shuffle
/// freely over raw samples and replayed exemplars alike.
pub(crate) struct TrainPool {
    images: Tensor<f32>, // [N, 3, H, W]
    labels: Vec<u32>,
}

impl TrainPool {
    pub fn from_dataset(data: &DatasetHandle) -> Self {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (images, labels) = data.batch(&idx);
        TrainPool { images, labels }
    }

    pub fn push(&mut self, image_rows: &Tensor<f32>, labels: &[u32]) {
        assert_eq!(&self.images.shape()[1..], &image_rows.shape()[1..]);
        let mut shape = self.images.shape().to_vec();
        shape[0] += image_rows.dim(0);
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(image_rows.data());
        self.images = Tensor::from_vec(&shape, data);
        self.labels.extend_from_slice(labels);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    fn gather(&self, picks: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        let per = self.images.numel() / self.images.dim(0);
        let mut data = Vec::with_capacity(picks.len() * per);
        let mut labels = Vec::with_capacity(picks.len());
        for &i in picks {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = picks.len();
        (Tensor::from_vec(&shape, data), labels)
    }
}

/// Standard epoch loop over a pool: shuffle, batch, cross-entropy, SGD.
pub(crate) fn train_pool_epochs(
    model: &mut RecognitionModel,
    pool: &TrainPool,
    cfg: &BaselineConfig,
    epochs: usize,
    seed: u64,
    salt_base: u64,
    grad_extra: Option<&dyn Fn(&str, &[f32], &mut [f32])>,
) -> Result<Vec<f64>> {
    let opt = cfg.opt();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = substream(seed, Stream::Sampling, salt_base + epoch as u64);
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let (mut x, labels) = pool.gather(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut rng);
            }
            batches.push((x, labels));
        }
        losses.push(train_ce_epoch(model, &batches, &opt, epoch, grad_extra)?);
    }
    Ok(losses)
}

/// Trains on each task's data alone: the catastrophic-forgetting
/// reference point.
pub struct FinetuneLearner {
    cfg: BaselineConfig,
    seed: u64,
    model: RecognitionModel,
    next_task: u16,
}

impl FinetuneLearner {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, Stream::Init, 0);
        let model = RecognitionModel::init(cfg.backbone, cfg.feature_dim, &mut rng);
        Ok(FinetuneLearner {
            cfg,
            seed,
            model,
            next_task: 0,
        })
    }
}

impl ContinualLearner for FinetuneLearner {
    fn method_name(&self) -> &'static str {
        "finetune"
    }

    fn learn_task(&mut self, data: &DatasetHandle) -> Result<TaskLog> {
        let classes = data.classes();
        check_disjoint(&self.model, &classes)?;
        let task = self.next_task;
        let mut rng = substream(self.seed, Stream::Init, 1 + task as u64);
        self.model.grow_classes(&classes, &mut rng)?;
        let pool = TrainPool::from_dataset(data);
        let losses = train_pool_epochs(
            &mut self.model,
            &pool,
            &self.cfg,
            self.cfg.epochs_for_task(task),
            self.seed,
            (task as u64) << 32,
            None,
        )?;
        self.next_task += 1;
        Ok(TaskLog {
            task_id: task,
            classes,
            train_losses: losses,
            memory_bytes_after: 0,
            ..Default::default()
        })
    }

    fn model(&self) -> &RecognitionModel {
        &self.model
    }

    fn memory_bytes(&self) -> u64 {
        0
    }
}

/// Retrains from the running model on the union of all raw data seen so
/// far; the performance upper bound.
pub struct JointLearner {
    cfg: BaselineConfig,
    seed: u64,
    model: RecognitionModel,
    next_task: u16,
    pool: Option<TrainPool>,
}

impl JointLearner {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, Stream::Init, 0);
        let model = RecognitionModel::init(cfg.backbone, cfg.feature_dim, &mut rng);
        Ok(JointLearner {
            cfg,
            seed,
            model,
            next_task: 0,
            pool: None,
        })
    }
}

impl ContinualLearner for JointLearner {
    fn method_name(&self) -> &'static str {
        "joint"
    }

    fn learn_task(&mut self, data: &DatasetHandle) -> Result<TaskLog> {
        let classes = data.classes();
        check_disjoint(&self.model, &classes)?;
        let task = self.next_task;
        let mut rng = substream(self.seed, Stream::Init, 1 + task as u64);
        self.model.grow_classes(&classes, &mut rng)?;
        let added = TrainPool::from_dataset(data);
        match &mut self.pool {
            None => self.pool = Some(added),
            Some(pool) => pool.push(&added.images, &added.labels),
        }
        let pool = self.pool.as_ref().unwrap();
        let losses = train_pool_epochs(
            &mut self.model,
            pool,
            &self.cfg,
            self.cfg.epochs_for_task(task),
            self.seed,
            (task as u64) << 32,
            None,
        )?;
        self.next_task += 1;
        Ok(TaskLog {
            task_id: task,
            classes,
            train_losses: losses,
            memory_bytes_after: self.memory_bytes(),
            ..Default::default()
        })
    }

    fn model(&self) -> &RecognitionModel {
        &self.model
    }

    /// Raw retained images at 1 byte per channel value.
    fn memory_bytes(&self) -> u64 {
        self.pool
            .as_ref()
            .map(|p| p.len() as u64 * (p.images.numel() / p.images.dim(0).max(1)) as u64)
            .unwrap_or(0)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_task(classes: [u32; 2], n_per: usize, seed: u64) -> DatasetHandle {
        use rand::Rng;
        let hw = 16;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for &c in &classes {
            let mut rng = substream(seed, Stream::DataGen, c as u64);
            for _ in 0..n_per {
                // vertical vs horizontal bands per class parity
                for ch in 0..3 {
                    for y in 0..hw {
                        for x in 0..hw {
                            let stripe = if c % 2 == 0 { y / 4 } else { x / 4 } % 2;
                            let base = 0.2 + 0.6 * stripe as f32 + 0.02 * ch as f32;
                            let v: f32 = base + rng.gen_range(-0.1..0.1f32);
                            images.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                labels.push(c);
            }
        }
        DatasetHandle::new(images, labels, hw, hw).unwrap()
    }

    #[test]
    fn finetune_is_deterministic_per_seed() {
        let cfg = BaselineConfig {
            feature_dim: 32,
            epochs_first: 2,
            epochs_later: 1,
            lr: 0.05,
            batch: 16,
            ..Default::default()
        };
        let data = toy_task([0, 1], 8, 1);
        let mut a = FinetuneLearner::new(cfg.clone(), 5).unwrap();
        let mut b = FinetuneLearner::new(cfg, 5).unwrap();
        a.learn_task(&data).unwrap();
        b.learn_task(&data).unwrap();
        assert_eq!(a.model.store.content_hash(), b.model.store.content_hash());
    }

    #[test]
    fn joint_accumulates_pool() {
        let cfg = BaselineConfig {
            feature_dim: 32,
            epochs_first: 1,
            epochs_later: 1,
            lr: 0.05,
            batch: 16,
            ..Default::default()
        };
        let mut j = JointLearner::new(cfg, 2).unwrap();
        j.learn_task(&toy_task([0, 1], 4, 1)).unwrap();
        assert_eq!(j.pool.as_ref().unwrap().len(), 8);
        j.learn_task(&toy_task([2, 3], 4, 2)).unwrap();
        assert_eq!(j.pool.as_ref().unwrap().len(), 16);
        assert_eq!(j.model().num_classes(), 4);
    }
}
