//! Raw-exemplar replay: after each task, store a fixed number of
//! uniformly sampled exemplars per new class; later tasks train on
//! current data plus everything in the buffer. Buffer bytes are counted
//! as stored u8 RGB (3 bytes per pixel), which defines budget parity
//! with the cue-based learner.

use super::{train_pool_epochs, BaselineConfig, TrainPool};
use crate::data::DatasetHandle;
use crate::learner::{check_disjoint, ContinualLearner, RecognitionModel, TaskLog};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;
use crate::Result;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayBudget {
    /// Fixed exemplars per class.
    PerClass { k: usize },
    /// Derive k from a byte budget shared across every class the stream
    /// will contain: k = floor(total / (bytes_per_image * classes)).
    Bytes { total: u64, total_classes: usize },
}

pub struct ReplayLearner {
    cfg: BaselineConfig,
    budget: ReplayBudget,
    seed: u64,
    model: RecognitionModel,
    buffer: BTreeMap<u32, Vec<Tensor<f32>>>,
    image_hw: Option<(usize, usize)>,
    next_task: u16,
}

impl ReplayLearner {
    pub fn new(cfg: BaselineConfig, budget: ReplayBudget, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, Stream::Init, 0);
        let model = RecognitionModel::init(cfg.backbone, cfg.feature_dim, &mut rng);
        Ok(ReplayLearner {
            cfg,
            budget,
            seed,
            model,
            buffer: BTreeMap::new(),
            image_hw: None,
            next_task: 0,
        })
    }

    pub fn per_class_k(&self, data: &DatasetHandle) -> usize {
        match self.budget {
            ReplayBudget::PerClass { k } => k,
            ReplayBudget::Bytes {
                total,
                total_classes,
            } => {
                let per_image = data.raw_bytes_per_image();
                (total / (per_image * total_classes as u64)) as usize
            }
        }
    }

    /// Exemplar bytes at 1 byte per channel value.
    pub fn buffer_bytes(&self) -> u64 {
        let Some((h, w)) = self.image_hw else {
            return 0;
        };
        let count: usize = self.buffer.values().map(|v| v.len()).sum();
        count as u64 * (3 * h * w) as u64
    }
}

impl ContinualLearner for ReplayLearner {
    fn method_name(&self) -> &'static str {
        "replay"
    }

    fn learn_task(&mut self, data: &DatasetHandle) -> Result<TaskLog> {
        let classes = data.classes();
        check_disjoint(&self.model, &classes)?;
        let task = self.next_task;
        let mut rng = substream(self.seed, Stream::Init, 1 + task as u64);
        self.model.grow_classes(&classes, &mut rng)?;
        self.image_hw = Some((data.height(), data.width()));

        let mut pool = TrainPool::from_dataset(data);
        for (class, exemplars) in &self.buffer {
            for img in exemplars {
                let mut shape = vec![1];
                shape.extend_from_slice(img.shape());
                let row = Tensor::from_vec(&shape, img.data().to_vec());
                pool.push(&row, &[*class]);
            }
        }
        let losses = train_pool_epochs(
            &mut self.model,
            &pool,
            &self.cfg,
            self.cfg.epochs_for_task(task),
            self.seed,
            (task as u64) << 32,
            None,
        )?;

        // store uniformly random exemplars per new class
        let k = self.per_class_k(data);
        if k > 0 {
            let mut pick_rng = substream(self.seed, Stream::Sampling, 0xB0F + task as u64);
            for &class in &classes {
                let mut members = data.indices_of_classes(&[class]);
                members.shuffle(&mut pick_rng);
                members.truncate(k);
                members.sort_unstable();
                let stored: Vec<Tensor<f32>> = members.iter().map(|&i| data.image(i)).collect();
                self.buffer.insert(class, stored);
            }
        }
        self.next_task += 1;
        Ok(TaskLog {
            task_id: task,
            classes,
            train_losses: losses,
            memory_bytes_after: self.buffer_bytes(),
            ..Default::default()
        })
    }

    fn model(&self) -> &RecognitionModel {
        &self.model
    }

    fn memory_bytes(&self) -> u64 {
        self.buffer_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::tests::toy_task;

    fn cfg() -> BaselineConfig {
        BaselineConfig {
            feature_dim: 32,
            epochs_first: 1,
            epochs_later: 1,
            lr: 0.05,
            batch: 16,
            ..Default::default()
        }
    }

    #[test]
    fn buffer_respects_budget() {
        let budget = ReplayBudget::Bytes {
            total: 10 * 3 * 16 * 16,
            total_classes: 4,
        };
        let mut learner = ReplayLearner::new(cfg(), budget, 1).unwrap();
        let d1 = toy_task([0, 1], 6, 1);
        learner.learn_task(&d1).unwrap();
        // k = floor(10 / 4) = 2 per class
        assert_eq!(learner.per_class_k(&d1), 2);
        assert_eq!(learner.buffer_bytes(), 4 * 3 * 16 * 16);
        let d2 = toy_task([2, 3], 6, 2);
        learner.learn_task(&d2).unwrap();
        assert!(learner.buffer_bytes() <= 10 * 3 * 16 * 16);
    }

    #[test]
    fn zero_budget_reduces_to_finetune_trajectory() {
        use crate::baselines::FinetuneLearner;
        let budget = ReplayBudget::PerClass { k: 0 };
        let mut r = ReplayLearner::new(cfg(), budget, 7).unwrap();
        let mut f = FinetuneLearner::new(cfg(), 7).unwrap();
        for seed in [1u64, 2] {
            let d = toy_task([(seed as u32 - 1) * 2, (seed as u32 - 1) * 2 + 1], 6, seed);
            r.learn_task(&d).unwrap();
            f.learn_task(&d).unwrap();
        }
        assert_eq!(
            r.model().store.content_hash(),
            f.model().store.content_hash()
        );
        assert_eq!(r.memory_bytes(), 0);
    }
}
