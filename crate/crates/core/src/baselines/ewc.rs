//! Elastic weight consolidation: a diagonal Fisher estimate of parameter
//! importance, accumulated at task boundaries, penalizes movement away
//! from the anchor parameters while later tasks train.

use super::{train_pool_epochs, BaselineConfig, TrainPool};
use crate::data::DatasetHandle;
use crate::learner::{check_disjoint, ContinualLearner, ForwardMode, RecognitionModel, TaskLog};
use crate::rng::{substream, Stream};
use crate::tensor::Tape;
use crate::Result;
use std::collections::BTreeMap;

/// Per-parameter importance plus the anchor values they were estimated
/// at, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct FisherDiagonal {
    pub entries: BTreeMap<String, FisherEntry>,
}

#[derive(Debug, Clone)]
pub struct FisherEntry {
    pub importance: Vec<f32>,
    pub anchor: Vec<f32>,
}

impl FisherDiagonal {
    /// Quadratic penalty (lambda/2) * sum_i F_i (theta_i - theta*_i)^2 at
    /// the given parameter values.
    pub fn penalty(&self, lambda: f64, params: impl Iterator<Item = (String, Vec<f32>)>) -> f64 {
        let mut acc = 0.0f64;
        for (name, theta) in params {
            if let Some(e) = self.entries.get(&name) {
                for ((&f, &a), &t) in e.importance.iter().zip(&e.anchor).zip(theta.iter()) {
                    let d = (t - a) as f64;
                    acc += f as f64 * d * d;
                }
            }
        }
        lambda / 2.0 * acc
    }

    /// Gradient contribution lambda * F_i (theta_i - theta*_i); rows that
    /// grew after anchoring (new classifier rows) carry no penalty.
    pub fn add_penalty_grad(&self, lambda: f64, name: &str, theta: &[f32], grad: &mut [f32]) {
        if let Some(e) = self.entries.get(name) {
            for ((g, &t), (&f, &a)) in grad
                .iter_mut()
                .zip(theta)
                .zip(e.importance.iter().zip(&e.anchor))
            {
                *g += (lambda * f as f64 * (t - a) as f64) as f32;
            }
        }
    }

    /// Accumulate a new task's estimate: importances add, anchors move to
    /// the latest snapshot.
    pub fn accumulate(&mut self, task_fisher: BTreeMap<String, Vec<f32>>, model: &RecognitionModel) {
        for (name, imp) in task_fisher {
            let id = model.store.find(&name).unwrap();
            let anchor = model.store.value(id).data().to_vec();
            match self.entries.get_mut(&name) {
                Some(e) => {
                    // grown parameters: extend old importance with zeros
                    if e.importance.len() < imp.len() {
                        e.importance.resize(imp.len(), 0.0);
                    }
                    for (acc, v) in e.importance.iter_mut().zip(&imp) {
                        *acc += *v;
                    }
                    e.anchor = anchor;
                }
                None => {
                    self.entries.insert(
                        name,
                        FisherEntry {
                            importance: imp,
                            anchor,
                        },
                    );
                }
            }
        }
    }
}

/// Empirical diagonal Fisher over a dataset: mean over samples of the
/// squared gradient of log p(y|x) at the true label, for every trainable
/// parameter.
pub fn estimate_fisher_diagonal(
    model: &RecognitionModel,
    data: &DatasetHandle,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let ids = model.trainable_ids();
    let mut acc: BTreeMap<String, Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let p = model.store.get(id);
            (p.name.clone(), vec![0.0f64; p.value.numel()])
        })
        .collect();
    let n = data.len();
    for i in 0..n {
        let (x, labels) = data.batch(&[i]);
        let label_idx = model.class_index(labels[0])?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let inj = model.inject(&mut tape);
        // eval-mode normalization: single-sample batch statistics are
        // degenerate, and the anchor model is frozen during estimation
        let (logits, _) = model.logits_with(&mut tape, &inj, xv, ForwardMode::Eval)?;
        let loss = tape.softmax_xent(logits, &[label_idx], None)?;
        let wrt: Vec<_> = ids.iter().map(|&id| inj.var(id)).collect();
        tape.backward(loss, &wrt)?;
        for (id, var) in ids.iter().zip(&wrt) {
            let name = &model.store.get(*id).name;
            let slot = acc.get_mut(name).unwrap();
            for (a, g) in slot.iter_mut().zip(tape.grad(*var)) {
                // gradient of -log p; squaring removes the sign
                *a += (g as f64) * (g as f64);
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(name, v)| {
            (
                name,
                v.into_iter().map(|a| (a / n as f64) as f32).collect(),
            )
        })
        .collect())
}

pub struct EwcLearner {
    cfg: BaselineConfig,
    pub lambda: f64,
    seed: u64,
    model: RecognitionModel,
    fisher: FisherDiagonal,
    next_task: u16,
}

impl EwcLearner {
    pub fn new(cfg: BaselineConfig, lambda: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, Stream::Init, 0);
        let model = RecognitionModel::init(cfg.backbone, cfg.feature_dim, &mut rng);
        Ok(EwcLearner {
            cfg,
            lambda,
            seed,
            model,
            fisher: FisherDiagonal::default(),
            next_task: 0,
        })
    }

    pub fn fisher(&self) -> &FisherDiagonal {
        &self.fisher
    }
}

impl ContinualLearner for EwcLearner {
    fn method_name(&self) -> &'static str {
        "ewc"
    }

    fn learn_task(&mut self, data: &DatasetHandle) -> Result<TaskLog> {
        let classes = data.classes();
        check_disjoint(&self.model, &classes)?;
        let task = self.next_task;
        let mut rng = substream(self.seed, Stream::Init, 1 + task as u64);
        self.model.grow_classes(&classes, &mut rng)?;
        let pool = TrainPool::from_dataset(data);
        let lambda = self.lambda;
        let fisher = self.fisher.clone();
        let extra = move |name: &str, theta: &[f32], grad: &mut [f32]| {
            fisher.add_penalty_grad(lambda, name, theta, grad);
        };
        let losses = train_pool_epochs(
            &mut self.model,
            &pool,
            &self.cfg,
            self.cfg.epochs_for_task(task),
            self.seed,
            (task as u64) << 32,
            if self.lambda > 0.0 { Some(&extra) } else { None },
        )?;
        // Fisher estimated at the end of each task, anchored there
        let task_fisher = estimate_fisher_diagonal(&self.model, data)?;
        self.fisher.accumulate(task_fisher, &self.model);
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

    /// EWC is a non-exemplar method; importance buffers are model-sized
    /// and excluded from the exemplar budget accounting.
    fn memory_bytes(&self) -> u64 {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_is_zero_at_anchor() {
        let mut fisher = FisherDiagonal::default();
        fisher.entries.insert(
            "w".into(),
            FisherEntry {
                importance: vec![2.0, 3.0],
                anchor: vec![0.5, -0.5],
            },
        );
        let p = fisher.penalty(1000.0, [("w".to_string(), vec![0.5, -0.5])].into_iter());
        assert_eq!(p, 0.0);
        let p = fisher.penalty(2.0, [("w".to_string(), vec![1.5, -0.5])].into_iter());
        assert!((p - 2.0).abs() < 1e-9); // (2/2)*2*(1)^2
    }

    #[test]
    fn penalty_grad_matches_formula_and_skips_new_rows() {
        let mut fisher = FisherDiagonal::default();
        fisher.entries.insert(
            "w".into(),
            FisherEntry {
                importance: vec![2.0],
                anchor: vec![1.0],
            },
        );
        let mut grad = vec![0.0f32, 0.0];
        // parameter grew from 1 to 2 elements after anchoring
        fisher.add_penalty_grad(10.0, "w", &[3.0, 9.0], &mut grad);
        assert!((grad[0] - 40.0).abs() < 1e-5); // 10 * 2 * (3-1)
        assert_eq!(grad[1], 0.0);
        let mut grad = vec![0.0f32];
        fisher.add_penalty_grad(10.0, "unknown", &[3.0], &mut grad);
        assert_eq!(grad[0], 0.0);
    }
}
