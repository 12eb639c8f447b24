//! Recognition model: a small residual CNN backbone with batch norm
//! producing a fixed-width feature vector, plus a linear classifier that
//! grows one row per learned class.
//!
//! Two presets: an 8-conv-layer desk-scale network (stem + three residual
//! stages, feature width 256 by default) and an 18-layer variant (stem +
//! four stages of two blocks) mirroring the standard full-scale recipe.

use crate::tensor::{kaiming_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update: running = (1-m)*running + m*batch.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Stem + 3 residual stages (1 block each), 8 conv layers.
    Resnet8,
    /// Stem + 4 residual stages (2 blocks each), 18 conv layers.
    Resnet18,
}

#[derive(Debug, Clone, Copy)]
struct StageSpec {
    blocks: usize,
    channels: usize,
    stride: usize,
}

fn stages(kind: BackboneKind, feature_dim: usize) -> Vec<StageSpec> {
    match kind {
        BackboneKind::Resnet8 => vec![
            StageSpec { blocks: 1, channels: feature_dim / 4, stride: 2 },
            StageSpec { blocks: 1, channels: feature_dim / 2, stride: 2 },
            StageSpec { blocks: 1, channels: feature_dim, stride: 2 },
        ],
        BackboneKind::Resnet18 => vec![
            StageSpec { blocks: 2, channels: feature_dim / 8, stride: 1 },
            StageSpec { blocks: 2, channels: feature_dim / 4, stride: 2 },
            StageSpec { blocks: 2, channels: feature_dim / 2, stride: 2 },
            StageSpec { blocks: 2, channels: feature_dim, stride: 2 },
        ],
    }
}

fn stem_channels(feature_dim: usize) -> usize {
    feature_dim / 8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, reported for running-buffer updates.
    Train,
    /// Running statistics folded into constant per-channel affines.
    Eval,
}

/// All model parameters injected into a tape as leaves, in store order.
pub struct Injection {
    vars: Vec<Var>,
}

impl Injection {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub struct RecognitionModel {
    pub store: ParamStore,
    pub kind: BackboneKind,
    pub feature_dim: usize,
    /// Learned classes in first-seen order; classifier row i scores
    /// classes[i].
    pub classes: Vec<u32>,
}

impl RecognitionModel {
    pub fn init(kind: BackboneKind, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let stem = stem_channels(feature_dim);
        add_conv_bn(&mut store, "backbone.stem", 3, stem, 3, rng);
        let mut cin = stem;
        for (si, st) in stages(kind, feature_dim).iter().enumerate() {
            for b in 0..st.blocks {
                let prefix = format!("backbone.s{si}b{b}");
                let stride = if b == 0 { st.stride } else { 1 };
                add_conv_bn(&mut store, &format!("{prefix}.c1"), cin, st.channels, 3, rng);
                add_conv_bn(&mut store, &format!("{prefix}.c2"), st.channels, st.channels, 3, rng);
                if stride != 1 || cin != st.channels {
                    add_conv_bn(&mut store, &format!("{prefix}.skip"), cin, st.channels, 1, rng);
                }
                cin = st.channels;
            }
        }
        // classifier starts empty and grows with the first task
        store.add("fc.weight", Tensor::zeros(&[0, feature_dim]), true);
        store.add("fc.bias", Tensor::zeros(&[0]), true);
        RecognitionModel {
            store,
            kind,
            feature_dim,
            classes: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Register new classes, growing the classifier with Kaiming rows.
    pub fn grow_classes(&mut self, new_classes: &[u32], rng: &mut impl Rng) -> Result<()> {
        for c in new_classes {
            if self.classes.contains(c) {
                return Err(Error::Protocol(format!("class {c} already learned")));
            }
        }
        let w_id = self.store.find("fc.weight").unwrap();
        let b_id = self.store.find("fc.bias").unwrap();
        let rows = kaiming_uniform(rng, self.feature_dim, &[new_classes.len(), self.feature_dim]);
        self.store.grow_rows(w_id, rows);
        self.store.grow_rows(b_id, Tensor::zeros(&[new_classes.len()]));
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }

    /// Classifier column index of a global class id.
    pub fn class_index(&self, class: u32) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Input(format!("class {class} not learned yet")))
    }

    pub fn inject(&self, tape: &mut Tape<f32>) -> Injection {
        Injection {
            vars: self.store.ids().map(|id| self.store.leaf(tape, id)).collect(),
        }
    }

    fn conv_bn(
        &self,
        tape: &mut Tape<f32>,
        inj: &Injection,
        prefix: &str,
        x: Var,
        stride: usize,
        mode: ForwardMode,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<Var> {
        let w_id = self.store.find(&format!("{prefix}.conv.weight")).unwrap();
        let gamma_id = self.store.find(&format!("{prefix}.bn.gamma")).unwrap();
        let beta_id = self.store.find(&format!("{prefix}.bn.beta")).unwrap();
        let k = self.store.value(w_id).dim(2);
        let cout = self.store.value(w_id).dim(0);
        let zero_bias = tape.leaf(Tensor::zeros(&[cout]));
        let conv = tape.conv2d(x, inj.var(w_id), zero_bias, stride, (k - 1) / 2)?;
        match mode {
            ForwardMode::Train => {
                let (y, mean, var) =
                    tape.batch_norm(conv, inj.var(gamma_id), inj.var(beta_id), BN_EPS)?;
                stats.push(BnBatchStats {
                    name: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            ForwardMode::Eval => {
                let gamma = self.store.value(gamma_id).data();
                let beta = self.store.value(beta_id).data();
                let rm = self
                    .store
                    .value(self.store.find(&format!("{prefix}.bn.running_mean")).unwrap())
                    .data();
                let rv = self
                    .store
                    .value(self.store.find(&format!("{prefix}.bn.running_var")).unwrap())
                    .data();
                let scale: Vec<f32> = gamma
                    .iter()
                    .zip(rv)
                    .map(|(&g, &v)| g / (v + BN_EPS as f32).sqrt())
                    .collect();
                let shift: Vec<f32> = beta
                    .iter()
                    .zip(rm)
                    .zip(&scale)
                    .map(|((&b, &m), &s)| b - m * s)
                    .collect();
                tape.channel_affine(conv, scale, shift)
            }
        }
    }

    /// Backbone forward to features [N, feature_dim].
    pub fn features_with(
        &self,
        tape: &mut Tape<f32>,
        inj: &Injection,
        x: Var,
        mode: ForwardMode,
    ) -> Result<(Var, Vec<BnBatchStats>)> {
        let mut stats = Vec::new();
        let mut h = self.conv_bn(tape, inj, "backbone.stem", x, 1, mode, &mut stats)?;
        h = tape.relu(h);
        let mut cin = stem_channels(self.feature_dim);
        for (si, st) in stages(self.kind, self.feature_dim).iter().enumerate() {
            for b in 0..st.blocks {
                let prefix = format!("backbone.s{si}b{b}");
                let stride = if b == 0 { st.stride } else { 1 };
                let needs_skip = stride != 1 || cin != st.channels;
                let c1 = self.conv_bn(tape, inj, &format!("{prefix}.c1"), h, stride, mode, &mut stats)?;
                let c1 = tape.relu(c1);
                let c2 = self.conv_bn(tape, inj, &format!("{prefix}.c2"), c1, 1, mode, &mut stats)?;
                let shortcut = if needs_skip {
                    self.conv_bn(tape, inj, &format!("{prefix}.skip"), h, stride, mode, &mut stats)?
                } else {
                    h
                };
                let sum = tape.add(c2, shortcut)?;
                h = tape.relu(sum);
                cin = st.channels;
            }
        }
        let feats = tape.global_avg_pool(h)?;
        Ok((feats, stats))
    }

    /// Classifier head on features.
    pub fn classifier_with(&self, tape: &mut Tape<f32>, inj: &Injection, feats: Var) -> Result<Var> {
        let w = inj.var(self.store.find("fc.weight").unwrap());
        let b = inj.var(self.store.find("fc.bias").unwrap());
        tape.linear(feats, w, b)
    }

    /// Full forward to logits over all learned classes.
    pub fn logits_with(
        &self,
        tape: &mut Tape<f32>,
        inj: &Injection,
        x: Var,
        mode: ForwardMode,
    ) -> Result<(Var, Vec<BnBatchStats>)> {
        let (feats, stats) = self.features_with(tape, inj, x, mode)?;
        let logits = self.classifier_with(tape, inj, feats)?;
        Ok((logits, stats))
    }

    /// Fold fresh batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats]) {
        for s in stats {
            let mean_id = self.store.find(&format!("{}.bn.running_mean", s.name)).unwrap();
            let var_id = self.store.find(&format!("{}.bn.running_var", s.name)).unwrap();
            self.store.update_buffer(mean_id, |buf| {
                for (r, &m) in buf.iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            });
            self.store.update_buffer(var_id, |buf| {
                for (r, &v) in buf.iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            });
        }
    }

    /// Eval-mode class probabilities for a batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let inj = self.inject(&mut tape);
        let (logits, _) = self.logits_with(&mut tape, &inj, xv, ForwardMode::Eval)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Eval-mode logits for a batch.
    pub fn logits_eval(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let inj = self.inject(&mut tape);
        let (logits, _) = self.logits_with(&mut tape, &inj, xv, ForwardMode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode backbone features for a batch.
    pub fn extract_features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let inj = self.inject(&mut tape);
        let (feats, _) = self.features_with(&mut tape, &inj, xv, ForwardMode::Eval)?;
        Ok(tape.value(feats).clone())
    }

    /// Bit-level hash of backbone parameters and buffers (freeze checks).
    pub fn backbone_hash(&self) -> u64 {
        self.store.content_hash_prefixed("backbone.")
    }

    pub fn fc_ids(&self) -> Vec<ParamId> {
        vec![
            self.store.find("fc.weight").unwrap(),
            self.store.find("fc.bias").unwrap(),
        ]
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.get(id).trainable)
            .collect()
    }
}

fn add_conv_bn(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let fan_in = cin * k * k;
    store.add(
        &format!("{prefix}.conv.weight"),
        kaiming_uniform(rng, fan_in, &[cout, cin, k, k]),
        true,
    );
    store.add(&format!("{prefix}.bn.gamma"), ones(cout), true);
    store.add(&format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]), true);
    store.add(&format!("{prefix}.bn.running_mean"), Tensor::zeros(&[cout]), false);
    store.add(&format!("{prefix}.bn.running_var"), ones(cout), false);
}

fn ones(n: usize) -> Tensor<f32> {
    Tensor::from_vec(&[n], vec![1.0; n])
}
