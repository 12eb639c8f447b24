//! Pattern separation (strided conv encoder) and pattern completion
//! (transposed-conv decoder) networks: 4 layers each, kernel 5, stride 2,
//! padding 2, ReLU after the first three. The encoder downsamples 16x; the
//! decoder's per-layer target sizes are recomputed from the source
//! resolution recorded in each cue header.

use crate::tensor::{conv_out_dim, kaiming_uniform, ParamStore, Scalar, Tape, Tensor, Var};
use crate::Result;
use rand::Rng;

pub const MEMORY_KERNEL: usize = 5;
pub const MEMORY_STRIDE: usize = 2;
pub const MEMORY_PAD: usize = 2;
pub const MEMORY_LAYERS: usize = 4;

/// Spatial sizes along the encoder: [s0 = input, s1, s2, s3, s4 = latent].
pub fn encoder_sizes(source: usize) -> [usize; MEMORY_LAYERS + 1] {
    let mut s = [source; MEMORY_LAYERS + 1];
    for i in 1..=MEMORY_LAYERS {
        s[i] = conv_out_dim(s[i - 1], MEMORY_KERNEL, MEMORY_STRIDE, MEMORY_PAD)
            .expect("k=5, p=2 always covers inputs >= 1");
    }
    s
}

/// Encoder graph. `params` = [w0, b0, w1, b1, w2, b2, w3, b3].
pub fn separation_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
    debug_assert_eq!(params.len(), 2 * MEMORY_LAYERS);
    let mut h = x;
    for layer in 0..MEMORY_LAYERS {
        h = tape.conv2d(
            h,
            params[2 * layer],
            params[2 * layer + 1],
            MEMORY_STRIDE,
            MEMORY_PAD,
        )?;
        if layer + 1 < MEMORY_LAYERS {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Decoder graph mirroring the encoder back up to `source_hw`.
pub fn completion_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    params: &[Var],
    source_hw: (usize, usize),
) -> Result<Var> {
    debug_assert_eq!(params.len(), 2 * MEMORY_LAYERS);
    let hs = encoder_sizes(source_hw.0);
    let ws = encoder_sizes(source_hw.1);
    let mut h = z;
    for layer in 0..MEMORY_LAYERS {
        let target = (hs[MEMORY_LAYERS - 1 - layer], ws[MEMORY_LAYERS - 1 - layer]);
        h = tape.deconv2d(
            h,
            params[2 * layer],
            params[2 * layer + 1],
            MEMORY_STRIDE,
            MEMORY_PAD,
            target,
        )?;
        if layer + 1 < MEMORY_LAYERS {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn inject_params(store: &ParamStore, tape: &mut Tape<f32>) -> Vec<Var> {
    store.ids().map(|id| store.leaf(tape, id)).collect()
}

/// Convolutional encoder producing raw latents ("memory cues" before
/// quantization). Discarded after memorization; never persisted.
#[derive(Debug, Clone)]
pub struct PatternSeparationNet {
    pub store: ParamStore,
    pub channels: [usize; 4],
    pub input_channels: usize,
}

impl PatternSeparationNet {
    pub fn init(channels: [usize; 4], input_channels: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = input_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * MEMORY_KERNEL * MEMORY_KERNEL;
            store.add(
                &format!("sep.conv{i}.weight"),
                kaiming_uniform(rng, fan_in, &[cout, cin, MEMORY_KERNEL, MEMORY_KERNEL]),
                true,
            );
            store.add(&format!("sep.conv{i}.bias"), Tensor::zeros(&[cout]), true);
            cin = cout;
        }
        PatternSeparationNet {
            store,
            channels,
            input_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.channels[3]
    }

    pub fn inject(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        inject_params(&self.store, tape)
    }

    /// Inference pass over a batch (N, C, H, W) -> (N, C_lat, h, w).
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let params = self.inject(&mut tape);
        let out = separation_forward(&mut tape, xv, &params)?;
        Ok(tape.value(out).clone())
    }

    pub fn freeze(&mut self) {
        freeze_store(&mut self.store);
    }
}

/// Transposed-conv decoder recalling samples from quantized latents.
/// Persisted per task in long-term memory.
#[derive(Debug, Clone)]
pub struct PatternCompletionNet {
    pub store: ParamStore,
    pub latent_channels: usize,
    pub channels: [usize; 4], // last entry is the image channel count
}

impl PatternCompletionNet {
    pub fn init(latent_channels: usize, channels: [usize; 4], rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = latent_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * MEMORY_KERNEL * MEMORY_KERNEL;
            store.add(
                &format!("com.deconv{i}.weight"),
                kaiming_uniform(rng, fan_in, &[cin, cout, MEMORY_KERNEL, MEMORY_KERNEL]),
                true,
            );
            store.add(&format!("com.deconv{i}.bias"), Tensor::zeros(&[cout]), true);
            cin = cout;
        }
        PatternCompletionNet {
            store,
            latent_channels,
            channels,
        }
    }

    pub fn inject(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        inject_params(&self.store, tape)
    }

    /// Inference pass: (N, C_lat, h, w) -> (N, 3, H, W) for one source size.
    pub fn forward(&self, z: &Tensor<f32>, source_hw: (usize, usize)) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let params = self.inject(&mut tape);
        let out = completion_forward(&mut tape, zv, &params, source_hw)?;
        Ok(tape.value(out).clone())
    }

    pub fn freeze(&mut self) {
        freeze_store(&mut self.store);
    }

    /// Rebuild from checkpoint records (shapes carry the architecture).
    pub fn from_records(records: &[crate::tensor::CheckpointRecord]) -> Result<Self> {
        use crate::Error;
        let mut latent_channels = 0;
        let mut channels = [0usize; 4];
        for i in 0..MEMORY_LAYERS {
            let name = format!("com.deconv{i}.weight");
            let rec = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Decode(format!("bundle checkpoint missing {name}")))?;
            if rec.shape.len() != 4 {
                return Err(Error::Decode(format!("{name} has shape {:?}", rec.shape)));
            }
            if i == 0 {
                latent_channels = rec.shape[0];
            }
            channels[i] = rec.shape[1];
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut net = PatternCompletionNet::init(latent_channels, channels, &mut rng);
        net.store.load_records(records)?;
        net.freeze();
        Ok(net)
    }
}

fn freeze_store(store: &mut ParamStore) {
    let frozen = store
        .ids()
        .map(|id| {
            let p = store.get(id);
            (p.name.clone(), p.value.clone())
        })
        .collect::<Vec<_>>();
    let mut s = ParamStore::new();
    for (name, value) in frozen {
        s.add(&name, value, false);
    }
    *store = s;
}
