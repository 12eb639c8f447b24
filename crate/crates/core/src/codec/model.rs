//! The factorized entropy model and latent quantization.
//!
//! One model per task: each latent channel carries its own piecewise-linear
//! CDF over integer symbols in [-R, R-1], shared across spatial positions.
//! The same raw parameters drive the training-time entropy loss (through
//! the tape op) and the integer frequency tables used for coding.

use super::freq::{table_set_checksum, FrequencyTable};
use super::pwl;
use crate::tensor::{Tensor, PROB_FLOOR};
use crate::{Error, Result};
use rand::Rng;
use std::io::{Read, Write};

/// Quantized per-sample latent: integer symbols of shape (C, h, w) plus the
/// originating sample's spatial size, which pattern completion needs to
/// reconstruct the exact output resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentGrid {
    pub symbols: Vec<i32>,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub source_hw: (usize, usize),
}

impl LatentGrid {
    pub fn numel(&self) -> usize {
        self.channels * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QuantizeStats {
    pub clamped: usize,
    pub total: usize,
}

impl QuantizeStats {
    pub fn clamp_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }
}

/// Uniform scalar quantization with step 1: round half away from zero,
/// clamp into [-R, R-1], count clamps as a diagnostic.
pub fn quantize(z: &Tensor<f32>, support_r: i32, source_hw: (usize, usize)) -> (LatentGrid, QuantizeStats) {
    let shape = z.shape();
    assert_eq!(shape.len(), 3, "quantize expects a (C, h, w) latent");
    let mut stats = QuantizeStats {
        clamped: 0,
        total: z.numel(),
    };
    let lo = -support_r;
    let hi = support_r - 1;
    let symbols = z
        .data()
        .iter()
        .map(|&v| {
            let r = v.round() as i64;
            let c = r.clamp(lo as i64, hi as i64);
            if c != r {
                stats.clamped += 1;
            }
            c as i32
        })
        .collect();
    (
        LatentGrid {
            symbols,
            channels: shape[0],
            h: shape[1],
            w: shape[2],
            source_hw,
        },
        stats,
    )
}

/// Training surrogate for quantization: z + U(-0.5, 0.5) elementwise. The
/// noise is an additive constant w.r.t. z, so gradients pass through.
pub fn add_quantization_noise(z: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let noise = noise_like(z.shape(), rng);
    let data = z
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// A U(-0.5, 0.5) tensor; used as a tape leaf during training.
pub fn noise_like(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect())
}

/// Per-channel piecewise-linear CDF over [-R, R-1], parameterized by 2R
/// unconstrained reals per channel (softplus increments, normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    support_r: i32,
    psi: Tensor<f32>, // [channels, 2R]
}

impl EntropyModel {
    /// Fresh model with a flat (uniform) CDF in every channel.
    pub fn new_uniform(channels: usize, support_r: i32) -> Self {
        let bins = 2 * support_r as usize;
        EntropyModel {
            support_r,
            psi: Tensor::zeros(&[channels, bins]),
        }
    }

    pub fn from_psi(psi: Tensor<f32>, support_r: i32) -> Result<Self> {
        if psi.shape().len() != 2 || psi.shape()[1] != 2 * support_r as usize {
            return Err(Error::Config(format!(
                "entropy model psi shape {:?} does not match support R={support_r}",
                psi.shape()
            )));
        }
        Ok(EntropyModel { support_r, psi })
    }

    pub fn channels(&self) -> usize {
        self.psi.shape()[0]
    }

    pub fn support_r(&self) -> i32 {
        self.support_r
    }

    /// Number of CDF knots (half-integer boundaries spanning the support).
    pub fn knots(&self) -> usize {
        2 * self.support_r as usize + 1
    }

    pub fn psi(&self) -> &Tensor<f32> {
        &self.psi
    }

    pub fn set_psi(&mut self, psi: Tensor<f32>) {
        assert_eq!(psi.shape(), self.psi.shape());
        self.psi = psi;
    }

    fn channel_increments(&self, channel: usize) -> Vec<f64> {
        let bins = 2 * self.support_r as usize;
        let row: Vec<f64> = self.psi.data()[channel * bins..(channel + 1) * bins]
            .iter()
            .map(|&v| v as f64)
            .collect();
        pwl::increments(&row)
    }

    /// CDF of one channel at an arbitrary point (exactly 0 / 1 at the
    /// support boundaries).
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        pwl::cdf(&self.channel_increments(channel), x)
    }

    /// Floored, renormalized probabilities of all symbols in a channel.
    pub fn channel_probs(&self, channel: usize) -> Vec<f64> {
        let g = self.channel_increments(channel);
        let total: f64 = g.iter().sum();
        let mut probs: Vec<f64> = g.iter().map(|&v| (v / total).max(PROB_FLOOR)).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        probs
    }

    /// Probability of symbol `k` in `channel`.
    pub fn symbol_prob(&self, channel: usize, k: i32) -> Result<f64> {
        if k < -self.support_r || k >= self.support_r {
            return Err(Error::Input(format!(
                "symbol {k} outside support [{}, {}]",
                -self.support_r,
                self.support_r - 1
            )));
        }
        Ok(self.channel_probs(channel)[(k + self.support_r) as usize])
    }

    /// Integer frequency table for one channel.
    pub fn frequency_table(&self, channel: usize) -> FrequencyTable {
        FrequencyTable::from_probs(&self.channel_probs(channel))
    }

    pub fn frequency_tables(&self) -> Vec<FrequencyTable> {
        (0..self.channels()).map(|c| self.frequency_table(c)).collect()
    }

    /// Checksum binding cues to the exact tables that encoded them.
    pub fn table_checksum(&self) -> u16 {
        table_set_checksum(&self.frequency_tables())
    }

    /// Serialization: channel count, support R, knot count, then per-channel
    /// raw psi as 32-bit reals (little endian).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.channels() as u32).to_le_bytes())?;
        w.write_all(&(self.support_r as u32).to_le_bytes())?;
        w.write_all(&(self.knots() as u32).to_le_bytes())?;
        for v in self.psi.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let channels = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let support_r = u32::from_le_bytes(b4) as i32;
        r.read_exact(&mut b4)?;
        let knots = u32::from_le_bytes(b4) as usize;
        if support_r <= 0 || knots != 2 * support_r as usize + 1 {
            return Err(Error::Decode(format!(
                "entropy model header inconsistent: R={support_r}, knots={knots}"
            )));
        }
        let bins = 2 * support_r as usize;
        let mut data = Vec::with_capacity(channels * bins);
        for _ in 0..channels * bins {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4));
        }
        Ok(EntropyModel {
            support_r,
            psi: Tensor::from_vec(&[channels, bins], data),
        })
    }

    pub fn byte_len(&self) -> u64 {
        12 + 4 * self.psi.numel() as u64
    }

    /// Random raw parameters; used by property tests.
    pub fn random(channels: usize, support_r: i32, rng: &mut impl Rng) -> Self {
        let bins = 2 * support_r as usize;
        let data = (0..channels * bins)
            .map(|_| rng.gen_range(-3.0f32..3.0))
            .collect();
        EntropyModel {
            support_r,
            psi: Tensor::from_vec(&[channels, bins], data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_rounds_half_away_from_zero_and_clamps() {
        let z = Tensor::from_vec(&[1, 1, 6], vec![0.4, -1.7, 0.5, -0.5, 99.0, -99.0]);
        let (grid, stats) = quantize(&z, 32, (8, 8));
        assert_eq!(grid.symbols, vec![0, -2, 1, -1, 31, -32]);
        assert_eq!(stats.clamped, 2);
        assert_eq!(stats.total, 6);
    }

    #[test]
    fn noise_is_centered_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::zeros(&[1, 1, 100_000]);
        let noisy = add_quantization_noise(&z, &mut rng);
        let mean: f64 = noisy.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(noisy.data().iter().all(|&v| (-0.5..0.5).contains(&v)));
    }

    #[test]
    fn uniform_model_gives_uniform_probs() {
        let m = EntropyModel::new_uniform(2, 32);
        for k in -32..32 {
            let p = m.symbol_prob(0, k).unwrap();
            assert!((p - 1.0 / 64.0).abs() < 1e-12);
        }
        assert!(m.symbol_prob(0, 32).is_err());
        assert!(m.symbol_prob(0, -33).is_err());
    }

    #[test]
    fn probs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let m = EntropyModel::random(3, 32, &mut rng);
            for c in 0..3 {
                let sum: f64 = m.channel_probs(c).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cdf_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = EntropyModel::random(1, 8, &mut rng);
        assert_eq!(m.cdf(0, -8.5), 0.0);
        assert_eq!(m.cdf(0, 7.5), 1.0);
    }

    #[test]
    fn model_serialization_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = EntropyModel::random(5, 16, &mut rng);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, m.byte_len());
        let back = EntropyModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
