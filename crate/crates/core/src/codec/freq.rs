//! Integer frequency tables bridging model probabilities to the range
//! coder: per-symbol counts that always sum to exactly 2^16 with every
//! count >= 1, so any in-support symbol stays codable.

pub const FREQ_TOTAL: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    freq: Vec<u32>,
    cum: Vec<u32>, // len + 1 entries, cum[0] = 0, cum[len] = FREQ_TOTAL
}

impl FrequencyTable {
    /// Deterministic quantization of a probability vector:
    /// freq[k] = max(1, round(p_k * 2^16)), with the largest bin absorbing
    /// the rounding residual so the total is exact.
    pub fn from_probs(probs: &[f64]) -> Self {
        assert!(!probs.is_empty() && probs.len() <= FREQ_TOTAL as usize);
        let sum: f64 = probs.iter().sum();
        assert!(sum > 0.0, "probabilities must have positive mass");
        let mut freq: Vec<i64> = probs
            .iter()
            .map(|&p| ((p / sum * FREQ_TOTAL as f64).round() as i64).max(1))
            .collect();
        let mut residual = FREQ_TOTAL as i64 - freq.iter().sum::<i64>();
        while residual != 0 {
            // largest bin absorbs (first index on ties); repeat in the rare
            // case the adjustment would push it below 1
            let idx = freq
                .iter()
                .enumerate()
                .max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i)))
                .map(|(i, _)| i)
                .unwrap();
            let take = if residual > 0 {
                residual
            } else {
                residual.max(1 - freq[idx])
            };
            freq[idx] += take;
            residual -= take;
        }
        let freq: Vec<u32> = freq.into_iter().map(|f| f as u32).collect();
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, FREQ_TOTAL);
        FrequencyTable { freq, cum }
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freq(&self) -> &[u32] {
        &self.freq
    }

    /// (cumulative_low, frequency) of a symbol index.
    pub fn span(&self, sym: usize) -> (u32, u32) {
        (self.cum[sym], self.freq[sym])
    }

    /// Symbol whose cumulative span contains `v` (v < FREQ_TOTAL).
    pub fn lookup(&self, v: u32) -> usize {
        debug_assert!(v < FREQ_TOTAL);
        // cum is strictly increasing; find last index with cum[i] <= v
        self.cum.partition_point(|&c| c <= v) - 1
    }

    /// Ideal code length of a symbol in bits under this table.
    pub fn cost_bits(&self, sym: usize) -> f64 {
        -(self.freq[sym] as f64 / FREQ_TOTAL as f64).log2()
    }
}

/// 16-bit checksum over a set of tables (FNV-1a folded), stored in cue
/// headers to detect decoding against the wrong task's model.
pub fn table_set_checksum(tables: &[FrequencyTable]) -> u16 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tables {
        for &f in &t.freq {
            for b in f.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    ((h >> 48) ^ (h >> 32) ^ (h >> 16) ^ h) as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_64_symbols() {
        let probs = vec![1.0 / 64.0; 64];
        let t = FrequencyTable::from_probs(&probs);
        assert!(t.freq().iter().all(|&f| f == 1024));
        assert_eq!(t.freq().iter().sum::<u32>(), FREQ_TOTAL);
    }

    #[test]
    fn exact_products() {
        let t = FrequencyTable::from_probs(&[0.5, 0.25, 0.25]);
        assert_eq!(t.freq(), &[32768, 16384, 16384]);
    }

    #[test]
    fn skewed_tables_total_is_exact_and_floored() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..80);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(6)).collect();
            let t = FrequencyTable::from_probs(&probs);
            assert_eq!(t.freq().iter().sum::<u32>(), FREQ_TOTAL);
            assert!(t.freq().iter().all(|&f| f >= 1));
        }
    }

    #[test]
    fn lookup_inverts_spans() {
        let t = FrequencyTable::from_probs(&[0.9, 0.05, 0.05]);
        for sym in 0..3 {
            let (lo, f) = t.span(sym);
            assert_eq!(t.lookup(lo), sym);
            assert_eq!(t.lookup(lo + f - 1), sym);
        }
    }

    #[test]
    fn checksum_distinguishes_tables() {
        let a = vec![FrequencyTable::from_probs(&[0.5, 0.5])];
        let b = vec![FrequencyTable::from_probs(&[0.9, 0.1])];
        assert_ne!(table_set_checksum(&a), table_set_checksum(&b));
    }
}
