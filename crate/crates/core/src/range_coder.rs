//! Byte-oriented range coder with 32-bit registers and 16-bit frequency
//! tables, plus the PMF-to-integer-CDF quantizer that feeds it.
//!
//! The encoder keeps `low` in a 64-bit word so that a carry out of bit 32
//! can be propagated into bytes already produced (held back as `cache` and a
//! run of pending `0xFF`s). Each renormalization shifts out exactly one byte,
//! and the final flush shifts out five, so the decoder consumes precisely
//! the bytes the encoder wrote; reading past the end is a truncation error.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequencies `c[0] = 0 < c[1] < … < c[K] = 2¹⁶`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedCdf {
    cumulative: Vec<u32>,
}

impl QuantizedCdf {
    /// Builds a table from per-symbol frequencies, which must be positive
    /// and sum to `2¹⁶`.
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidPmf("empty alphabet".into()));
        }
        if freqs.contains(&0) {
            return Err(Error::InvalidPmf("zero frequency".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        cumulative.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            if acc > TOTAL as u64 {
                return Err(Error::InvalidPmf("frequencies exceed 2^16".into()));
            }
            cumulative.push(acc as u32);
        }
        if acc != TOTAL as u64 {
            return Err(Error::InvalidPmf(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(Self { cumulative })
    }

    /// Table with equal frequencies (remainder to the lowest indices).
    pub fn uniform(k: usize) -> Result<Self> {
        quantize_pmf(&vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cumulative
    }

    pub fn start(&self, symbol: usize) -> u32 {
        self.cumulative[symbol]
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cumulative[symbol + 1] - self.cumulative[symbol]
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Ideal code length of `symbol` under this table, in bits.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        PRECISION_BITS as f64 - (self.freq(symbol) as f64).log2()
    }

    /// Symbol whose interval contains `target`.
    fn lookup(&self, target: u32) -> usize {
        self.cumulative.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes a probability vector to integer frequencies summing to `2¹⁶`.
///
/// Each symbol gets `max(1, ⌊p·2¹⁶⌋)`. The residual is then settled one unit
/// at a time, walking symbols in descending probability order (ties by
/// index): added when positive, taken from symbols above 1 when negative.
pub fn quantize_pmf(probs: &[f64]) -> Result<QuantizedCdf> {
    let k = probs.len();
    if k == 0 {
        return Err(Error::InvalidPmf("empty alphabet".into()));
    }
    if k > TOTAL as usize {
        return Err(Error::AlphabetTooLarge(k));
    }
    if let Some(i) = probs.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidPmf(format!("non-positive probability at symbol {i}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidPmf(format!("probabilities sum to {sum}")));
    }
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| ((p * TOTAL as f64).floor() as u32).clamp(1, TOTAL))
        .collect();
    let residual = TOTAL as i64 - freqs.iter().map(|&f| f as i64).sum::<i64>();
    settle_residual(probs, &mut freqs, residual);
    QuantizedCdf::from_frequencies(&freqs)
}

fn settle_residual(probs: &[f64], freqs: &mut [u32], mut residual: i64) {
    let by_prob = |&a: &usize, &b: &usize| probs[b].total_cmp(&probs[a]).then(a.cmp(&b));
    // A single pass over the first |residual| eligible symbols covers every
    // case except a deficit larger than the number of symbols above 1.
    let mut eligible: Vec<usize> = if residual > 0 {
        (0..probs.len()).collect()
    } else {
        (0..probs.len()).filter(|&s| freqs[s] > 1).collect()
    };
    let r = residual.unsigned_abs() as usize;
    if r == 0 {
        return;
    }
    if r < eligible.len() {
        eligible.select_nth_unstable_by(r, by_prob);
        eligible.truncate(r);
        for s in eligible {
            if residual > 0 {
                freqs[s] += 1;
            } else {
                freqs[s] -= 1;
            }
        }
        return;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(by_prob);
    let k = order.len();
    let mut i = 0;
    while residual > 0 {
        freqs[order[i % k]] += 1;
        residual -= 1;
        i += 1;
    }
    while residual < 0 {
        let s = order[i % k];
        if freqs[s] > 1 {
            freqs[s] -= 1;
            residual += 1;
        }
        i += 1;
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: usize) {
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cdf.start(symbol) as u64;
        self.range = r * cdf.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    decoded: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 5 {
            return Err(Error::CorruptStream(format!("range-coded stream of {} bytes is shorter than its 5-byte preamble", data.len())));
        }
        if data[0] != 0 {
            return Err(Error::CorruptStream("range-coded stream must start with a zero byte".into()));
        }
        let code = data[1..5].iter().fold(0u32, |c, &b| (c << 8) | b as u32);
        Ok(Self {
            data,
            pos: 5,
            range: u32::MAX,
            code,
            decoded: 0,
        })
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::CorruptStream(format!("code value out of range at symbol {}", self.decoded)));
        }
        let symbol = cdf.lookup(target);
        self.code -= r * cdf.start(symbol);
        self.range = r * cdf.freq(symbol);
        while self.range < TOP {
            let byte = *self.data.get(self.pos).ok_or(Error::Truncated {
                symbols: self.decoded,
                expected: self.decoded + 1,
            })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        self.decoded += 1;
        Ok(symbol)
    }

    /// Errors unless the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::CorruptStream(format!(
                "{} trailing bytes after {} symbols",
                self.data.len() - self.pos,
                self.decoded
            )));
        }
        Ok(())
    }
}

/// Encodes `(symbol, table)` pairs into one stream.
pub fn encode<'a>(symbols: impl IntoIterator<Item = (usize, &'a QuantizedCdf)>) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (s, cdf) in symbols {
        if s >= cdf.k() {
            return Err(Error::IndexOutOfRange {
                index: s as u32,
                k: cdf.k(),
            });
        }
        enc.encode(cdf, s);
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols, the i-th with the i-th table.
pub fn decode<'a>(bytes: &[u8], tables: impl IntoIterator<Item = &'a QuantizedCdf>, n: usize) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for cdf in tables.into_iter().take(n) {
        out.push(dec.decode(cdf).map_err(|e| match e {
            Error::Truncated { symbols, .. } => Error::Truncated { symbols, expected: n },
            other => other,
        })?);
    }
    if out.len() != n {
        return Err(Error::InvalidParam(format!("{} tables supplied for {} symbols", out.len(), n)));
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_four_symbols() {
        let cdf = quantize_pmf(&[0.25; 4]).unwrap();
        assert_eq!(cdf.frequencies(), vec![16384; 4]);
    }

    #[test]
    fn tiny_probabilities_floor_to_one() {
        let eps = 1e-9;
        let cdf = quantize_pmf(&[1.0 - 3.0 * eps, eps, eps, eps]).unwrap();
        assert_eq!(cdf.frequencies(), vec![65533, 1, 1, 1]);
    }

    #[test]
    fn random_pmf_quantization_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..1024).map(|_| rng.gen::<f64>().powi(4) + 1e-7).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let cdf = quantize_pmf(&p).unwrap();
        let f = cdf.frequencies();
        assert_eq!(f.iter().sum::<u32>(), TOTAL);
        assert!(f.iter().all(|&v| v >= 1));
        // Coding every symbol once: quantized cost vs ideal cost, with slack
        // for the symbols whose frequency was raised to 1.
        let quantized: f64 = (0..1024).map(|i| cdf.cost_bits(i)).sum();
        let ideal: f64 = p.iter().map(|v| -v.log2()).sum();
        let floor_slack: f64 = p
            .iter()
            .filter(|&&v| v * (TOTAL as f64) < 1.0)
            .map(|&v| (-v.log2()) - 16.0)
            .sum::<f64>()
            .abs();
        assert!(quantized <= ideal + 0.01 * 1024.0 + floor_slack, "{quantized} vs {ideal}");
    }

    /// Residual settlement by an explicit full sort and cyclic walk.
    fn reference_quantize(probs: &[f64]) -> Vec<u32> {
        let k = probs.len();
        let mut freqs: Vec<u32> = probs.iter().map(|&p| ((p * 65536.0).floor() as u32).max(1)).collect();
        let mut residual = 65536i64 - freqs.iter().map(|&f| f as i64).sum::<i64>();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut i = 0;
        while residual != 0 {
            let s = order[i % k];
            if residual > 0 {
                freqs[s] += 1;
                residual -= 1;
            } else if freqs[s] > 1 {
                freqs[s] -= 1;
                residual += 1;
            }
            i += 1;
        }
        freqs
    }

    #[test]
    fn partial_selection_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..300 {
            let k = [2, 3, 7, 64, 1024, 5000][trial % 6];
            let power = [1, 3, 8][trial % 3];
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(power) + 1e-12).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            assert_eq!(quantize_pmf(&p).unwrap().frequencies(), reference_quantize(&p), "trial {trial}");
        }
        // ties
        let p = vec![0.3, 0.3, 0.2, 0.2];
        assert_eq!(quantize_pmf(&p).unwrap().frequencies(), reference_quantize(&p));
    }

    #[test]
    fn oversize_alphabet_rejected() {
        let k = TOTAL as usize + 1;
        assert!(matches!(quantize_pmf(&vec![1.0 / k as f64; k]), Err(Error::AlphabetTooLarge(_))));
    }

    #[test]
    fn empty_sequence_flush_is_small() {
        let bytes = encode(std::iter::empty()).unwrap();
        assert!(bytes.len() <= 8);
        assert!(decode(&bytes, std::iter::empty(), 0).unwrap().is_empty());
    }

    #[test]
    fn deterministic_table_is_nearly_free() {
        let k = 256;
        let mut freqs = vec![1u32; k];
        freqs[3] = TOTAL - k as u32 + 1;
        let cdf = QuantizedCdf::from_frequencies(&freqs).unwrap();
        let bytes = encode((0..10_000).map(|_| (3, &cdf))).unwrap();
        assert!(bytes.len() < 30, "{} bytes", bytes.len());
        assert_eq!(decode(&bytes, std::iter::repeat(&cdf), 10_000).unwrap(), vec![3; 10_000]);
    }

    #[test]
    fn roundtrip_known_table() {
        let cdf = quantize_pmf(&[0.5, 0.25, 0.125, 0.0625, 0.0625]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let syms: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..5)).collect();
        let bytes = encode(syms.iter().map(|&s| (s, &cdf))).unwrap();
        let ideal: f64 = syms.iter().map(|&s| cdf.cost_bits(s)).sum();
        assert!((bytes.len() as f64) <= ideal / 8.0 + 8.0);
        assert_eq!(decode(&bytes, std::iter::repeat(&cdf), syms.len()).unwrap(), syms);
    }

    #[test]
    fn truncation_is_reported() {
        let cdf = QuantizedCdf::uniform(1024).unwrap();
        let syms: Vec<usize> = (0..200).map(|i| (i * 37) % 1024).collect();
        let bytes = encode(syms.iter().map(|&s| (s, &cdf))).unwrap();
        let err = decode(&bytes[..bytes.len() - 3], std::iter::repeat(&cdf), syms.len()).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err:?}");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer, std::iter::repeat(&cdf), syms.len()), Err(Error::CorruptStream(_))));
    }

    #[test]
    fn carry_propagation_through_ff_runs() {
        // Skewed tables push `low` close to the 2^32 boundary repeatedly.
        let cdf = QuantizedCdf::from_frequencies(&[1, 65534, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let syms: Vec<usize> = (0..50_000)
            .map(|_| match rng.gen_range(0..1000) {
                0 => 0,
                1 => 2,
                _ => 1,
            })
            .collect();
        let bytes = encode(syms.iter().map(|&s| (s, &cdf))).unwrap();
        assert_eq!(decode(&bytes, std::iter::repeat(&cdf), syms.len()).unwrap(), syms);
    }
}
