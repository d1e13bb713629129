//! Carry-less 32-bit range coder.
//!
//! The classic construction keeps `low + range ≤ 2³²` at all times: when the
//! top bytes of `low` and `low + range` agree the byte is settled and shifts
//! out; when `range` underflows below [`BOT`] it is truncated to the distance
//! up to the next [`BOT`] boundary, which realigns the interval without a
//! carry ever propagating into flushed bytes. Totals are fixed at 2¹⁶ so the
//! per-symbol scale is a shift, not a division.

use crate::error::{Error, Result};

/// Probability resolution: all distributions sum to `1 << PROB_BITS`.
pub const PROB_BITS: u32 = 16;
/// Total cumulative frequency of every distribution.
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Streaming encoder; symbols are `(cumulative, frequency)` slices of the
/// 2¹⁶-total probability line.
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `[cum, cum + freq)` out of [`PROB_TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq >= 1);
        debug_assert!(cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.renorm();
    }

    /// Encodes 16 raw bits as one uniform symbol.
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(value as u32, 1);
    }

    fn renorm(&mut self) {
        loop {
            let settled = (self.low ^ self.low.wrapping_add(self.range)) < TOP;
            if !settled {
                if self.range >= BOT {
                    break;
                }
                // Underflow: truncate range to the next BOT boundary so the
                // top byte ships without a carry ever reaching it.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flushes the final interval; the payload is complete afterwards.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

/// Streaming decoder over an encoded payload.
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let Some(&b) = self.input.get(self.pos) else {
            return Err(Error::TruncatedPayload(
                "range payload ended mid-symbol".into(),
            ));
        };
        self.pos += 1;
        Ok(b)
    }

    /// Returns the cumulative-frequency target of the pending symbol. The
    /// caller locates the symbol whose `[cum, cum + freq)` contains it and
    /// must then call [`RangeDecoder::consume`] with that slice.
    pub fn target(&mut self) -> u32 {
        self.range >>= PROB_BITS;
        (self.code.wrapping_sub(self.low) / self.range).min(PROB_TOTAL - 1)
    }

    /// Mirrors the encoder's interval narrowing for the located symbol.
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(self.range * cum);
        self.range *= freq;
        loop {
            let settled = (self.low ^ self.low.wrapping_add(self.range)) < TOP;
            if !settled {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Decodes 16 raw bits written by [`RangeEncoder::encode_raw16`].
    pub fn decode_raw16(&mut self) -> Result<u16> {
        let t = self.target();
        self.consume(t, 1)?;
        Ok(t as u16)
    }
}

/// A quantized distribution: cumulative frequencies over a finite alphabet,
/// every symbol's frequency ≥ 1, total exactly [`PROB_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distribution {
    cum: Vec<u32>,
}

impl Distribution {
    /// Builds from integer frequencies that must each be ≥ 1 and sum to
    /// [`PROB_TOTAL`].
    pub fn from_freqs(freqs: &[u32]) -> Result<Distribution> {
        if freqs.is_empty() {
            return Err(Error::ShapeMismatch("empty alphabet".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(Error::ShapeMismatch("zero frequency symbol".into()));
            }
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::Overflow("frequency sum".into()))?;
            cum.push(acc);
        }
        if acc != PROB_TOTAL {
            return Err(Error::ShapeMismatch(format!(
                "frequencies sum to {acc}, expected {PROB_TOTAL}"
            )));
        }
        Ok(Distribution { cum })
    }

    /// Quantizes real probabilities to integer frequencies: every symbol gets
    /// a guaranteed count of 1, the rest is proportional, and rounding
    /// leftovers go to the most probable symbol. Deterministic.
    pub fn quantize(probs: &[f64]) -> Result<Distribution> {
        if probs.is_empty() || probs.len() as u32 > PROB_TOTAL {
            return Err(Error::ShapeMismatch(format!(
                "alphabet of {} cannot be quantized to {} slots",
                probs.len(),
                PROB_TOTAL
            )));
        }
        let spare = PROB_TOTAL - probs.len() as u32;
        let mut freqs: Vec<u32> = Vec::with_capacity(probs.len());
        let mut argmax = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::ShapeMismatch("negative or non-finite probability".into()));
            }
            if p > probs[argmax] {
                argmax = i;
            }
            freqs.push(1 + (p * spare as f64).floor() as u32);
        }
        let total: u32 = freqs.iter().sum();
        if total > PROB_TOTAL {
            return Err(Error::ShapeMismatch("probabilities sum above one".into()));
        }
        freqs[argmax] += PROB_TOTAL - total;
        Distribution::from_freqs(&freqs)
    }

    pub fn alphabet_len(&self) -> usize {
        self.cum.len() - 1
    }

    /// Frequency assigned to `symbol`.
    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    /// Ideal code length of `symbol` in bits under this quantized model.
    pub fn bits(&self, symbol: usize) -> f64 {
        -(self.freq(symbol) as f64 / PROB_TOTAL as f64).log2()
    }

    pub fn encode_symbol(&self, enc: &mut RangeEncoder, symbol: usize) -> Result<()> {
        if symbol + 1 >= self.cum.len() {
            return Err(Error::SymbolOutOfAlphabet(format!(
                "symbol {symbol} outside alphabet of {}",
                self.alphabet_len()
            )));
        }
        enc.encode(self.cum[symbol], self.freq(symbol));
        Ok(())
    }

    pub fn decode_symbol(&self, dec: &mut RangeDecoder) -> Result<usize> {
        let target = dec.target();
        let symbol = self.cum.partition_point(|&c| c <= target) - 1;
        dec.consume(self.cum[symbol], self.freq(symbol))?;
        Ok(symbol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_distribution(rng: &mut ChaCha8Rng, alphabet: usize) -> Distribution {
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..alphabet).map(|_| rng.gen::<f64>().powi(3)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|v| v / sum).collect()
        };
        Distribution::quantize(&probs).unwrap()
    }

    #[test]
    fn quantize_preserves_floor_and_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let alphabet = rng.gen_range(1..3000);
            let d = random_distribution(&mut rng, alphabet);
            let mut total = 0;
            for s in 0..alphabet {
                assert!(d.freq(s) >= 1);
                total += d.freq(s);
            }
            assert_eq!(total, PROB_TOTAL);
        }
    }

    #[test]
    fn roundtrip_static_and_varying_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let alphabet = rng.gen_range(2..512);
            let models: Vec<Distribution> =
                (0..4).map(|_| random_distribution(&mut rng, alphabet)).collect();
            let symbols: Vec<usize> =
                (0..rng.gen_range(0..2000)).map(|_| rng.gen_range(0..alphabet)).collect();

            let mut enc = RangeEncoder::new();
            for (i, &s) in symbols.iter().enumerate() {
                models[i % models.len()].encode_symbol(&mut enc, s).unwrap();
            }
            let payload = enc.finish();

            let mut dec = RangeDecoder::new(&payload).unwrap();
            for (i, &s) in symbols.iter().enumerate() {
                assert_eq!(models[i % models.len()].decode_symbol(&mut dec).unwrap(), s);
            }
        }
    }

    #[test]
    fn payload_tracks_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let alphabet = rng.gen_range(2..300);
            let d = random_distribution(&mut rng, alphabet);
            // Sample roughly from the model itself so the bound is tight.
            let symbols: Vec<usize> = (0..rng.gen_range(1..1500))
                .map(|_| {
                    let t = rng.gen_range(0..PROB_TOTAL);
                    d.cum.partition_point(|&c| c <= t) - 1
                })
                .collect();
            let mut enc = RangeEncoder::new();
            let mut ideal_bits = 0.0;
            for &s in &symbols {
                d.encode_symbol(&mut enc, s).unwrap();
                ideal_bits += d.bits(s);
            }
            let actual_bits = enc.finish().len() as f64 * 8.0;
            assert!(
                actual_bits <= ideal_bits * 1.001 + 64.0,
                "payload {actual_bits} bits vs ideal {ideal_bits}"
            );
        }
    }

    #[test]
    fn uniform_256_costs_eight_bits_per_symbol() {
        let d = Distribution::from_freqs(&[PROB_TOTAL / 256; 256]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let symbols: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            d.encode_symbol(&mut enc, s).unwrap();
        }
        let bits = enc.finish().len() * 8;
        assert!((8000..=8100).contains(&bits), "got {bits} bits");
    }

    #[test]
    fn degenerate_single_symbol_alphabet_is_nearly_free() {
        let d = Distribution::from_freqs(&[PROB_TOTAL]).unwrap();
        let mut enc = RangeEncoder::new();
        for _ in 0..1_000_000 {
            d.encode_symbol(&mut enc, 0).unwrap();
        }
        let payload = enc.finish();
        assert!(payload.len() < 200, "payload was {} bytes", payload.len());
        let mut dec = RangeDecoder::new(&payload).unwrap();
        for _ in 0..1_000_000 {
            assert_eq!(d.decode_symbol(&mut dec).unwrap(), 0);
        }
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let payload = RangeEncoder::new().finish();
        assert_eq!(payload.len(), 4);
        assert!(RangeDecoder::new(&payload).is_ok());
    }

    #[test]
    fn raw16_roundtrip_interleaved_with_symbols() {
        let d = Distribution::from_freqs(&[PROB_TOTAL / 4; 4]).unwrap();
        let mut enc = RangeEncoder::new();
        d.encode_symbol(&mut enc, 2).unwrap();
        enc.encode_raw16(0xBEEF);
        enc.encode_raw16(0x0001);
        d.encode_symbol(&mut enc, 3).unwrap();
        let payload = enc.finish();
        let mut dec = RangeDecoder::new(&payload).unwrap();
        assert_eq!(d.decode_symbol(&mut dec).unwrap(), 2);
        assert_eq!(dec.decode_raw16().unwrap(), 0xBEEF);
        assert_eq!(dec.decode_raw16().unwrap(), 0x0001);
        assert_eq!(d.decode_symbol(&mut dec).unwrap(), 3);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let d = Distribution::from_freqs(&[PROB_TOTAL / 2; 2]).unwrap();
        let mut enc = RangeEncoder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let symbols: Vec<usize> = (0..5000).map(|_| rng.gen_range(0..2)).collect();
        for &s in &symbols {
            d.encode_symbol(&mut enc, s).unwrap();
        }
        let payload = enc.finish();
        let cut = &payload[..payload.len() / 2];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let mut failed = false;
        for _ in 0..5000 {
            if d.decode_symbol(&mut dec).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed);
    }

    #[test]
    fn symbol_out_of_alphabet_is_an_error() {
        let d = Distribution::from_freqs(&[PROB_TOTAL / 2; 2]).unwrap();
        let mut enc = RangeEncoder::new();
        assert!(matches!(
            d.encode_symbol(&mut enc, 2),
            Err(Error::SymbolOutOfAlphabet(_))
        ));
    }
}
