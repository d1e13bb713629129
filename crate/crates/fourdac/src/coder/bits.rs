//! MSB-first bit-level IO used by the Golomb-Rice coder.

use crate::error::{Error, Result};

/// Accumulates bits most-significant-first into a byte vector.
#[derive(Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    pub fn new() -> BitWriter {
        BitWriter::default()
    }

    /// Appends a single bit (any nonzero `bit` counts as one).
    pub fn push_bit(&mut self, bit: u32) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit != 0 {
            let last = self.bytes.last_mut().unwrap();
            *last |= 1 << (7 - self.used);
        }
        self.used = (self.used + 1) % 8;
    }

    /// Appends the low `count` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u32, count: u32) {
        assert!(count <= 32);
        for i in (0..count).rev() {
            self.push_bit((value >> i) & 1);
        }
    }

    /// Appends `count` one bits.
    pub fn push_ones(&mut self, count: u64) {
        for _ in 0..count {
            self.push_bit(1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        let whole = self.bytes.len() as u64 * 8;
        if self.used == 0 {
            whole
        } else {
            whole - 8 + self.used as u64
        }
    }

    /// Zero-pads the final partial byte and returns the buffer.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// Reads bits most-significant-first; running past the end is
/// `TruncatedPayload`.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> BitReader<'a> {
        BitReader { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<u32> {
        let byte = (self.pos / 8) as usize;
        if byte >= self.bytes.len() {
            return Err(Error::TruncatedPayload(
                "bit reader ran past end of payload".into(),
            ));
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos % 8) as u32)) & 1;
        self.pos += 1;
        Ok(bit as u32)
    }

    pub fn read_bits(&mut self, count: u32) -> Result<u32> {
        assert!(count <= 32);
        let mut v = 0u32;
        for _ in 0..count {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bits_come_back_in_order() {
        let mut w = BitWriter::new();
        w.push_bit(1);
        w.push_bits(0b0110, 4);
        w.push_bit(0);
        assert_eq!(w.bit_len(), 6);
        let bytes = w.finish();
        assert_eq!(bytes, vec![0b1011_0000]);
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read_bit().unwrap(), 1);
        assert_eq!(r.read_bits(4).unwrap(), 0b0110);
        assert_eq!(r.read_bit().unwrap(), 0);
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let mut w = BitWriter::new();
            let items: Vec<(u32, u32)> = (0..rng.gen_range(0..200))
                .map(|_| {
                    let count = rng.gen_range(1..=32);
                    (rng.gen::<u32>() & (u32::MAX >> (32 - count)), count)
                })
                .collect();
            for &(v, c) in &items {
                w.push_bits(v, c);
            }
            let bytes = w.finish();
            let mut r = BitReader::new(&bytes);
            for &(v, c) in &items {
                assert_eq!(r.read_bits(c).unwrap(), v);
            }
        }
    }

    #[test]
    fn reading_past_end_is_an_error() {
        let mut w = BitWriter::new();
        w.push_bits(0b101, 3);
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        r.read_bits(8).unwrap();
        assert!(matches!(r.read_bit(), Err(Error::TruncatedPayload(_))));
    }

    #[test]
    fn ones_runs_count() {
        let mut w = BitWriter::new();
        w.push_ones(9);
        w.push_bit(0);
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for _ in 0..9 {
            assert_eq!(r.read_bit().unwrap(), 1);
        }
        assert_eq!(r.read_bit().unwrap(), 0);
    }
}
