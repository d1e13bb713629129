//! Adaptive Run-Length Golomb-Rice coding of signed integers.
//!
//! Two modes, switched by the scaled run parameter `k = kp >> 3`: run mode
//! (k ≥ 1) codes up to `2^k` zeros with a single bit and escapes nonzero
//! values as sign + Golomb-Rice magnitude; direct mode (k = 0) zig-zag maps
//! each value (0, −1, 1, −2, … → 0, 1, 2, 3, …) and Golomb-Rice codes it.
//! Both `kp` and the Rice parameter's `krp` adapt with the published
//! fixed-point constants below. The decoder needs the symbol count up front:
//! a stream may legitimately end inside a partial run of zeros.

use crate::coder::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};

const LSGR: u32 = 3;
const KPMAX: u32 = 80;
const UP_GR: u32 = 4;
const DN_GR: u32 = 6;
const UQ_GR: u32 = 3;
const DQ_GR: u32 = 3;

fn code_gr(w: &mut BitWriter, krp: &mut u32, val: u32) {
    let kr = *krp >> LSGR;
    let vk = val >> kr;
    w.push_ones(vk as u64);
    w.push_bit(0);
    if kr > 0 {
        w.push_bits(val & ((1 << kr) - 1), kr);
    }
    if vk == 0 {
        *krp = krp.saturating_sub(2);
    } else if vk > 1 {
        *krp = (*krp as u64 + vk as u64).min(KPMAX as u64) as u32;
    }
}

fn decode_gr(r: &mut BitReader, krp: &mut u32) -> Result<u32> {
    let kr = *krp >> LSGR;
    let mut vk = 0u64;
    while r.read_bit()? == 1 {
        vk += 1;
    }
    let rem = if kr > 0 { r.read_bits(kr)? } else { 0 };
    let val = (vk << kr) | rem as u64;
    if val > u32::MAX as u64 {
        return Err(Error::ParseError("Golomb-Rice magnitude overflow".into()));
    }
    if vk == 0 {
        *krp = krp.saturating_sub(2);
    } else if vk > 1 {
        *krp = (*krp as u64 + vk).min(KPMAX as u64) as u32;
    }
    Ok(val as u32)
}

/// Encodes a signed stream; the decoder must be told `values.len()`.
pub fn rlgr_encode(values: &[i32]) -> Vec<u8> {
    let mut w = BitWriter::new();
    let mut kp: u32 = 1 << LSGR;
    let mut krp: u32 = 1 << LSGR;
    let mut i = 0usize;
    while i < values.len() {
        let k = kp >> LSGR;
        if k > 0 {
            let runmax = 1u64 << k;
            let mut run = 0u64;
            while run < runmax && i < values.len() && values[i] == 0 {
                run += 1;
                i += 1;
            }
            if run == runmax {
                w.push_bit(0);
                kp = (kp + UP_GR).min(KPMAX);
            } else {
                w.push_bit(1);
                w.push_bits(run as u32, k);
                if i < values.len() {
                    let x = values[i] as i64;
                    i += 1;
                    w.push_bit((x < 0) as u32);
                    code_gr(&mut w, &mut krp, (x.unsigned_abs() - 1) as u32);
                    kp = kp.saturating_sub(DN_GR);
                }
                // Input exhausted mid-run: the partial marker and run length
                // are enough, the decoder stops at its expected count.
            }
        } else {
            let x = values[i] as i64;
            i += 1;
            let u = if x < 0 { 2 * (-x) - 1 } else { 2 * x } as u64;
            code_gr(&mut w, &mut krp, u as u32);
            if u == 0 {
                kp = (kp + UQ_GR).min(KPMAX);
            } else {
                kp = kp.saturating_sub(DQ_GR);
            }
        }
    }
    w.finish()
}

/// Decodes exactly `count` values from `bytes`.
pub fn rlgr_decode(bytes: &[u8], count: usize) -> Result<Vec<i32>> {
    let mut r = BitReader::new(bytes);
    let mut out: Vec<i32> = Vec::with_capacity(count);
    let mut kp: u32 = 1 << LSGR;
    let mut krp: u32 = 1 << LSGR;
    while out.len() < count {
        let k = kp >> LSGR;
        if k > 0 {
            if r.read_bit()? == 0 {
                for _ in 0..1u64 << k {
                    out.push(0);
                }
                kp = (kp + UP_GR).min(KPMAX);
            } else {
                let run = r.read_bits(k)?;
                for _ in 0..run {
                    out.push(0);
                }
                if out.len() >= count {
                    break;
                }
                let sign = r.read_bit()?;
                let mag = decode_gr(&mut r, &mut krp)? as i64 + 1;
                let x = if sign == 1 { -mag } else { mag };
                if x < i32::MIN as i64 || x > i32::MAX as i64 {
                    return Err(Error::ParseError("decoded value outside i32".into()));
                }
                out.push(x as i32);
                kp = kp.saturating_sub(DN_GR);
            }
        } else {
            let u = decode_gr(&mut r, &mut krp)? as u64;
            let x = if u % 2 == 1 {
                -((u as i64 + 1) / 2)
            } else {
                u as i64 / 2
            };
            out.push(x as i32);
            if u == 0 {
                kp = (kp + UQ_GR).min(KPMAX);
            } else {
                kp = kp.saturating_sub(DQ_GR);
            }
        }
    }
    if out.len() != count {
        return Err(Error::ParseError(
            "run-length payload overruns its symbol count".into(),
        ));
    }
    Ok(out)
}
