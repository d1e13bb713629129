//! Full-range BT.709 color conversion.
//!
//! Attributes travel through the codec as real YUV triples in `[0, 255]`.
//! The conversion is pinned to full-range BT.709 so every implementation
//! produces identical attribute planes:
//!
//! ```text
//! Y = 0.2126 R + 0.7152 G + 0.0722 B
//! U = (B - Y) / 1.8556 + 128
//! V = (R - Y) / 1.5748 + 128
//! ```
//!
//! U and V are clamped to `[0, 255]`, which loses up to half a code at the
//! most saturated corners (pure red/blue); round trips are exact everywhere
//! else and within one code there.

use crate::scalar::Scalar;

const KR: f64 = 0.2126;
const KG: f64 = 0.7152;
const KB: f64 = 0.0722;
const U_SCALE: f64 = 1.8556;
const V_SCALE: f64 = 1.5748;

/// 8-bit RGB to real full-range YUV, channels clamped to `[0, 255]`.
pub fn rgb_to_yuv<T: Scalar>(rgb: [u8; 3]) -> [T; 3] {
    let yuv = rgb_real_to_yuv([rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]);
    [
        T::from_f64_lossy(yuv[0].clamp(0.0, 255.0)),
        T::from_f64_lossy(yuv[1].clamp(0.0, 255.0)),
        T::from_f64_lossy(yuv[2].clamp(0.0, 255.0)),
    ]
}

/// Real YUV back to 8-bit RGB, rounded and clamped.
pub fn yuv_to_rgb<T: Scalar>(yuv: [T; 3]) -> [u8; 3] {
    let rgb = yuv_real_to_rgb([
        yuv[0].to_f64_lossy(),
        yuv[1].to_f64_lossy(),
        yuv[2].to_f64_lossy(),
    ]);
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    [q(rgb[0]), q(rgb[1]), q(rgb[2])]
}

/// Linear forward map without clamping. Internal: the decoded-frame writer
/// and evaluator use the unclamped pair so reconstructions survive a file
/// round trip at float precision.
pub(crate) fn rgb_real_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let y = KR * rgb[0] + KG * rgb[1] + KB * rgb[2];
    let u = (rgb[2] - y) / U_SCALE + 128.0;
    let v = (rgb[0] - y) / V_SCALE + 128.0;
    [y, u, v]
}

/// Linear inverse map without rounding or clamping.
pub(crate) fn yuv_real_to_rgb(yuv: [f64; 3]) -> [f64; 3] {
    let y = yuv[0];
    let b = (yuv[1] - 128.0) * U_SCALE + y;
    let r = (yuv[2] - 128.0) * V_SCALE + y;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_maps_to_neutral_chroma() {
        let yuv: [f64; 3] = rgb_to_yuv([255, 255, 255]);
        assert!((yuv[0] - 255.0).abs() < 1e-12);
        assert!((yuv[1] - 128.0).abs() < 1e-12);
        assert!((yuv[2] - 128.0).abs() < 1e-12);
    }

    #[test]
    fn black_maps_to_neutral_chroma() {
        let yuv: [f64; 3] = rgb_to_yuv([0, 0, 0]);
        assert_eq!(yuv, [0.0, 128.0, 128.0]);
    }

    #[test]
    fn roundtrip_within_one_code_on_rgb_grid() {
        // 8x8x8 grid over the full cube, corners included.
        let levels: Vec<u8> = (0..8).map(|i| (i * 255 / 7) as u8).collect();
        for &r in &levels {
            for &g in &levels {
                for &b in &levels {
                    let yuv: [f64; 3] = rgb_to_yuv([r, g, b]);
                    let back = yuv_to_rgb(yuv);
                    assert!(
                        (back[0] as i32 - r as i32).abs() <= 1
                            && (back[1] as i32 - g as i32).abs() <= 1
                            && (back[2] as i32 - b as i32).abs() <= 1,
                        "({r},{g},{b}) -> {yuv:?} -> {back:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn roundtrip_exact_away_from_gamut_edges() {
        for r in (1..255).step_by(16) {
            for g in (1..255).step_by(16) {
                for b in (1..255).step_by(16) {
                    let rgb = [r as u8, g as u8, b as u8];
                    let yuv: [f64; 3] = rgb_to_yuv(rgb);
                    assert_eq!(yuv_to_rgb(yuv), rgb);
                }
            }
        }
    }

    #[test]
    fn unclamped_pair_inverts_exactly() {
        let yuv = [13.25, 201.5, 77.75];
        let rgb = yuv_real_to_rgb(yuv);
        let back = rgb_real_to_yuv(rgb);
        for c in 0..3 {
            assert!((back[c] - yuv[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_instantiation_matches_f64_closely() {
        let a: [f32; 3] = rgb_to_yuv([12, 200, 31]);
        let b: [f64; 3] = rgb_to_yuv([12, 200, 31]);
        for c in 0..3 {
            assert!((a[c] as f64 - b[c]).abs() < 1e-4);
        }
    }
}
