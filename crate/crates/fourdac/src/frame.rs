//! Point cloud containers, Morton ordering, and voxelization.
//!
//! Everything downstream of ingest works on [`PointFrame`]: integer voxel
//! positions on a `2^depth` grid, sorted by Morton code, with one real YUV
//! attribute triple per occupied voxel. Morton order is the single total
//! order the whole pipeline derives from; it is what makes tree
//! construction, neighbor tie-breaks, and coding order reproducible on
//! both sides of the wire.

use crate::color::rgb_to_yuv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Raw ingest form: real positions and 8-bit RGB colors, straight from PLY.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPointCloud<T: Scalar> {
    pub positions: Vec<[T; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl<T: Scalar> RawPointCloud<T> {
    pub fn new(positions: Vec<[T; 3]>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::DegenerateCloud("cloud has no points".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::LengthMismatch(format!(
                "{} positions vs {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions
            .iter()
            .any(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::DegenerateCloud(
                "cloud contains non-finite coordinates".into(),
            ));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Voxelized frame: unique integer positions on a `[0, 2^depth)^3` grid in
/// Morton order, one YUV attribute triple per voxel, channels in `[0, 255]`
/// for real content (reconstructions may stray slightly outside).
#[derive(Debug, Clone, PartialEq)]
pub struct PointFrame<T: Scalar> {
    pub frame_index: u32,
    pub depth: u8,
    pub positions: Vec<[u32; 3]>,
    pub attributes: Vec<[T; 3]>,
}

/// Voxelization depths are capped so three interleaved axes fit a `u64`
/// Morton key with headroom; the codec never needs more than 16.
pub const MAX_DEPTH: u8 = 16;

impl<T: Scalar> PointFrame<T> {
    /// Validating constructor. Positions must be in range for `depth`,
    /// strictly increasing in Morton order (hence unique), and paired
    /// one-to-one with attributes.
    pub fn new(
        frame_index: u32,
        depth: u8,
        positions: Vec<[u32; 3]>,
        attributes: Vec<[T; 3]>,
    ) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::ParseError(format!(
                "depth {depth} outside supported range 1..={MAX_DEPTH}"
            )));
        }
        if positions.is_empty() {
            return Err(Error::DegenerateCloud("frame has no points".into()));
        }
        if positions.len() != attributes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} positions vs {} attributes",
                positions.len(),
                attributes.len()
            )));
        }
        let limit = 1u32 << depth;
        let mut prev_key = None;
        for p in &positions {
            if p.iter().any(|&c| c >= limit) {
                return Err(Error::ParseError(format!(
                    "position {p:?} outside [0, {limit}) grid"
                )));
            }
            let key = morton_code(*p);
            if let Some(prev) = prev_key {
                if key <= prev {
                    return Err(Error::ParseError(
                        "positions not strictly Morton-ordered".into(),
                    ));
                }
            }
            prev_key = Some(key);
        }
        Ok(Self {
            frame_index,
            depth,
            positions,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions as real vectors, for neighbor queries and warping.
    pub fn positions_real(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }

    /// Attributes converted to `f64` triples regardless of `T`.
    pub fn attributes_f64(&self) -> Vec<[f64; 3]> {
        self.attributes
            .iter()
            .map(|a| [a[0].to_f64_lossy(), a[1].to_f64_lossy(), a[2].to_f64_lossy()])
            .collect()
    }
}

/// Interleave the low 21 bits of one coordinate into every third bit.
#[inline]
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Morton (Z-order) key of a voxel position. Bit 0 is the low x bit, bit 1
/// the low y bit, bit 2 the low z bit, and so on: the axis cycle matches
/// the transform's x -> y -> z merge order, so nodes that merge at level
/// `l+1` are exactly the key pairs equal in `key >> (l+1)`.
#[inline]
pub fn morton_code(p: [u32; 3]) -> u64 {
    debug_assert!(p.iter().all(|&c| c < (1 << 21)), "coordinate overflows Morton key");
    spread_bits(p[0] as u64) | (spread_bits(p[1] as u64) << 1) | (spread_bits(p[2] as u64) << 2)
}

/// Min-max normalize onto the `[0, 2^depth)` grid, floor, merge voxel
/// collisions by arithmetic attribute mean, and sort by Morton code.
///
/// The uniform scale is `(2^depth - 1) / max_extent`, which maps the widest
/// axis exactly onto `[0, 2^depth - 1]`; re-voxelizing the output at the
/// same depth is therefore the identity. A cloud whose bounding box has
/// zero extent on all axes collapses to a single voxel at the origin.
pub fn voxelize<T: Scalar>(
    cloud: &RawPointCloud<T>,
    depth: u8,
    frame_index: u32,
) -> Result<PointFrame<T>> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::ParseError(format!(
            "depth {depth} outside supported range 1..={MAX_DEPTH}"
        )));
    }
    if cloud.positions.is_empty() {
        return Err(Error::DegenerateCloud("cloud has no points".into()));
    }
    if cloud.positions.len() != cloud.colors.len() {
        return Err(Error::LengthMismatch(format!(
            "{} positions vs {} colors",
            cloud.positions.len(),
            cloud.colors.len()
        )));
    }

    let mut min = cloud.positions[0];
    let mut max = cloud.positions[0];
    for p in &cloud.positions {
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(Error::DegenerateCloud(
                    "cloud contains non-finite coordinates".into(),
                ));
            }
            if p[a] < min[a] {
                min[a] = p[a];
            }
            if p[a] > max[a] {
                max[a] = p[a];
            }
        }
    }
    let extent = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    let max_extent = extent[0].max(extent[1]).max(extent[2]);

    let top = (1u32 << depth) - 1;
    let scale = if max_extent > T::zero() {
        T::from_f64_lossy(top as f64) / max_extent
    } else {
        T::zero() // all points coincide; everything maps to the origin
    };

    let mut keyed: Vec<(u64, u32)> = Vec::with_capacity(cloud.positions.len());
    for (i, p) in cloud.positions.iter().enumerate() {
        let mut cell = [0u32; 3];
        for a in 0..3 {
            let v = ((p[a] - min[a]) * scale).floor();
            let v = <u32 as num_traits::NumCast>::from(v).unwrap_or(0);
            cell[a] = v.min(top);
        }
        keyed.push((morton_code(cell), i as u32));
    }
    keyed.sort_unstable();

    let mut positions = Vec::new();
    let mut attributes: Vec<[T; 3]> = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let key = keyed[i].0;
        let mut sum = [T::zero(); 3];
        let mut count = 0usize;
        while i < keyed.len() && keyed[i].0 == key {
            let yuv: [T; 3] = rgb_to_yuv(cloud.colors[keyed[i].1 as usize]);
            for c in 0..3 {
                sum[c] = sum[c] + yuv[c];
            }
            count += 1;
            i += 1;
        }
        let n = T::from_f64_lossy(count as f64);
        positions.push(cell_of_key(key));
        attributes.push([sum[0] / n, sum[1] / n, sum[2] / n]);
    }

    PointFrame::new(frame_index, depth, positions, attributes)
}

/// Inverse of [`morton_code`] for keys built from in-range coordinates.
pub(crate) fn cell_of_key(key: u64) -> [u32; 3] {
    let mut cell = [0u32; 3];
    for bit in 0..21 {
        for a in 0..3 {
            cell[a] |= (((key >> (3 * bit + a)) & 1) as u32) << bit;
        }
    }
    cell
}
