//! Region-adaptive hierarchical transform.
//!
//! A weight-adaptive Haar wavelet over the occupied voxels. Leaves are the
//! frame's points in Morton order; each level halves one axis in the cycle
//! x -> y -> z, merging sibling cells with the orthonormal butterfly
//!
//! ```text
//! low  = ( sqrt(w1) l1 + sqrt(w2) l2) / sqrt(w1 + w2)
//! high = (-sqrt(w2) l1 + sqrt(w1) l2) / sqrt(w1 + w2)
//! ```
//!
//! where `w1`, `w2` are the subtree point counts and the sibling with the
//! lower Morton key is first. Cells without a sibling pass their low
//! coefficient through unchanged. After `3 * depth` levels a single root
//! holds the DC; every merge contributes one high-frequency coefficient,
//! so a frame of `n` points always codes exactly `n - 1` highs. The
//! transform is orthonormal: per channel, the energy of the attributes
//! equals `dc^2` plus the summed squared highs.
//!
//! Tree structure, weights, and the coding order are pure functions of the
//! geometry, so encoder and decoder rebuild them identically from the
//! out-of-band positions.

use crate::error::{Error, Result};
use crate::frame::{morton_code, MAX_DEPTH};
use crate::scalar::Scalar;

/// Links from a node to the level below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Children {
    /// Occupied voxel; no children.
    Leaf,
    /// Single occupied sibling cell; coefficient passes through.
    One(u32),
    /// Both sibling cells occupied; indices in (low key, high key) order.
    Two(u32, u32),
}

/// One cell of the merge hierarchy.
#[derive(Debug, Clone)]
pub struct RahtNode<T: Scalar> {
    /// Level in `[0, 3 * depth]`; 0 is the leaf level.
    pub level: u16,
    /// Cell coordinates at this level's per-axis resolution.
    pub cell: [u32; 3],
    /// Number of points inside the cell.
    pub weight: u32,
    /// Weighted mean of contained voxel positions.
    pub centroid: [T; 3],
    pub children: Children,
    /// Index of the containing cell one level up; `None` only for the root.
    pub parent: Option<u32>,
}

/// The full hierarchy for one frame's geometry.
#[derive(Debug, Clone)]
pub struct RahtTree<T: Scalar> {
    pub depth: u8,
    /// Nodes, leaves first, then each level in Morton order of its cells.
    pub nodes: Vec<RahtNode<T>>,
    /// `levels[l]` is the index range of level-`l` nodes within `nodes`.
    pub levels: Vec<std::ops::Range<usize>>,
    /// Indices of merge nodes, root-to-leaf by level, Morton order within
    /// a level. This is the order high coefficients travel on the wire.
    pub coding_order: Vec<u32>,
}

impl<T: Scalar> RahtTree<T> {
    pub fn point_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn root(&self) -> u32 {
        (self.nodes.len() - 1) as u32
    }
}

/// Build the merge hierarchy for Morton-sorted unique voxel positions.
pub fn build_tree<T: Scalar>(positions: &[[u32; 3]], depth: u8) -> Result<RahtTree<T>> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::ParseError(format!(
            "depth {depth} outside supported range 1..={MAX_DEPTH}"
        )));
    }
    if positions.is_empty() {
        return Err(Error::DegenerateCloud("cannot build tree of zero points".into()));
    }
    let limit = 1u32 << depth;
    let mut nodes: Vec<RahtNode<T>> = Vec::with_capacity(positions.len() * 2);
    let mut keys: Vec<u64> = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        if p.iter().any(|&c| c >= limit) {
            return Err(Error::ParseError(format!(
                "position {p:?} outside [0, {limit}) grid"
            )));
        }
        let key = morton_code(*p);
        if let Some(&prev) = keys.last() {
            if key <= prev {
                return Err(Error::ParseError(
                    "positions not strictly Morton-ordered".into(),
                ));
            }
        }
        keys.push(key);
        let _ = i;
        nodes.push(RahtNode {
            level: 0,
            cell: *p,
            weight: 1,
            centroid: [
                T::from_f64_lossy(p[0] as f64),
                T::from_f64_lossy(p[1] as f64),
                T::from_f64_lossy(p[2] as f64),
            ],
            children: Children::Leaf,
            parent: None,
        });
    }

    let mut levels = vec![0..positions.len()];
    // Indices and level-local keys of the level currently being merged.
    let mut cur: Vec<u32> = (0..positions.len() as u32).collect();
    let mut cur_keys = keys;

    for level in 0..(3 * depth as u16) {
        let axis = (level % 3) as usize;
        let start = nodes.len();
        let mut next: Vec<u32> = Vec::with_capacity(cur.len() / 2 + 1);
        let mut next_keys: Vec<u64> = Vec::with_capacity(cur.len() / 2 + 1);
        let mut i = 0;
        while i < cur.len() {
            let a = cur[i];
            let key = cur_keys[i] >> 1;
            let merged = i + 1 < cur.len() && key == (cur_keys[i + 1] >> 1);
            let idx = nodes.len() as u32;
            let mut cell = nodes[a as usize].cell;
            cell[axis] >>= 1;
            if merged {
                let b = cur[i + 1];
                let (w1, w2) = (nodes[a as usize].weight, nodes[b as usize].weight);
                let (c1, c2) = (nodes[a as usize].centroid, nodes[b as usize].centroid);
                let t1 = T::from_f64_lossy(w1 as f64);
                let t2 = T::from_f64_lossy(w2 as f64);
                let tw = t1 + t2;
                let mut centroid = [T::zero(); 3];
                for c in 0..3 {
                    centroid[c] = (c1[c] * t1 + c2[c] * t2) / tw;
                }
                nodes[a as usize].parent = Some(idx);
                nodes[b as usize].parent = Some(idx);
                nodes.push(RahtNode {
                    level: level + 1,
                    cell,
                    weight: w1 + w2,
                    centroid,
                    children: Children::Two(a, b),
                    parent: None,
                });
                i += 2;
            } else {
                let (w, c) = (nodes[a as usize].weight, nodes[a as usize].centroid);
                nodes[a as usize].parent = Some(idx);
                nodes.push(RahtNode {
                    level: level + 1,
                    cell,
                    weight: w,
                    centroid: c,
                    children: Children::One(a),
                    parent: None,
                });
                i += 1;
            }
            next.push(idx);
            next_keys.push(key);
        }
        levels.push(start..nodes.len());
        cur = next;
        cur_keys = next_keys;
    }
    debug_assert_eq!(cur.len(), 1, "hierarchy must reduce to a single root");

    let mut coding_order = Vec::with_capacity(positions.len().saturating_sub(1));
    for level in (1..levels.len()).rev() {
        for idx in levels[level].clone() {
            if matches!(nodes[idx].children, Children::Two(_, _)) {
                coding_order.push(idx as u32);
            }
        }
    }
    debug_assert_eq!(coding_order.len(), positions.len() - 1);

    Ok(RahtTree {
        depth,
        nodes,
        levels,
        coding_order,
    })
}

/// Transform coefficients for one frame: the root low plus one high triple
/// per merge node, in coding order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientStream<T: Scalar> {
    pub dc: [T; 3],
    pub highs: Vec<[T; 3]>,
}

/// Quantized form of a [`CoefficientStream`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedStream {
    pub dc: [i32; 3],
    pub highs: Vec<[i32; 3]>,
    pub qstep: f64,
}

/// One orthonormal merge step; first argument pair is the lower-key sibling.
#[inline]
pub(crate) fn butterfly<T: Scalar>(w1: T, w2: T, l1: T, l2: T) -> (T, T) {
    let s1 = w1.sqrt();
    let s2 = w2.sqrt();
    let sw = (w1 + w2).sqrt();
    ((s1 * l1 + s2 * l2) / sw, (s2.neg() * l1 + s1 * l2) / sw)
}

#[inline]
fn butterfly_inverse<T: Scalar>(w1: T, w2: T, low: T, high: T) -> (T, T) {
    let s1 = w1.sqrt();
    let s2 = w2.sqrt();
    let sw = (w1 + w2).sqrt();
    ((s1 * low - s2 * high) / sw, (s2 * low + s1 * high) / sw)
}

/// Forward transform of per-point attribute triples in leaf (frame) order.
pub fn forward<T: Scalar>(
    tree: &RahtTree<T>,
    attributes: &[[T; 3]],
) -> Result<CoefficientStream<T>> {
    let n = tree.point_count();
    if attributes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} attributes for a {}-leaf tree",
            attributes.len(),
            n
        )));
    }
    let (lows, highs_by_node) = forward_lows(tree, attributes);
    let highs = tree
        .coding_order
        .iter()
        .map(|&idx| highs_by_node[idx as usize])
        .collect();
    Ok(CoefficientStream {
        dc: lows[tree.root() as usize],
        highs,
    })
}

/// Low coefficients for every node plus the high at each merge node, both
/// indexed by node id. Shared by the forward transform and the context
/// builder, which needs per-node coefficient placement rather than the wire
/// order. `attributes` must be leaf-ordered with one triple per point.
pub fn forward_lows<T: Scalar>(
    tree: &RahtTree<T>,
    attributes: &[[T; 3]],
) -> (Vec<[T; 3]>, Vec<[T; 3]>) {
    let n = tree.point_count();
    let total = tree.nodes.len();
    let mut lows = vec![[T::zero(); 3]; total];
    let mut highs = vec![[T::zero(); 3]; total];
    lows[..n].copy_from_slice(attributes);
    for idx in n..total {
        match tree.nodes[idx].children {
            Children::Leaf => unreachable!(),
            Children::One(a) => lows[idx] = lows[a as usize],
            Children::Two(a, b) => {
                let w1 = T::from_f64_lossy(tree.nodes[a as usize].weight as f64);
                let w2 = T::from_f64_lossy(tree.nodes[b as usize].weight as f64);
                for c in 0..3 {
                    let (l, h) = butterfly(w1, w2, lows[a as usize][c], lows[b as usize][c]);
                    lows[idx][c] = l;
                    highs[idx][c] = h;
                }
            }
        }
    }
    (lows, highs)
}

/// Inverse transform back to per-point attribute triples in leaf order.
pub fn inverse<T: Scalar>(
    tree: &RahtTree<T>,
    coefficients: &CoefficientStream<T>,
) -> Result<Vec<[T; 3]>> {
    let n = tree.point_count();
    if coefficients.highs.len() != n - 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} highs for a tree with {} merges",
            coefficients.highs.len(),
            n - 1
        )));
    }
    let total = tree.nodes.len();
    let mut highs_by_node = vec![[T::zero(); 3]; total];
    for (&idx, h) in tree.coding_order.iter().zip(&coefficients.highs) {
        highs_by_node[idx as usize] = *h;
    }
    let mut lows = vec![[T::zero(); 3]; total];
    lows[tree.root() as usize] = coefficients.dc;
    for idx in (n..total).rev() {
        match tree.nodes[idx].children {
            Children::Leaf => unreachable!(),
            Children::One(a) => lows[a as usize] = lows[idx],
            Children::Two(a, b) => {
                let w1 = T::from_f64_lossy(tree.nodes[a as usize].weight as f64);
                let w2 = T::from_f64_lossy(tree.nodes[b as usize].weight as f64);
                for c in 0..3 {
                    let (l1, l2) = butterfly_inverse(w1, w2, lows[idx][c], highs_by_node[idx][c]);
                    lows[a as usize][c] = l1;
                    lows[b as usize][c] = l2;
                }
            }
        }
    }
    lows.truncate(n);
    Ok(lows)
}

/// Uniform scalar quantization, rounding half away from zero. Fails with
/// [`Error::Overflow`] when a quantized value leaves the signed 32-bit
/// range instead of silently wrapping.
pub fn quantize<T: Scalar>(
    coefficients: &CoefficientStream<T>,
    qstep: f64,
) -> Result<QuantizedStream> {
    if !(qstep > 0.0) {
        return Err(Error::ParseError(format!("qstep {qstep} must be positive")));
    }
    let q = |v: T| -> Result<i32> {
        let k = (v.to_f64_lossy() / qstep).round();
        if k.abs() > i32::MAX as f64 {
            return Err(Error::Overflow(format!(
                "coefficient {} at qstep {qstep} exceeds i32",
                v.to_f64_lossy()
            )));
        }
        Ok(k as i32)
    };
    let mut dc = [0i32; 3];
    for c in 0..3 {
        dc[c] = q(coefficients.dc[c])?;
    }
    let mut highs = Vec::with_capacity(coefficients.highs.len());
    for h in &coefficients.highs {
        highs.push([q(h[0])?, q(h[1])?, q(h[2])?]);
    }
    Ok(QuantizedStream { dc, highs, qstep })
}

/// Midpoint reconstruction: `k * qstep`.
pub fn dequantize<T: Scalar>(stream: &QuantizedStream) -> CoefficientStream<T> {
    let d = |k: i32| T::from_f64_lossy(k as f64 * stream.qstep);
    CoefficientStream {
        dc: [d(stream.dc[0]), d(stream.dc[1]), d(stream.dc[2])],
        highs: stream
            .highs
            .iter()
            .map(|h| [d(h[0]), d(h[1]), d(h[2])])
            .collect(),
    }
}
