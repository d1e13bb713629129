//! Motion estimation, compensation, and nearest-neighbor prediction.
//!
//! Nothing in this module needs current-frame attributes except residual
//! formation itself: estimation and compensation read only the previous
//! frame's reconstruction and the current geometry, so the decoder replays
//! them bit-identically from the model file and no motion vectors travel in
//! the bitstream.
//!
//! Both learned networks share one architecture: two rounds of k-nearest
//! neighbor aggregation (a shared MLP per neighbor, element-wise max pool),
//! the first round across frames, the second within the current frame, then
//! a head mapping the concatenated round features to a per-point 3-vector.
//! The head output is multiplied by a learnable per-axis scale initialized
//! to zero, so a fresh model is exactly neutral: V = 0 and a_p = a_w.

use crate::error::{Error, Result};
use crate::frame::PointFrame;
use crate::knn::GridIndex;
use crate::nnet::mlp::{set_aggregate, set_aggregate_backward, Mlp, MlpTrace, SetTrace};
use crate::raht::{Children, RahtTree};
use crate::synth::FlowGroundTruth;
use rand::Rng;

/// Neighbors aggregated per round.
pub const MOTION_K: usize = 8;

/// Feature width flowing between rounds.
const FEAT: usize = 32;

/// Per-point motion vectors in voxel units, direction current to previous.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub vectors: Vec<[f64; 3]>,
}

/// Everything the prediction step produces for one frame. All lists run in
/// current-frame point order. `a_p` is intentionally unclamped so the
/// residual is exactly recoverable; `residual` exists only when the encoder
/// supplied the original attributes.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub a_nn: Vec<[f64; 3]>,
    pub warped_geometry: Vec<[f64; 3]>,
    pub a_w: Vec<[f64; 3]>,
    pub a_p: Vec<[f64; 3]>,
    pub residual: Option<Vec<[f64; 3]>>,
}

/// Two aggregation rounds plus a head; one instance each for estimation
/// (vector output in voxels) and compensation (attribute refinement).
#[derive(Debug, Clone)]
pub struct MotionNet {
    /// Cross-frame round: `[prev_attr/255, Δpos/2^depth, anchor_attr/255]`.
    pub round1: Mlp,
    /// Intra-frame round: `[h1_j, Δpos/2^depth]`.
    pub round2: Mlp,
    /// `[h1_i ⊕ h2_i]` to a raw 3-vector.
    pub head: Mlp,
    /// Per-axis output scale; zero keeps the network silent.
    pub scale: Vec<f64>,
}

impl MotionNet {
    pub fn zeros() -> MotionNet {
        MotionNet {
            round1: Mlp::zeros(&[9, FEAT, FEAT, FEAT]),
            round2: Mlp::zeros(&[FEAT + 3, FEAT, FEAT, FEAT]),
            head: Mlp::zeros(&[2 * FEAT, FEAT, FEAT, 3]),
            scale: vec![0.0; 3],
        }
    }

    /// Random weights with the scale still zero: the network stays neutral
    /// until training moves the scale, but gradients can flow from step one.
    pub fn random(rng: &mut impl Rng) -> MotionNet {
        MotionNet {
            round1: Mlp::random(&[9, FEAT, FEAT, FEAT], rng),
            round2: Mlp::random(&[FEAT + 3, FEAT, FEAT, FEAT], rng),
            head: Mlp::random(&[2 * FEAT, FEAT, FEAT, 3], rng),
            scale: vec![0.0; 3],
        }
    }

    pub fn zeros_like(&self) -> MotionNet {
        MotionNet {
            round1: self.round1.zeros_like(),
            round2: self.round2.zeros_like(),
            head: self.head.zeros_like(),
            scale: vec![0.0; 3],
        }
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Vec<f64>)) {
        self.round1.visit_tensors(f);
        self.round2.visit_tensors(f);
        self.head.visit_tensors(f);
        f(&self.scale);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        self.round1.visit_tensors_mut(f);
        self.round2.visit_tensors_mut(f);
        self.head.visit_tensors_mut(f);
        f(&mut self.scale);
    }
}

/// Forward bookkeeping for one frame pass, kept so training can run the
/// exact reverse pass without re-deriving neighborhoods.
pub struct MotionTrace {
    r1: Vec<SetTrace>,
    r2: Vec<SetTrace>,
    r2_neighbors: Vec<Vec<u32>>,
    head: Vec<MlpTrace>,
    raw: Vec<[f64; 3]>,
}

/// Attributes of the Euclidean-nearest previous point for each query; ties
/// go to the lower point index, which is the lower Morton key in a frame.
pub fn nn_attributes(prev: &PointFrame<f64>, queries: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let index = GridIndex::new(&prev.positions_real());
    nn_attributes_indexed(&index, &prev.attributes, queries)
}

fn nn_attributes_indexed(
    index: &GridIndex,
    attrs: &[[f64; 3]],
    queries: &[[f64; 3]],
) -> Vec<[f64; 3]> {
    queries
        .iter()
        .map(|&q| attrs[index.nearest(q, 1)[0].0 as usize])
        .collect()
}

/// Training-target flow without annotations: for each current point, the
/// displacement to its best previous match under
/// `‖Δxyz‖² + color_weight·‖Δyuv‖²`, ties to the lower Morton index.
pub fn pseudo_motion(
    prev: &PointFrame<f64>,
    cur: &PointFrame<f64>,
    color_weight: f64,
) -> FlowGroundTruth {
    let index = GridIndex::with_colors(&prev.positions_real(), &prev.attributes);
    let vectors = cur
        .positions
        .iter()
        .zip(&cur.attributes)
        .map(|(&p, &a)| {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            let j = index.nearest_colored(q, a, color_weight, 1)[0].0 as usize;
            let m = prev.positions[j];
            [
                m[0] as f64 - q[0],
                m[1] as f64 - q[1],
                m[2] as f64 - q[2],
            ]
        })
        .collect();
    FlowGroundTruth { vectors }
}

/// Shared two-round pass: raw per-point 3-vectors before output scaling.
fn two_round(
    net: &MotionNet,
    prev: &PointFrame<f64>,
    prev_index: &GridIndex,
    queries: &[[f64; 3]],
    anchor_attrs: &[[f64; 3]],
) -> Result<(Vec<[f64; 3]>, MotionTrace)> {
    if queries.len() != anchor_attrs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} queries vs {} anchor attributes",
            queries.len(),
            anchor_attrs.len()
        )));
    }
    let pos_scale = (1u64 << prev.depth) as f64;
    let prev_pos = prev.positions_real();
    let n = queries.len();

    let mut h1: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r1 = Vec::with_capacity(n);
    for i in 0..n {
        let q = queries[i];
        let items: Vec<Vec<f64>> = prev_index
            .nearest(q, MOTION_K)
            .iter()
            .map(|&(j, _)| {
                let j = j as usize;
                let mut item = Vec::with_capacity(9);
                for c in 0..3 {
                    item.push(prev.attributes[j][c] / 255.0);
                }
                for c in 0..3 {
                    item.push((prev_pos[j][c] - q[c]) / pos_scale);
                }
                for c in 0..3 {
                    item.push(anchor_attrs[i][c] / 255.0);
                }
                item
            })
            .collect();
        let (out, trace) = set_aggregate(&net.round1, &items)?;
        h1.push(out);
        r1.push(trace);
    }

    let cur_index = GridIndex::new(queries);
    let mut raw = Vec::with_capacity(n);
    let mut r2 = Vec::with_capacity(n);
    let mut r2_neighbors = Vec::with_capacity(n);
    let mut head_traces = Vec::with_capacity(n);
    for i in 0..n {
        let q = queries[i];
        let nbrs = cur_index.nearest(q, MOTION_K);
        let items: Vec<Vec<f64>> = nbrs
            .iter()
            .map(|&(j, _)| {
                let j = j as usize;
                let mut item = Vec::with_capacity(FEAT + 3);
                item.extend_from_slice(&h1[j]);
                for c in 0..3 {
                    item.push((queries[j][c] - q[c]) / pos_scale);
                }
                item
            })
            .collect();
        let (h2, trace2) = set_aggregate(&net.round2, &items)?;
        let mut cat = Vec::with_capacity(2 * FEAT);
        cat.extend_from_slice(&h1[i]);
        cat.extend_from_slice(&h2);
        let (out, ht) = net.head.forward_traced(&cat)?;
        raw.push([out[0], out[1], out[2]]);
        r2.push(trace2);
        r2_neighbors.push(nbrs.iter().map(|&(j, _)| j).collect());
        head_traces.push(ht);
    }

    let raw_copy = raw.clone();
    Ok((
        raw,
        MotionTrace {
            r1,
            r2,
            r2_neighbors,
            head: head_traces,
            raw: raw_copy,
        },
    ))
}

/// Reverse pass of [`two_round`]: accumulates parameter gradients given the
/// loss gradient on the raw (pre-scale) outputs.
fn two_round_backward(
    net: &MotionNet,
    trace: &MotionTrace,
    draw: &[[f64; 3]],
    grads: &mut MotionNet,
) {
    let n = trace.raw.len();
    let mut dh1: Vec<Vec<f64>> = vec![vec![0.0; FEAT]; n];
    let mut dh2: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let dcat = net.head.backward(&trace.head[i], &draw[i], &mut grads.head);
        for c in 0..FEAT {
            dh1[i][c] += dcat[c];
        }
        dh2.push(dcat[FEAT..].to_vec());
    }
    // Round 2 fans gradient out to every neighbor's h1, so it must finish
    // entirely before round 1 consumes dh1.
    for i in 0..n {
        let dins = set_aggregate_backward(&net.round2, &trace.r2[i], &dh2[i], &mut grads.round2);
        for (m, din) in dins.iter().enumerate() {
            let j = trace.r2_neighbors[i][m] as usize;
            for c in 0..FEAT {
                dh1[j][c] += din[c];
            }
        }
    }
    for i in 0..n {
        set_aggregate_backward(&net.round1, &trace.r1[i], &dh1[i], &mut grads.round1);
    }
}

/// Per-point motion from previous reconstruction plus current geometry.
/// Output in voxel units: `V = raw ⊙ scale · 2^depth`.
pub fn estimate_motion(
    net: &MotionNet,
    prev: &PointFrame<f64>,
    cur_positions: &[[f64; 3]],
    a_nn: &[[f64; 3]],
) -> Result<MotionField> {
    estimate_motion_traced(net, prev, cur_positions, a_nn).map(|(m, _)| m)
}

/// [`estimate_motion`] keeping the trace for a training reverse pass.
pub fn estimate_motion_traced(
    net: &MotionNet,
    prev: &PointFrame<f64>,
    cur_positions: &[[f64; 3]],
    a_nn: &[[f64; 3]],
) -> Result<(MotionField, MotionTrace)> {
    let prev_index = GridIndex::new(&prev.positions_real());
    let (raw, trace) = two_round(net, prev, &prev_index, cur_positions, a_nn)?;
    let pos_scale = (1u64 << prev.depth) as f64;
    let vectors = raw
        .iter()
        .map(|r| {
            [
                r[0] * net.scale[0] * pos_scale,
                r[1] * net.scale[1] * pos_scale,
                r[2] * net.scale[2] * pos_scale,
            ]
        })
        .collect();
    Ok((MotionField { vectors }, trace))
}

/// Accumulates gradients of a loss on the motion field into `grads`.
pub fn estimate_motion_backward(
    net: &MotionNet,
    depth: u8,
    trace: &MotionTrace,
    dv: &[[f64; 3]],
    grads: &mut MotionNet,
) {
    let pos_scale = (1u64 << depth) as f64;
    let mut draw = vec![[0.0f64; 3]; dv.len()];
    for i in 0..dv.len() {
        for c in 0..3 {
            grads.scale[c] += dv[i][c] * trace.raw[i][c] * pos_scale;
            draw[i][c] = dv[i][c] * net.scale[c] * pos_scale;
        }
    }
    two_round_backward(net, trace, &draw, grads);
}

/// Warp, re-predict, refine: `G_w = G + V`, `a_w = nn(prev, G_w)` with
/// real-valued queries against the integer previous positions, and
/// `a_p = a_w + raw ⊙ scale · 255`.
pub fn compensate(
    net: &MotionNet,
    prev: &PointFrame<f64>,
    cur_positions: &[[f64; 3]],
    a_nn: &[[f64; 3]],
    motion: &MotionField,
    original: Option<&[[f64; 3]]>,
) -> Result<PredictionBundle> {
    compensate_traced(net, prev, cur_positions, a_nn, motion, original).map(|(b, _)| b)
}

/// [`compensate`] keeping the trace for a training reverse pass.
pub fn compensate_traced(
    net: &MotionNet,
    prev: &PointFrame<f64>,
    cur_positions: &[[f64; 3]],
    a_nn: &[[f64; 3]],
    motion: &MotionField,
    original: Option<&[[f64; 3]]>,
) -> Result<(PredictionBundle, MotionTrace)> {
    if motion.vectors.len() != cur_positions.len() {
        return Err(Error::LengthMismatch(format!(
            "{} motion vectors for {} points",
            motion.vectors.len(),
            cur_positions.len()
        )));
    }
    let warped: Vec<[f64; 3]> = cur_positions
        .iter()
        .zip(&motion.vectors)
        .map(|(p, v)| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
        .collect();
    let prev_index = GridIndex::new(&prev.positions_real());
    let a_w = nn_attributes_indexed(&prev_index, &prev.attributes, &warped);
    let (raw, trace) = two_round(net, prev, &prev_index, &warped, &a_w)?;
    let a_p: Vec<[f64; 3]> = a_w
        .iter()
        .zip(&raw)
        .map(|(w, r)| {
            [
                w[0] + r[0] * net.scale[0] * 255.0,
                w[1] + r[1] * net.scale[1] * 255.0,
                w[2] + r[2] * net.scale[2] * 255.0,
            ]
        })
        .collect();
    let residual = original.map(|orig| {
        orig.iter()
            .zip(&a_p)
            .map(|(a, p)| [a[0] - p[0], a[1] - p[1], a[2] - p[2]])
            .collect()
    });
    Ok((
        PredictionBundle {
            a_nn: a_nn.to_vec(),
            warped_geometry: warped,
            a_w,
            a_p,
            residual,
        },
        trace,
    ))
}

/// Accumulates gradients of a loss on `a_p` into `grads`. The gradient
/// reaches the refinement path only; the warp's nearest-neighbor lookup is
/// piecewise constant, so no gradient flows into the motion field.
pub fn compensate_backward(
    net: &MotionNet,
    trace: &MotionTrace,
    dap: &[[f64; 3]],
    grads: &mut MotionNet,
) {
    let mut draw = vec![[0.0f64; 3]; dap.len()];
    for i in 0..dap.len() {
        for c in 0..3 {
            grads.scale[c] += dap[i][c] * trace.raw[i][c] * 255.0;
            draw[i][c] = dap[i][c] * net.scale[c] * 255.0;
        }
    }
    two_round_backward(net, trace, &draw, grads);
}

/// Motion at every tree node: a leaf carries its point's vector, an internal
/// node the weight-weighted mean of its children, which equals the plain
/// mean over all points the node contains.
pub fn node_motion(tree: &RahtTree<f64>, motion: &MotionField) -> Result<Vec<[f64; 3]>> {
    let n = tree.point_count();
    if motion.vectors.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{} motion vectors for a {}-leaf tree",
            motion.vectors.len(),
            n
        )));
    }
    let mut out = vec![[0.0f64; 3]; tree.nodes.len()];
    out[..n].copy_from_slice(&motion.vectors);
    for idx in n..tree.nodes.len() {
        match tree.nodes[idx].children {
            Children::Leaf => unreachable!(),
            Children::One(a) => out[idx] = out[a as usize],
            Children::Two(a, b) => {
                let w1 = tree.nodes[a as usize].weight as f64;
                let w2 = tree.nodes[b as usize].weight as f64;
                for c in 0..3 {
                    out[idx][c] = (out[a as usize][c] * w1 + out[b as usize][c] * w2) / (w1 + w2);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::morton_code;
    use crate::nnet::loss::{loss_mc, loss_mc_backward, loss_me, loss_me_backward};
    use crate::raht::build_tree;
    use crate::synth::{generate_sequence, ColorMode, SequenceSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, depth: u8) -> PointFrame<f64> {
        let limit = 1u32 << depth;
        let mut seen = std::collections::HashSet::new();
        let mut pts = Vec::new();
        while pts.len() < n {
            let p = [
                rng.gen_range(0..limit),
                rng.gen_range(0..limit),
                rng.gen_range(0..limit),
            ];
            if seen.insert(p) {
                pts.push(p);
            }
        }
        pts.sort_by_key(|&p| morton_code(p));
        let attrs = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                ]
            })
            .collect();
        PointFrame::new(0, depth, pts, attrs).unwrap()
    }

    fn translation_pair(seed: u64) -> (PointFrame<f64>, PointFrame<f64>, [f64; 3]) {
        let spec = SequenceSpec {
            frame_count: 2,
            shape: Shape::Sphere,
            points_per_frame: 400,
            translation: [1.0, 2.0, 3.0],
            rotation_z: 0.0,
            color_mode: ColorMode::TexturedNoise,
            noise_sigma: 0.0,
            seed,
            depth: 6,
        };
        let frames = generate_sequence(&spec).unwrap();
        (
            frames[0].0.clone(),
            frames[1].0.clone(),
            spec.translation,
        )
    }

    #[test]
    fn nn_attributes_identity_and_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let prev = random_frame(&mut rng, 200, 6);
        let got = nn_attributes(&prev, &prev.positions_real());
        assert_eq!(got, prev.attributes);

        let single = PointFrame::new(0, 4, vec![[3, 5, 7]], vec![[10.0, 20.0, 30.0]]).unwrap();
        let queries = vec![[0.0, 0.0, 0.0], [15.0, 15.0, 15.0]];
        for a in nn_attributes(&single, &queries) {
            assert_eq!(a, [10.0, 20.0, 30.0]);
        }
    }

    #[test]
    fn nn_attributes_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let prev = random_frame(&mut rng, 300, 6);
        let prev_pos = prev.positions_real();
        let queries: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(-5.0..70.0),
                    rng.gen_range(-5.0..70.0),
                    rng.gen_range(-5.0..70.0),
                ]
            })
            .collect();
        let got = nn_attributes(&prev, &queries);
        for (q, a) in queries.iter().zip(&got) {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, p) in prev_pos.iter().enumerate() {
                let d = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(*a, prev.attributes[best.1]);
        }
    }

    #[test]
    fn pseudo_motion_self_is_zero_and_weight_zero_is_geometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let f = random_frame(&mut rng, 250, 6);
        for v in pseudo_motion(&f, &f, 1.0).vectors {
            assert_eq!(v, [0.0, 0.0, 0.0]);
        }

        let g = random_frame(&mut rng, 250, 6);
        let geo = pseudo_motion(&f, &g, 0.0);
        let index = GridIndex::new(&f.positions_real());
        for (i, p) in g.positions.iter().enumerate() {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            let j = index.nearest(q, 1)[0].0 as usize;
            let m = f.positions[j];
            assert_eq!(
                geo.vectors[i],
                [m[0] as f64 - q[0], m[1] as f64 - q[1], m[2] as f64 - q[2]]
            );
        }
    }

    #[test]
    fn pseudo_motion_recovers_exact_translation() {
        let (prev, cur, d) = translation_pair(7);
        let flow = pseudo_motion(&prev, &cur, 1.0);
        // Brute-force oracle over all pairs with the same tie rule.
        let prev_pos = prev.positions_real();
        for (i, p) in cur.positions.iter().enumerate() {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, pp) in prev_pos.iter().enumerate() {
                let mut cost = (0..3).map(|c| (pp[c] - q[c]).powi(2)).sum::<f64>();
                cost += (0..3)
                    .map(|c| (prev.attributes[j][c] - cur.attributes[i][c]).powi(2))
                    .sum::<f64>();
                if cost < best.0 {
                    best = (cost, j);
                }
            }
            let m = prev_pos[best.1];
            assert_eq!(
                flow.vectors[i],
                [m[0] - q[0], m[1] - q[1], m[2] - q[2]],
                "oracle disagrees at {i}"
            );
            for c in 0..3 {
                assert!(
                    (flow.vectors[i][c] + d[c]).abs() <= 0.5,
                    "point {i} axis {c}: {} vs −{}",
                    flow.vectors[i][c],
                    d[c]
                );
            }
        }
    }

    #[test]
    fn zero_scale_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let prev = random_frame(&mut rng, 60, 5);
        let cur = random_frame(&mut rng, 55, 5);
        let net = MotionNet::random(&mut rng);
        let cur_pos = cur.positions_real();
        let a_nn = nn_attributes(&prev, &cur_pos);
        let v = estimate_motion(&net, &prev, &cur_pos, &a_nn).unwrap();
        assert!(v.vectors.iter().all(|v| *v == [0.0, 0.0, 0.0]));

        let (bundle, _) =
            compensate_traced(&net, &prev, &cur_pos, &a_nn, &v, Some(&cur.attributes)).unwrap();
        assert_eq!(bundle.a_p, bundle.a_w);
        // V = 0 warps nothing, so the warped lookup is the plain NN lookup.
        assert_eq!(bundle.a_w, a_nn);
    }

    #[test]
    fn identical_frames_give_zero_residual_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let f = random_frame(&mut rng, 80, 5);
        let net = MotionNet::random(&mut rng);
        let pos = f.positions_real();
        let a_nn = nn_attributes(&f, &pos);
        let v = estimate_motion(&net, &f, &pos, &a_nn).unwrap();
        let bundle = compensate(&net, &f, &pos, &a_nn, &v, Some(&f.attributes)).unwrap();
        assert_eq!(bundle.a_w, f.attributes);
        for r in bundle.residual.unwrap() {
            assert_eq!(r, [0.0, 0.0, 0.0]);
        }
        for (p, a) in bundle.a_p.iter().zip(&f.attributes) {
            assert_eq!(p, a);
        }
    }

    #[test]
    fn prediction_plus_residual_restores_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let prev = random_frame(&mut rng, 90, 5);
        let cur = random_frame(&mut rng, 85, 5);
        let mut net = MotionNet::random(&mut rng);
        for s in net.scale.iter_mut() {
            *s = rng.gen_range(-0.05..0.05);
        }
        let cur_pos = cur.positions_real();
        let a_nn = nn_attributes(&prev, &cur_pos);
        let v = estimate_motion(&net, &prev, &cur_pos, &a_nn).unwrap();
        let bundle = compensate(&net, &prev, &cur_pos, &a_nn, &v, Some(&cur.attributes)).unwrap();
        for (i, r) in bundle.residual.as_ref().unwrap().iter().enumerate() {
            for c in 0..3 {
                let back = bundle.a_p[i][c] + r[c];
                assert!(
                    (back - cur.attributes[i][c]).abs() < 1e-9,
                    "point {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn inference_is_replay_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let prev = random_frame(&mut rng, 70, 5);
        let cur = random_frame(&mut rng, 75, 5);
        let mut net = MotionNet::random(&mut rng);
        for s in net.scale.iter_mut() {
            *s = 0.02;
        }
        let cur_pos = cur.positions_real();
        let a_nn = nn_attributes(&prev, &cur_pos);
        let run = || {
            let v = estimate_motion(&net, &prev, &cur_pos, &a_nn).unwrap();
            let b = compensate(&net, &prev, &cur_pos, &a_nn, &v, None).unwrap();
            (v, b.a_p)
        };
        let (v1, ap1) = run();
        let (v2, ap2) = run();
        assert_eq!(v1.vectors, v2.vectors);
        assert_eq!(ap1, ap2);
    }

    #[test]
    fn node_motion_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let f = random_frame(&mut rng, 64, 4);
        let tree = build_tree::<f64>(&f.positions, 4).unwrap();

        let uniform = MotionField {
            vectors: vec![[2.0, -1.0, 0.5]; f.len()],
        };
        for v in node_motion(&tree, &uniform).unwrap() {
            for c in 0..3 {
                assert!((v[c] - uniform.vectors[0][c]).abs() < 1e-12);
            }
        }

        let field = MotionField {
            vectors: (0..f.len())
                .map(|_| {
                    [
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    ]
                })
                .collect(),
        };
        let per_node = node_motion(&tree, &field).unwrap();
        let root = &per_node[tree.root() as usize];
        for c in 0..3 {
            let mean: f64 =
                field.vectors.iter().map(|v| v[c]).sum::<f64>() / field.vectors.len() as f64;
            assert!((root[c] - mean).abs() < 1e-9, "axis {c}");
        }

        let two = build_tree::<f64>(&[[0, 0, 0], [1, 0, 0]], 1).unwrap();
        let vs = MotionField {
            vectors: vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
        };
        let pm = node_motion(&two, &vs).unwrap();
        assert_eq!(pm[pm.len() - 1], [0.5, 1.0, 0.0]);
    }

    #[test]
    fn motion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let prev = random_frame(&mut rng, 14, 4);
        let cur = random_frame(&mut rng, 12, 4);
        let cur_pos = cur.positions_real();
        let a_nn = nn_attributes(&prev, &cur_pos);
        let gt: Vec<[f64; 3]> = (0..cur.len())
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();

        let mut net = MotionNet::random(&mut rng);
        for s in net.scale.iter_mut() {
            *s = rng.gen_range(0.01..0.1);
        }

        // Estimation path under L2 flow loss.
        let me_loss = |n: &MotionNet| -> f64 {
            let v = estimate_motion(n, &prev, &cur_pos, &a_nn).unwrap();
            loss_me(&v.vectors, &gt).unwrap()
        };
        let (v, trace) = estimate_motion_traced(&net, &prev, &cur_pos, &a_nn).unwrap();
        let mut grads = net.zeros_like();
        let dv = loss_me_backward(&v.vectors, &gt);
        estimate_motion_backward(&net, prev.depth, &trace, &dv, &mut grads);
        check_grads(&net, &grads, me_loss, 17);

        // Compensation path under L2 attribute loss; motion fixed.
        let motion = estimate_motion(&net, &prev, &cur_pos, &a_nn).unwrap();
        let mc_loss = |n: &MotionNet| -> f64 {
            let b = compensate(n, &prev, &cur_pos, &a_nn, &motion, None).unwrap();
            loss_mc(&b.a_p, &cur.attributes).unwrap()
        };
        let (bundle, trace) =
            compensate_traced(&net, &prev, &cur_pos, &a_nn, &motion, None).unwrap();
        let mut grads = net.zeros_like();
        let dap = loss_mc_backward(&bundle.a_p, &cur.attributes);
        compensate_backward(&net, &trace, &dap, &mut grads);
        check_grads(&net, &grads, mc_loss, 23);
    }

    fn check_grads(
        net: &MotionNet,
        grads: &MotionNet,
        loss: impl Fn(&MotionNet) -> f64,
        stride: usize,
    ) {
        let h = 1e-5;
        let mut flat: Vec<f64> = Vec::new();
        grads.visit_tensors(&mut |t| flat.extend_from_slice(t));
        let mut offset = 0usize;
        let mut tensor_id = 0usize;
        let mut checked = 0usize;
        net.visit_tensors(&mut |t| {
            for j in (0..t.len()).step_by(stride) {
                let mut np = net.clone();
                let mut nm = net.clone();
                let mut ti = 0usize;
                np.visit_tensors_mut(&mut |tt| {
                    if ti == tensor_id {
                        tt[j] += h;
                    }
                    ti += 1;
                });
                ti = 0;
                nm.visit_tensors_mut(&mut |tt| {
                    if ti == tensor_id {
                        tt[j] -= h;
                    }
                    ti += 1;
                });
                let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
                let an = flat[offset + j];
                assert!(
                    (an - fd).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1.0),
                    "tensor {tensor_id} index {j}: {an} vs {fd}"
                );
                checked += 1;
            }
            offset += t.len();
            tensor_id += 1;
        });
        assert!(checked > 50, "only {checked} parameters checked");
    }
}
