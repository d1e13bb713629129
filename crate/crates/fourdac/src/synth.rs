//! Synthetic dynamic sequences with ground-truth motion.
//!
//! Frames share one world-to-voxel mapping: points live directly in voxel
//! units inside the `[0, 2^depth)` box, each frame is the previous one
//! rigidly transformed (rotation about the box center's z axis, then
//! translation) plus optional Gaussian jitter, and colors ride along with
//! their points. Ground-truth flow is the exact current→previous
//! displacement of each surviving point *before* rounding to the voxel grid,
//! so voxelization contributes at most half a voxel of error per axis.

use crate::color::rgb_to_yuv;
use crate::error::{Error, Result};
use crate::frame::{morton_code, PointFrame, MAX_DEPTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Exact per-point current→previous motion, parallel to a frame's points.
#[derive(Clone, Debug, Default)]
pub struct FlowGroundTruth {
    pub vectors: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Cube,
    TwoBlobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    SmoothGradient,
    TexturedNoise,
}

/// Deterministic recipe for a sequence: same spec, same bytes out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub frame_count: u32,
    pub shape: Shape,
    pub points_per_frame: u32,
    /// Per-frame translation in voxel units.
    pub translation: [f64; 3],
    /// Per-frame rotation about the box center's z axis, radians.
    #[serde(default)]
    pub rotation_z: f64,
    pub color_mode: ColorMode,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_depth")]
    pub depth: u8,
}

fn default_depth() -> u8 {
    9
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            frame_count: 2,
            shape: Shape::Sphere,
            points_per_frame: 500,
            translation: [0.0; 3],
            rotation_z: 0.0,
            color_mode: ColorMode::SmoothGradient,
            noise_sigma: 0.0,
            seed: 0,
            depth: 9,
        }
    }
}

impl SequenceSpec {
    fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::ParseError("frame_count must be at least 2".into()));
        }
        if self.points_per_frame == 0 {
            return Err(Error::ParseError("points_per_frame must be positive".into()));
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::ParseError(format!(
                "depth {} outside supported range 1..={MAX_DEPTH}",
                self.depth
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::ParseError("noise_sigma must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

fn sample_shape(spec: &SequenceSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let s = (1u32 << spec.depth) as f64;
    let center = [s / 2.0, s / 2.0, s / 2.0];
    let n = spec.points_per_frame as usize;
    match spec.shape {
        Shape::Sphere => {
            let radius = 0.3 * s;
            (0..n)
                .map(|_| {
                    let g: [f64; 3] = [
                        rng.sample(rand_distr::StandardNormal),
                        rng.sample(rand_distr::StandardNormal),
                        rng.sample(rand_distr::StandardNormal),
                    ];
                    let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
                    [
                        center[0] + radius * g[0] / norm,
                        center[1] + radius * g[1] / norm,
                        center[2] + radius * g[2] / norm,
                    ]
                })
                .collect()
        }
        Shape::Cube => {
            let half = 0.25 * s;
            (0..n)
                .map(|_| {
                    [
                        center[0] + rng.gen_range(-half..half),
                        center[1] + rng.gen_range(-half..half),
                        center[2] + rng.gen_range(-half..half),
                    ]
                })
                .collect()
        }
        Shape::TwoBlobs => {
            let sigma = 0.08 * s;
            let normal = Normal::new(0.0, sigma).unwrap();
            let blob_centers = [
                [0.32 * s, center[1], center[2]],
                [0.68 * s, center[1], center[2]],
            ];
            (0..n)
                .map(|i| {
                    let b = blob_centers[i % 2];
                    [
                        b[0] + normal.sample(rng),
                        b[1] + normal.sample(rng),
                        b[2] + normal.sample(rng),
                    ]
                })
                .collect()
        }
    }
}

fn assign_colors(spec: &SequenceSpec, rng: &mut ChaCha8Rng, points: &[[f64; 3]]) -> Vec<[u8; 3]> {
    let s = (1u32 << spec.depth) as f64;
    match spec.color_mode {
        ColorMode::SmoothGradient => points
            .iter()
            .map(|p| {
                [
                    (p[0] / s * 255.0).clamp(0.0, 255.0) as u8,
                    (p[1] / s * 255.0).clamp(0.0, 255.0) as u8,
                    (p[2] / s * 255.0).clamp(0.0, 255.0) as u8,
                ]
            })
            .collect(),
        ColorMode::TexturedNoise => points
            .iter()
            .map(|_| [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()])
            .collect(),
    }
}

fn rigid_step(spec: &SequenceSpec, p: [f64; 3]) -> [f64; 3] {
    let s = (1u32 << spec.depth) as f64;
    let c = s / 2.0;
    let (sin, cos) = spec.rotation_z.sin_cos();
    let x = p[0] - c;
    let y = p[1] - c;
    [
        c + cos * x - sin * y + spec.translation[0],
        c + sin * x + cos * y + spec.translation[1],
        p[2] + spec.translation[2],
    ]
}

/// Rounds a trajectory snapshot to the shared voxel grid, merging co-located
/// points by averaging their attributes and flows. Returns the frame plus
/// per-voxel ground-truth flow.
fn quantize_frame(
    spec: &SequenceSpec,
    frame_index: u32,
    points: &[[f64; 3]],
    colors: &[[u8; 3]],
    flows: &[[f64; 3]],
) -> Result<(PointFrame<f64>, FlowGroundTruth)> {
    let limit = (1u32 << spec.depth) - 1;
    let mut keyed: Vec<(u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut v = [0u32; 3];
            for a in 0..3 {
                v[a] = (p[a].round().max(0.0) as u32).min(limit);
            }
            (morton_code(v), i)
        })
        .collect();
    keyed.sort_unstable();

    let mut positions = Vec::new();
    let mut attributes: Vec<[f64; 3]> = Vec::new();
    let mut vectors: Vec<[f64; 3]> = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let key = keyed[i].0;
        let mut yuv = [0.0f64; 3];
        let mut flow = [0.0f64; 3];
        let mut count = 0.0;
        while i < keyed.len() && keyed[i].0 == key {
            let src = keyed[i].1;
            let c = rgb_to_yuv::<f64>(colors[src]);
            for a in 0..3 {
                yuv[a] += c[a];
                flow[a] += flows[src][a];
            }
            count += 1.0;
            i += 1;
        }
        positions.push(crate::frame::cell_of_key(key));
        attributes.push([yuv[0] / count, yuv[1] / count, yuv[2] / count]);
        vectors.push([flow[0] / count, flow[1] / count, flow[2] / count]);
    }
    let frame = PointFrame::new(frame_index, spec.depth, positions, attributes)?;
    Ok((frame, FlowGroundTruth { vectors }))
}

/// Generates the sequence: one `(frame, flow)` pair per frame. Frame 0 has
/// zero flow by convention (there is nothing before it).
pub fn generate_sequence(spec: &SequenceSpec) -> Result<Vec<(PointFrame<f64>, FlowGroundTruth)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = sample_shape(spec, &mut rng);
    let colors = assign_colors(spec, &mut rng, &points);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).unwrap())
    } else {
        None
    };

    let mut out = Vec::with_capacity(spec.frame_count as usize);
    let zero_flow = vec![[0.0f64; 3]; points.len()];
    out.push(quantize_frame(spec, 0, &points, &colors, &zero_flow)?);

    for t in 1..spec.frame_count {
        let mut flows = Vec::with_capacity(points.len());
        let mut next = Vec::with_capacity(points.len());
        for &p in &points {
            let mut q = rigid_step(spec, p);
            if let Some(n) = &noise {
                for a in q.iter_mut() {
                    *a += n.sample(&mut rng);
                }
            }
            flows.push([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
            next.push(q);
        }
        points = next;
        out.push(quantize_frame(spec, t, &points, &colors, &flows)?);
    }
    Ok(out)
}
