//! Frame-level codec: intra and predicted encoding, the decoder mirror,
//! closed-loop reconstruction, and training.
//!
//! Intra frames transform the attributes directly and entropy-code the
//! quantized coefficients with the adaptive Golomb-Rice backend; they never
//! touch a model. Predicted frames code the residual against a prediction
//! from the previous *reconstruction*: without a model the prediction is
//! the nearest-neighbor copy and the backend stays Golomb-Rice
//! (`model_hash = 0` in the header); with a model the full motion /
//! compensation / context pipeline runs and the residual coefficients are
//! range-coded under per-node conditional distributions.
//!
//! Both sides derive every prediction and context from data the decoder
//! owns, so the encoder's closed-loop reconstruction and the decoder output
//! are the same bytes. A 32-bit checksum of the reconstructed attributes
//! rides at the end of every payload to catch silent desync.

use crate::coder::bitstream::{read_frame, write_frame, FrameHeader, FrameType};
use crate::coder::range::{Distribution, RangeDecoder, RangeEncoder};
use crate::coder::rlgr::{rlgr_decode, rlgr_encode};
use crate::context::{
    assemble_context, assemble_context_traced, assemble_backward, channel_context,
    explicit_backward, frame_contexts, frame_contexts_traced, implicit_backward, intra_input,
    parent_merge, FrameContexts, CTX_FEAT, NODE_CTX,
};
use crate::error::{Error, Result};
use crate::frame::PointFrame;
use crate::model::{fnv1a32, ModelFlags, ModelParams};
use crate::motion::{
    compensate_backward, compensate_traced, estimate_motion_backward, estimate_motion_traced,
    nn_attributes, node_motion, MotionField,
};
use crate::nnet::adam::Adam;
use crate::nnet::density::{symbol_index, symbol_value, DensityVariant, ESCAPE_LO};
use crate::nnet::loss::{
    loss_mc, loss_mc_backward, loss_me, loss_me_backward, total_loss, LossWeights,
};
use crate::raht::{
    build_tree, dequantize, forward, forward_lows, inverse, quantize, QuantizedStream, RahtTree,
};
use crate::synth::{generate_sequence, SequenceSpec};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Encoder-side settings. `qstep` is rounded through the header's 32-bit
/// float before any quantization so both sides use the identical step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub depth: u8,
    pub qstep: f64,
    pub k_neighbors: usize,
    pub density_variant: DensityVariant,
    pub model_path: Option<PathBuf>,
    /// Intra-frame interval; 0 codes only the first frame as intra.
    pub gop: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            depth: 9,
            qstep: 10.0,
            k_neighbors: 3,
            density_variant: DensityVariant::ConditionalLaplace,
            model_path: None,
            gop: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.depth > crate::frame::MAX_DEPTH {
            return Err(Error::ParseError(format!(
                "depth {} out of range 1..=16",
                self.depth
            )));
        }
        if !(self.qstep > 0.0 && self.qstep.is_finite()) {
            return Err(Error::ParseError(format!(
                "qstep {} must be positive",
                self.qstep
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::ParseError("k_neighbors must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stateful frame encoder; holds the closed-loop previous reconstruction.
pub struct Encoder {
    config: CodecConfig,
    model: Option<ModelParams>,
    model_hash: u64,
    previous: Option<PointFrame<f64>>,
    frame_index: u32,
}

impl Encoder {
    pub fn new(config: CodecConfig, model: Option<ModelParams>) -> Result<Encoder> {
        config.validate()?;
        let model_hash = model.as_ref().map_or(0, |m| m.content_hash());
        Ok(Encoder {
            config,
            model,
            model_hash,
            previous: None,
            frame_index: 0,
        })
    }

    /// The encoder's own closed-loop reconstruction of the last frame.
    pub fn previous(&self) -> Option<&PointFrame<f64>> {
        self.previous.as_ref()
    }

    pub fn encode_frame(&mut self, frame: &PointFrame<f64>) -> Result<Vec<u8>> {
        let intra = self.previous.is_none()
            || (self.config.gop > 0 && self.frame_index % self.config.gop == 0);
        let bytes = if intra {
            self.encode_intra(frame)?
        } else {
            self.encode_predicted(frame)?
        };
        self.frame_index += 1;
        Ok(bytes)
    }

    fn qstep(&self) -> f64 {
        self.config.qstep as f32 as f64
    }

    fn encode_intra(&mut self, frame: &PointFrame<f64>) -> Result<Vec<u8>> {
        let tree = build_tree(&frame.positions, frame.depth)?;
        let coeffs = forward(&tree, &frame.attributes)?;
        let q = quantize(&coeffs, self.qstep())?;
        let mut payload = rlgr_encode(&channel_major(&q.highs));
        let recon = inverse(&tree, &dequantize(&q))?;
        payload.extend_from_slice(&attr_checksum(&recon).to_le_bytes());
        let header = FrameHeader {
            frame_type: FrameType::Intra,
            depth: frame.depth,
            qstep: self.config.qstep as f32,
            point_count: frame.positions.len() as u32,
            model_hash: 0,
            dc: q.dc,
        };
        self.previous = Some(reconstructed(frame, recon));
        Ok(write_frame(&header, &payload))
    }

    fn encode_predicted(&mut self, frame: &PointFrame<f64>) -> Result<Vec<u8>> {
        let prev = self.previous.as_ref().expect("checked by encode_frame");
        if prev.depth != frame.depth {
            return Err(Error::GeometryMismatch(format!(
                "frame depth {} after depth {}",
                frame.depth, prev.depth
            )));
        }
        let qstep = self.qstep();
        let (payload_core, a_p, tree, q) = match &self.model {
            None => {
                let a_p = nn_attributes(prev, &frame.positions_real());
                let residual = subtract(&frame.attributes, &a_p);
                let tree = build_tree(&frame.positions, frame.depth)?;
                let q = quantize(&forward(&tree, &residual)?, qstep)?;
                (rlgr_encode(&channel_major(&q.highs)), a_p, tree, q)
            }
            Some(model) => {
                let setup = predicted_setup(model, prev, frame)?;
                let residual = subtract(&frame.attributes, &setup.a_p);
                let q = quantize(&forward(&setup.tree, &residual)?, qstep)?;
                let payload = range_encode_residual(model, &setup.tree, &setup.contexts, &q)?;
                (payload, setup.a_p, setup.tree, q)
            }
        };
        let residual_recon = inverse(&tree, &dequantize(&q))?;
        let recon = add(&a_p, &residual_recon);
        let mut payload = payload_core;
        payload.extend_from_slice(&attr_checksum(&recon).to_le_bytes());
        let header = FrameHeader {
            frame_type: FrameType::Predicted,
            depth: frame.depth,
            qstep: self.config.qstep as f32,
            point_count: frame.positions.len() as u32,
            model_hash: self.model_hash,
            dc: q.dc,
        };
        self.previous = Some(reconstructed(frame, recon));
        Ok(write_frame(&header, &payload))
    }
}

/// Stateful frame decoder; geometry arrives out-of-band per frame.
pub struct Decoder {
    model: Option<ModelParams>,
    model_hash: u64,
    previous: Option<PointFrame<f64>>,
}

impl Decoder {
    pub fn new(model: Option<ModelParams>) -> Decoder {
        let model_hash = model.as_ref().map_or(0, |m| m.content_hash());
        Decoder {
            model,
            model_hash,
            previous: None,
        }
    }

    /// Decodes the frame record at the front of `bytes` against the given
    /// geometry (attributes of `geometry` are ignored). Returns the
    /// reconstructed frame and the bytes consumed.
    pub fn decode_frame(
        &mut self,
        bytes: &[u8],
        geometry: &PointFrame<f64>,
    ) -> Result<(PointFrame<f64>, usize)> {
        let (header, payload, used) = read_frame(bytes)?;
        if geometry.positions.len() != header.point_count as usize {
            return Err(Error::GeometryMismatch(format!(
                "header says {} points, geometry has {}",
                header.point_count,
                geometry.positions.len()
            )));
        }
        if geometry.depth != header.depth {
            return Err(Error::GeometryMismatch(format!(
                "header depth {}, geometry depth {}",
                header.depth, geometry.depth
            )));
        }
        if payload.len() < 4 {
            return Err(Error::TruncatedPayload(
                "payload too short for its checksum".into(),
            ));
        }
        let (core, tail) = payload.split_at(payload.len() - 4);
        let expected_sum = u32::from_le_bytes(tail.try_into().unwrap());
        let n = header.point_count as usize;
        let qstep = header.qstep as f64;

        let recon = match header.frame_type {
            FrameType::Intra => {
                let tree = build_tree(&geometry.positions, header.depth)?;
                let highs = channel_major_back(rlgr_decode(core, 3 * (n - 1))?);
                let q = QuantizedStream {
                    dc: header.dc,
                    highs,
                    qstep,
                };
                inverse(&tree, &dequantize(&q))?
            }
            FrameType::Predicted => {
                let prev = self.previous.as_ref().ok_or_else(|| {
                    Error::MissingReference("predicted frame with empty decoder state".into())
                })?;
                if prev.depth != header.depth {
                    return Err(Error::GeometryMismatch(format!(
                        "frame depth {} after depth {}",
                        header.depth, prev.depth
                    )));
                }
                if header.model_hash == 0 {
                    let a_p = nn_attributes(prev, &geometry.positions_real());
                    let tree = build_tree(&geometry.positions, header.depth)?;
                    let highs = channel_major_back(rlgr_decode(core, 3 * (n - 1))?);
                    let q = QuantizedStream {
                        dc: header.dc,
                        highs,
                        qstep,
                    };
                    add(&a_p, &inverse(&tree, &dequantize(&q))?)
                } else {
                    let model = self.model.as_ref().ok_or_else(|| {
                        Error::ModelMissing(format!(
                            "frame was coded with model {:016x}",
                            header.model_hash
                        ))
                    })?;
                    if self.model_hash != header.model_hash {
                        return Err(Error::ModelMismatch(format!(
                            "frame wants model {:016x}, loaded {:016x}",
                            header.model_hash, self.model_hash
                        )));
                    }
                    let setup = predicted_setup(model, prev, geometry)?;
                    let q = range_decode_residual(
                        model,
                        &setup.tree,
                        &setup.contexts,
                        core,
                        header.dc,
                        qstep,
                    )?;
                    add(&setup.a_p, &inverse(&setup.tree, &dequantize(&q))?)
                }
            }
        };

        if attr_checksum(&recon) != expected_sum {
            return Err(Error::ParseError(
                "reconstructed attribute checksum mismatch".into(),
            ));
        }
        let frame = reconstructed(geometry, recon);
        self.previous = Some(frame.clone());
        Ok((frame, used))
    }
}

/// Everything the predicted-frame pipeline derives before touching residual
/// symbols. Encoder and decoder run this identical path, which is what
/// makes their float results bit-equal.
struct PredictedSetup {
    tree: RahtTree<f64>,
    a_p: Vec<[f64; 3]>,
    contexts: FrameContexts,
}

fn predicted_setup(
    model: &ModelParams,
    prev: &PointFrame<f64>,
    frame: &PointFrame<f64>,
) -> Result<PredictedSetup> {
    let cur_real = frame.positions_real();
    let a_nn = nn_attributes(prev, &cur_real);
    let (motion, _) = estimate_motion_traced(&model.me, prev, &cur_real, &a_nn)?;
    let (bundle, _) = compensate_traced(&model.mc, prev, &cur_real, &a_nn, &motion, None)?;
    let tree = build_tree(&frame.positions, frame.depth)?;
    let node_vectors = node_motion(&tree, &motion)?;
    let prev_tree = build_tree(&prev.positions, prev.depth)?;
    let (_, prev_highs) = forward_lows(&prev_tree, &prev.attributes);
    let (_, cp_highs) = forward_lows(&tree, &bundle.a_p);
    let contexts = frame_contexts(
        &model.ctx,
        model.flags.context,
        Some((&prev_tree, &prev_highs)),
        &tree,
        &cp_highs,
        &node_vectors,
        model.flags.k_neighbors,
    )?;
    Ok(PredictedSetup {
        tree,
        a_p: bundle.a_p,
        contexts,
    })
}

/// Range-codes the quantized highs in coding order under per-node
/// conditional distributions. Out-of-alphabet values send an escape symbol
/// followed by the raw 32-bit value in two halves.
fn range_encode_residual(
    model: &ModelParams,
    tree: &RahtTree<f64>,
    contexts: &FrameContexts,
    q: &QuantizedStream,
) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    let mut deq = vec![[0.0f64; 3]; tree.nodes.len()];
    for (pos, &ni) in tree.coding_order.iter().enumerate() {
        let parent = parent_merge(tree, ni)
            .map(|p| deq[p as usize])
            .unwrap_or([0.0; 3]);
        let c8 = assemble_context(
            &model.ctx,
            &contexts.explicit[pos],
            &contexts.implicit[pos],
            &intra_input(tree, ni, parent),
        )?;
        let k = q.highs[pos];
        for ch in 0..3 {
            let dist = Distribution::quantize(
                &model.density.probabilities(&channel_context(&c8, ch))?,
            )?;
            let idx = symbol_index(k[ch]);
            dist.encode_symbol(&mut enc, idx)?;
            if idx >= ESCAPE_LO {
                let u = k[ch] as u32;
                enc.encode_raw16((u & 0xFFFF) as u16);
                enc.encode_raw16((u >> 16) as u16);
            }
        }
        deq[ni as usize] = [
            k[0] as f64 * q.qstep,
            k[1] as f64 * q.qstep,
            k[2] as f64 * q.qstep,
        ];
    }
    Ok(enc.finish())
}

/// Decoder mirror of [`range_encode_residual`]; contexts are evaluated in
/// the same order with the same floats, so the distributions agree.
fn range_decode_residual(
    model: &ModelParams,
    tree: &RahtTree<f64>,
    contexts: &FrameContexts,
    payload: &[u8],
    dc: [i32; 3],
    qstep: f64,
) -> Result<QuantizedStream> {
    let mut dec = RangeDecoder::new(payload)?;
    let mut deq = vec![[0.0f64; 3]; tree.nodes.len()];
    let mut highs = Vec::with_capacity(tree.coding_order.len());
    for &ni in &tree.coding_order {
        let pos = highs.len();
        let parent = parent_merge(tree, ni)
            .map(|p| deq[p as usize])
            .unwrap_or([0.0; 3]);
        let c8 = assemble_context(
            &model.ctx,
            &contexts.explicit[pos],
            &contexts.implicit[pos],
            &intra_input(tree, ni, parent),
        )?;
        let mut k = [0i32; 3];
        for ch in 0..3 {
            let dist = Distribution::quantize(
                &model.density.probabilities(&channel_context(&c8, ch))?,
            )?;
            let idx = dist.decode_symbol(&mut dec)?;
            k[ch] = match symbol_value(idx) {
                Some(v) => v,
                None => {
                    let lo = dec.decode_raw16()? as u32;
                    let hi = dec.decode_raw16()? as u32;
                    (lo | (hi << 16)) as i32
                }
            };
        }
        highs.push(k);
        deq[ni as usize] = [
            k[0] as f64 * qstep,
            k[1] as f64 * qstep,
            k[2] as f64 * qstep,
        ];
    }
    Ok(QuantizedStream { dc, highs, qstep })
}

/// FNV-1a over the reconstructed attributes' raw float bits.
fn attr_checksum(attrs: &[[f64; 3]]) -> u32 {
    let mut bytes = Vec::with_capacity(attrs.len() * 24);
    for a in attrs {
        for c in 0..3 {
            bytes.extend_from_slice(&a[c].to_le_bytes());
        }
    }
    fnv1a32(&bytes)
}

fn reconstructed(template: &PointFrame<f64>, attributes: Vec<[f64; 3]>) -> PointFrame<f64> {
    PointFrame {
        frame_index: template.frame_index,
        depth: template.depth,
        positions: template.positions.clone(),
        attributes,
    }
}

fn channel_major(highs: &[[i32; 3]]) -> Vec<i32> {
    let mut out = Vec::with_capacity(3 * highs.len());
    for ch in 0..3 {
        out.extend(highs.iter().map(|h| h[ch]));
    }
    out
}

fn channel_major_back(symbols: Vec<i32>) -> Vec<[i32; 3]> {
    let n = symbols.len() / 3;
    let mut out = vec![[0i32; 3]; n];
    for ch in 0..3 {
        for (i, row) in out.iter_mut().enumerate() {
            row[ch] = symbols[ch * n + i];
        }
    }
    out
}

fn subtract(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<[f64; 3]> {
    a.iter()
        .zip(b)
        .map(|(x, y)| [x[0] - y[0], x[1] - y[1], x[2] - y[2]])
        .collect()
}

fn add(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<[f64; 3]> {
    a.iter()
        .zip(b)
        .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
        .collect()
}

/// Training hyperparameters; an epoch is one pass over all frame pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub me_epochs: usize,
    pub mc_epochs: usize,
    pub joint_epochs: usize,
    pub lambda_me: f64,
    pub lambda_mc: f64,
    /// Quantization step used to form the symbols the entropy model learns.
    pub qstep: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            me_epochs: 120,
            mc_epochs: 120,
            joint_epochs: 150,
            lambda_me: 1.0,
            lambda_mc: 1.0,
            qstep: 10.0,
            seed: 1,
        }
    }
}

/// A training dataset: synthetic sequences plus model architecture flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sequences: Vec<SequenceSpec>,
    #[serde(default)]
    pub flags: ModelFlags,
    #[serde(default)]
    pub train: TrainConfig,
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
}

struct TrainPair {
    prev: PointFrame<f64>,
    cur: PointFrame<f64>,
    gt: Vec<[f64; 3]>,
    cur_real: Vec<[f64; 3]>,
    a_nn: Vec<[f64; 3]>,
}

/// Three-stage training: motion estimation against ground-truth flow,
/// compensation against original attributes, then the joint objective.
/// Gradients stop at module boundaries: the rate term trains the context
/// and density nets, the flow term the estimator, the attribute term the
/// compensator. Returns the model and the per-epoch loss log.
pub fn train(dataset: &DatasetSpec) -> Result<(ModelParams, Vec<TrainLogEntry>)> {
    let cfg = &dataset.train;
    if !(cfg.lr > 0.0) || !(cfg.qstep > 0.0) {
        return Err(Error::ParseError(
            "training lr and qstep must be positive".into(),
        ));
    }
    let mut pairs = Vec::new();
    for spec in &dataset.sequences {
        let frames = generate_sequence(spec)?;
        for t in 1..frames.len() {
            let prev = frames[t - 1].0.clone();
            let cur = frames[t].0.clone();
            let gt = frames[t].1.vectors.clone();
            let cur_real = cur.positions_real();
            let a_nn = nn_attributes(&prev, &cur_real);
            pairs.push(TrainPair {
                prev,
                cur,
                gt,
                cur_real,
                a_nn,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::ParseError(
            "dataset produced no frame pairs to train on".into(),
        ));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::random(dataset.flags, &mut rng);
    let mut log = Vec::new();

    stage_me(&mut model, &pairs, cfg, &mut log)?;
    stage_mc(&mut model, &pairs, cfg, &mut log)?;
    stage_joint(&mut model, &pairs, cfg, &mut log)?;
    Ok((model, log))
}

fn motion_flat(net: &crate::motion::MotionNet) -> Vec<f64> {
    let mut flat = Vec::new();
    net.visit_tensors(&mut |t| flat.extend_from_slice(t));
    flat
}

fn motion_assign(net: &mut crate::motion::MotionNet, flat: &[f64]) {
    let mut i = 0;
    net.visit_tensors_mut(&mut |t| {
        let n = t.len();
        t.copy_from_slice(&flat[i..i + n]);
        i += n;
    });
}

fn stage_me(
    model: &mut ModelParams,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogEntry>,
) -> Result<()> {
    let mut adam = Adam::new(cfg.lr, motion_flat(&model.me).len());
    let mut snapshot = model.me.clone();
    for epoch in 0..cfg.me_epochs {
        let mut sum = 0.0;
        for pair in pairs {
            let (motion, trace) =
                estimate_motion_traced(&model.me, &pair.prev, &pair.cur_real, &pair.a_nn)?;
            let l = loss_me(&motion.vectors, &pair.gt)?;
            if !l.is_finite() {
                model.me = snapshot;
                return Err(Error::DivergenceDetected(format!(
                    "me loss became {l} at epoch {epoch}"
                )));
            }
            let dv = loss_me_backward(&motion.vectors, &pair.gt);
            let mut grads = model.me.zeros_like();
            estimate_motion_backward(&model.me, pair.prev.depth, &trace, &dv, &mut grads);
            let mut flat = motion_flat(&model.me);
            adam.step(&mut flat, &motion_flat(&grads));
            motion_assign(&mut model.me, &flat);
            sum += l;
        }
        snapshot = model.me.clone();
        log.push(TrainLogEntry {
            stage: "me".into(),
            epoch,
            loss: sum / pairs.len() as f64,
        });
    }
    Ok(())
}

fn stage_mc(
    model: &mut ModelParams,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogEntry>,
) -> Result<()> {
    // The estimator is frozen here, so the motion field per pair is fixed.
    let motions: Vec<MotionField> = pairs
        .iter()
        .map(|p| {
            estimate_motion_traced(&model.me, &p.prev, &p.cur_real, &p.a_nn).map(|(m, _)| m)
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.lr, motion_flat(&model.mc).len());
    let mut snapshot = model.mc.clone();
    for epoch in 0..cfg.mc_epochs {
        let mut sum = 0.0;
        for (pair, motion) in pairs.iter().zip(&motions) {
            let (bundle, trace) = compensate_traced(
                &model.mc,
                &pair.prev,
                &pair.cur_real,
                &pair.a_nn,
                motion,
                None,
            )?;
            let l = loss_mc(&bundle.a_p, &pair.cur.attributes)?;
            if !l.is_finite() {
                model.mc = snapshot;
                return Err(Error::DivergenceDetected(format!(
                    "mc loss became {l} at epoch {epoch}"
                )));
            }
            let dap = loss_mc_backward(&bundle.a_p, &pair.cur.attributes);
            let mut grads = model.mc.zeros_like();
            compensate_backward(&model.mc, &trace, &dap, &mut grads);
            let mut flat = motion_flat(&model.mc);
            adam.step(&mut flat, &motion_flat(&grads));
            motion_assign(&mut model.mc, &flat);
            sum += l;
        }
        snapshot = model.mc.clone();
        log.push(TrainLogEntry {
            stage: "mc".into(),
            epoch,
            loss: sum / pairs.len() as f64,
        });
    }
    Ok(())
}

fn stage_joint(
    model: &mut ModelParams,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogEntry>,
) -> Result<()> {
    let weights = LossWeights {
        lambda_me: cfg.lambda_me,
        lambda_mc: cfg.lambda_mc,
    };
    // Per-pair constants.
    let trees: Vec<RahtTree<f64>> = pairs
        .iter()
        .map(|p| build_tree(&p.cur.positions, p.cur.depth))
        .collect::<Result<_>>()?;
    let prev_trees: Vec<RahtTree<f64>> = pairs
        .iter()
        .map(|p| build_tree(&p.prev.positions, p.prev.depth))
        .collect::<Result<_>>()?;
    let prev_highs: Vec<Vec<[f64; 3]>> = pairs
        .iter()
        .zip(&prev_trees)
        .map(|(p, t)| forward_lows(t, &p.prev.attributes).1)
        .collect();

    let mut adam = Adam::new(cfg.lr, model.param_count());
    let mut snapshot = model.clone();
    for epoch in 0..cfg.joint_epochs {
        let mut sum = 0.0;
        for (i, pair) in pairs.iter().enumerate() {
            let tree = &trees[i];
            let mut grads = model.zeros_like();

            let (motion, me_trace) =
                estimate_motion_traced(&model.me, &pair.prev, &pair.cur_real, &pair.a_nn)?;
            let (bundle, mc_trace) = compensate_traced(
                &model.mc,
                &pair.prev,
                &pair.cur_real,
                &pair.a_nn,
                &motion,
                None,
            )?;
            let residual = subtract(&pair.cur.attributes, &bundle.a_p);
            let q = quantize(&forward(tree, &residual)?, cfg.qstep)?;

            let node_vectors = node_motion(tree, &motion)?;
            let (_, cp_highs) = forward_lows(tree, &bundle.a_p);
            let (contexts, traces) = frame_contexts_traced(
                &model.ctx,
                model.flags.context,
                Some((&prev_trees[i], &prev_highs[i])),
                tree,
                &cp_highs,
                &node_vectors,
                model.flags.k_neighbors,
            )?;

            let coded = tree.coding_order.len();
            let mut ce = 0.0;
            let mut de = vec![[0.0; CTX_FEAT]; coded];
            let mut di = vec![[0.0; CTX_FEAT]; coded];
            let mut deq = vec![[0.0f64; 3]; tree.nodes.len()];
            for (pos, &ni) in tree.coding_order.iter().enumerate() {
                let parent = parent_merge(tree, ni)
                    .map(|p| deq[p as usize])
                    .unwrap_or([0.0; 3]);
                let (c8, it, at) = assemble_context_traced(
                    &model.ctx,
                    &contexts.explicit[pos],
                    &contexts.implicit[pos],
                    &intra_input(tree, ni, parent),
                )?;
                let k = q.highs[pos];
                let mut dctx8 = vec![0.0; NODE_CTX];
                for ch in 0..3 {
                    let cc = channel_context(&c8, ch);
                    let (cost, dcc) =
                        model
                            .density
                            .ce_backward(&cc, symbol_index(k[ch]), &mut grads.density)?;
                    ce += cost;
                    for d in 0..NODE_CTX {
                        dctx8[d] += dcc[d];
                    }
                }
                let (e, iv) = assemble_backward(&model.ctx, &it, &at, &dctx8, &mut grads.ctx);
                de[pos] = e;
                di[pos] = iv;
                deq[ni as usize] = [
                    k[0] as f64 * q.qstep,
                    k[1] as f64 * q.qstep,
                    k[2] as f64 * q.qstep,
                ];
            }
            explicit_backward(&model.ctx.explicit, &traces, &de, &mut grads.ctx.explicit);
            implicit_backward(&model.ctx, &traces, &di, &mut grads.ctx);

            let lme = loss_me(&motion.vectors, &pair.gt)?;
            if cfg.lambda_me != 0.0 {
                let mut dv = loss_me_backward(&motion.vectors, &pair.gt);
                for d in dv.iter_mut() {
                    for c in 0..3 {
                        d[c] *= cfg.lambda_me;
                    }
                }
                estimate_motion_backward(&model.me, pair.prev.depth, &me_trace, &dv, &mut grads.me);
            }
            let lmc = loss_mc(&bundle.a_p, &pair.cur.attributes)?;
            if cfg.lambda_mc != 0.0 {
                let mut dap = loss_mc_backward(&bundle.a_p, &pair.cur.attributes);
                for d in dap.iter_mut() {
                    for c in 0..3 {
                        d[c] *= cfg.lambda_mc;
                    }
                }
                compensate_backward(&model.mc, &mc_trace, &dap, &mut grads.mc);
            }

            let l = total_loss(ce, lme, lmc, &weights);
            if !l.is_finite() {
                *model = snapshot;
                return Err(Error::DivergenceDetected(format!(
                    "joint loss became {l} at epoch {epoch}"
                )));
            }
            let mut flat = model.flatten();
            adam.step(&mut flat, &grads.flatten());
            model.assign(&flat);
            sum += l;
        }
        snapshot = model.clone();
        log.push(TrainLogEntry {
            stage: "joint".into(),
            epoch,
            loss: sum / pairs.len() as f64,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ColorMode, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(frames: u32, points: u32, translation: [f64; 3], seed: u64) -> SequenceSpec {
        SequenceSpec {
            frame_count: frames,
            shape: Shape::Sphere,
            points_per_frame: points,
            translation,
            rotation_z: 0.0,
            color_mode: ColorMode::TexturedNoise,
            noise_sigma: 0.0,
            seed,
            depth: 6,
        }
    }

    fn frames_of(s: &SequenceSpec) -> Vec<PointFrame<f64>> {
        generate_sequence(s)
            .unwrap()
            .into_iter()
            .map(|(f, _)| f)
            .collect()
    }

    fn bits_equal(a: &[[f64; 3]], b: &[[f64; 3]]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                (0..3).all(|c| x[c].to_bits() == y[c].to_bits())
            })
    }

    #[test]
    fn intra_roundtrip_matches_encoder_reconstruction() {
        let frames = frames_of(&spec(2, 300, [0.0; 3], 80));
        let mut enc = Encoder::new(CodecConfig::default(), None).unwrap();
        let bytes = enc.encode_frame(&frames[0]).unwrap();
        let enc_recon = enc.previous().unwrap().attributes.clone();

        let mut dec = Decoder::new(None);
        let (got, used) = dec.decode_frame(&bytes, &frames[0]).unwrap();
        assert_eq!(used, bytes.len());
        assert!(bits_equal(&got.attributes, &enc_recon));
        // qstep 10 keeps the reconstruction within half a step per
        // coefficient, far from the original only in quantization noise.
        let m = crate::metrics::compute_metrics(&frames[0], &got, bytes.len() as u64 * 8).unwrap();
        assert!(m.psnr_y > 30.0, "psnr {}", m.psnr_y);
    }

    #[test]
    fn chain_without_model_is_symmetric_and_gop_controls_frame_types() {
        let frames = frames_of(&spec(6, 250, [1.0, 0.0, -1.0], 81));
        let mut config = CodecConfig::default();
        config.gop = 3;
        let mut enc = Encoder::new(config, None).unwrap();
        let mut dec = Decoder::new(None);
        for (t, frame) in frames.iter().enumerate() {
            let bytes = enc.encode_frame(frame).unwrap();
            let (header, _, _) = read_frame(&bytes).unwrap();
            let want = if t % 3 == 0 {
                FrameType::Intra
            } else {
                FrameType::Predicted
            };
            assert_eq!(header.frame_type, want, "frame {t}");
            let (got, _) = dec.decode_frame(&bytes, frame).unwrap();
            assert!(
                bits_equal(&got.attributes, &enc.previous().unwrap().attributes),
                "frame {t} drifted"
            );
        }
    }

    #[test]
    fn model_coded_frames_roundtrip_including_escapes() {
        let frames = frames_of(&spec(2, 220, [1.0, 2.0, 0.0], 82));
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let model = ModelParams::random(ModelFlags::default(), &mut rng);

        // A small qstep pushes residual coefficients beyond the alphabet
        // bound, exercising the escape path on both sides.
        let config = CodecConfig {
            qstep: 0.05,
            ..CodecConfig::default()
        };
        let mut enc = Encoder::new(config, Some(model.clone())).unwrap();
        let mut dec = Decoder::new(Some(model));
        let b0 = enc.encode_frame(&frames[0]).unwrap();
        let b1 = enc.encode_frame(&frames[1]).unwrap();
        let (h1, _, _) = read_frame(&b1).unwrap();
        assert_eq!(h1.frame_type, FrameType::Predicted);
        assert_ne!(h1.model_hash, 0);

        dec.decode_frame(&b0, &frames[0]).unwrap();
        let (got, _) = dec.decode_frame(&b1, &frames[1]).unwrap();
        assert!(bits_equal(
            &got.attributes,
            &enc.previous().unwrap().attributes
        ));
    }

    #[test]
    fn zero_model_equals_nn_raht_baseline() {
        // Zero-initialized nets predict exactly the nearest-neighbor copy,
        // so the residuals match the model-free path and both decoders
        // reconstruct identical attributes.
        let frames = frames_of(&spec(2, 200, [1.0, 0.0, 0.0], 84));
        let zero = ModelParams::zeros(ModelFlags::default());

        let mut enc_a = Encoder::new(CodecConfig::default(), Some(zero.clone())).unwrap();
        let mut enc_b = Encoder::new(CodecConfig::default(), None).unwrap();
        let mut dec_a = Decoder::new(Some(zero));
        let mut dec_b = Decoder::new(None);
        for frame in &frames {
            let ba = enc_a.encode_frame(frame).unwrap();
            let bb = enc_b.encode_frame(frame).unwrap();
            let (ra, _) = dec_a.decode_frame(&ba, frame).unwrap();
            let (rb, _) = dec_b.decode_frame(&bb, frame).unwrap();
            assert!(bits_equal(&ra.attributes, &rb.attributes));
        }
    }

    #[test]
    fn twin_frames_without_model_cost_under_a_tenth_bit_per_point() {
        // The fixed per-frame cost is one header, a short all-zero run, and
        // the checksum, so the point count must be comfortably past 4000.
        let mut s = spec(2, 6000, [0.0; 3], 85);
        s.depth = 7;
        let frames = frames_of(&s);
        assert_eq!(frames[0].positions, frames[1].positions);
        let mut enc = Encoder::new(CodecConfig::default(), None).unwrap();
        enc.encode_frame(&frames[0]).unwrap();
        let p = enc.encode_frame(&frames[1]).unwrap();
        let bpp = (p.len() * 8) as f64 / frames[1].positions.len() as f64;
        assert!(bpp < 0.1, "twin P-frame cost {bpp} bpp");
    }

    #[test]
    fn rate_distortion_moves_monotonically_with_qstep() {
        let frames = frames_of(&spec(3, 400, [1.0, 1.0, 0.0], 86));
        let mut last_bits = u64::MAX;
        let mut last_psnr = f64::INFINITY;
        for qstep in [2.0, 10.0, 40.0] {
            let config = CodecConfig {
                qstep,
                ..CodecConfig::default()
            };
            let mut enc = Encoder::new(config, None).unwrap();
            let mut dec = Decoder::new(None);
            let mut bits = 0u64;
            let mut worst_psnr = f64::INFINITY;
            for frame in &frames {
                let bytes = enc.encode_frame(frame).unwrap();
                bits += bytes.len() as u64 * 8;
                let (got, _) = dec.decode_frame(&bytes, frame).unwrap();
                let m = crate::metrics::compute_metrics(frame, &got, 0).unwrap();
                worst_psnr = worst_psnr.min(m.psnr_y);
            }
            assert!(bits <= last_bits, "qstep {qstep} grew the stream");
            assert!(worst_psnr <= last_psnr + 1e-9, "qstep {qstep} raised psnr");
            last_bits = bits;
            last_psnr = worst_psnr;
        }
    }

    #[test]
    fn decode_failures_carry_the_right_categories() {
        let frames = frames_of(&spec(2, 150, [1.0, 0.0, 0.0], 87));
        let mut enc = Encoder::new(CodecConfig::default(), None).unwrap();
        let b0 = enc.encode_frame(&frames[0]).unwrap();
        let b1 = enc.encode_frame(&frames[1]).unwrap();

        // P-frame into an empty decoder.
        let mut dec = Decoder::new(None);
        assert!(matches!(
            dec.decode_frame(&b1, &frames[1]),
            Err(Error::MissingReference(_))
        ));

        // Geometry with the wrong point count, then the wrong depth.
        let mut dec = Decoder::new(None);
        let mut short = frames[0].clone();
        short.positions.pop();
        short.attributes.pop();
        assert!(matches!(
            dec.decode_frame(&b0, &short),
            Err(Error::GeometryMismatch(_))
        ));
        let mut wrong_depth = frames[0].clone();
        wrong_depth.depth = 7;
        assert!(matches!(
            dec.decode_frame(&b0, &wrong_depth),
            Err(Error::GeometryMismatch(_))
        ));

        // Corrupting any payload byte must not pass the checksum.
        let mut dec = Decoder::new(None);
        let mut bad = b0.clone();
        let idx = crate::coder::bitstream::HEADER_LEN + 3;
        bad[idx] ^= 0x10;
        assert!(dec.decode_frame(&bad, &frames[0]).is_err());

        // Model-coded stream without / with the wrong model.
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let model = ModelParams::random(ModelFlags::default(), &mut rng);
        let other = ModelParams::random(ModelFlags::default(), &mut rng);
        let mut enc = Encoder::new(CodecConfig::default(), Some(model.clone())).unwrap();
        let b0 = enc.encode_frame(&frames[0]).unwrap();
        let b1 = enc.encode_frame(&frames[1]).unwrap();
        let mut dec = Decoder::new(None);
        dec.decode_frame(&b0, &frames[0]).unwrap();
        assert!(matches!(
            dec.decode_frame(&b1, &frames[1]),
            Err(Error::ModelMissing(_))
        ));
        let mut dec = Decoder::new(Some(other));
        dec.decode_frame(&b0, &frames[0]).unwrap();
        assert!(matches!(
            dec.decode_frame(&b1, &frames[1]),
            Err(Error::ModelMismatch(_))
        ));
    }

    fn tiny_dataset(joint_epochs: usize, lr: f64) -> DatasetSpec {
        DatasetSpec {
            sequences: vec![spec(2, 120, [1.0, 2.0, 3.0], 89)],
            flags: ModelFlags::default(),
            train: TrainConfig {
                lr,
                me_epochs: 10,
                mc_epochs: 10,
                joint_epochs,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn hundred_joint_steps_decrease_the_loss() {
        let (_, log) = train(&tiny_dataset(100, 1e-3)).unwrap();
        let joint: Vec<f64> = log
            .iter()
            .filter(|e| e.stage == "joint")
            .map(|e| e.loss)
            .collect();
        assert_eq!(joint.len(), 100);
        assert!(
            joint[99] < joint[0],
            "joint loss went {} -> {}",
            joint[0],
            joint[99]
        );
    }

    #[test]
    fn absurd_learning_rate_is_reported_as_divergence() {
        let err = train(&tiny_dataset(5, 1e30)).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected(_)));
    }

    #[test]
    fn entropy_only_training_leaves_motion_nets_untouched() {
        let mut dataset = tiny_dataset(3, 1e-3);
        dataset.train.me_epochs = 0;
        dataset.train.mc_epochs = 0;
        dataset.train.lambda_me = 0.0;
        dataset.train.lambda_mc = 0.0;
        let (model, _) = train(&dataset).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(dataset.train.seed);
        let init = ModelParams::random(dataset.flags, &mut rng);
        assert_eq!(motion_flat(&model.me), motion_flat(&init.me));
        assert_eq!(motion_flat(&model.mc), motion_flat(&init.mc));
        assert_ne!(model.flatten(), init.flatten());
    }
}
