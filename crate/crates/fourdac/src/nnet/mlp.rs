//! Dense multilayer perceptrons with traced reverse-mode gradients, plus
//! max-pooling set aggregation over a shared net.

use crate::error::{Error, Result};
use rand::Rng;

/// Negative-side slope of the hidden-layer rectifier.
pub const LEAKY_SLOPE: f64 = 0.1;

/// One affine layer; weights are row-major `[out_dim × in_dim]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Dense {
        Dense {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn affine(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            z.push(acc);
        }
    }
}

/// A stack of dense layers: leaky rectifier after every layer except the
/// last, which stays linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations captured by a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    xs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

impl Mlp {
    /// All-zero parameters: the net computes the zero function.
    pub fn zeros(widths: &[usize]) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        Mlp {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn random(widths: &[usize], rng: &mut impl Rng) -> Mlp {
        let mut net = Mlp::zeros(widths);
        for layer in &mut net.layers {
            let s = (6.0 / layer.in_dim as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = rng.gen_range(-s..s);
            }
        }
        net
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Same shapes, all parameters zero; the canonical gradient holder.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Visits every parameter tensor in a fixed order (w then b per layer).
    pub fn visit_tensors(&self, f: &mut impl FnMut(&Vec<f64>)) {
        for l in &self.layers {
            f(&l.w);
            f(&l.b);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        for l in &mut self.layers {
            f(&mut l.w);
            f(&mut l.b);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} does not match net input {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut z);
            if i < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut z);
        }
        Ok(cur)
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTrace)> {
        self.check_input(x)?;
        let mut trace = MlpTrace::default();
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            trace.xs.push(std::mem::take(&mut cur));
            trace.zs.push(z.clone());
            if i < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                }
            }
            cur = z;
        }
        Ok((cur, trace))
    }

    /// Accumulates parameter gradients into `grads` (a [`Mlp::zeros_like`]
    /// holder) and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, dout: &[f64], grads: &mut Mlp) -> Vec<f64> {
        assert_eq!(dout.len(), self.out_dim());
        assert_eq!(trace.xs.len(), self.layers.len());
        let last = self.layers.len() - 1;
        let mut dcur = dout.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let x = &trace.xs[i];
            let z = &trace.zs[i];
            // Gradient through the activation into the pre-activation.
            let mut dz = dcur;
            if i < last {
                for (d, &zv) in dz.iter_mut().zip(z) {
                    if zv < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                g.b[o] += dz[o];
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut g.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for ii in 0..layer.in_dim {
                    grow[ii] += dz[o] * x[ii];
                    dx[ii] += row[ii] * dz[o];
                }
            }
            dcur = dx;
        }
        dcur
    }
}

/// Traces of every item's forward pass plus, per output dimension, which
/// item won the max.
pub struct SetTrace {
    traces: Vec<MlpTrace>,
    winners: Vec<usize>,
    in_dim: usize,
}

/// Element-wise max over the shared net's outputs on each item. Ties keep
/// the earliest item, so supplying neighbors in Morton order makes the
/// subgradient deterministic.
pub fn set_aggregate(net: &Mlp, items: &[Vec<f64>]) -> Result<(Vec<f64>, SetTrace)> {
    if items.is_empty() {
        return Err(Error::EmptyNeighborhood(
            "set aggregation over zero neighbors".into(),
        ));
    }
    let mut best: Vec<f64> = Vec::new();
    let mut winners: Vec<usize> = Vec::new();
    let mut traces = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let (out, trace) = net.forward_traced(item)?;
        if idx == 0 {
            winners = vec![0; out.len()];
            best = out;
        } else {
            for (d, (b, &o)) in best.iter_mut().zip(&out).enumerate() {
                if o > *b {
                    *b = o;
                    winners[d] = idx;
                }
            }
        }
        traces.push(trace);
    }
    Ok((
        best,
        SetTrace {
            traces,
            winners,
            in_dim: net.in_dim(),
        },
    ))
}

/// Routes `dout` to each dimension's winning item and backpropagates through
/// the shared net; returns one input-gradient per item.
pub fn set_aggregate_backward(
    net: &Mlp,
    trace: &SetTrace,
    dout: &[f64],
    grads: &mut Mlp,
) -> Vec<Vec<f64>> {
    assert_eq!(dout.len(), trace.winners.len());
    let mut per_item: Vec<Vec<f64>> = vec![vec![0.0; net.out_dim()]; trace.traces.len()];
    let mut touched = vec![false; trace.traces.len()];
    for (d, (&w, &g)) in trace.winners.iter().zip(dout).enumerate() {
        per_item[w][d] += g;
        if g != 0.0 {
            touched[w] = true;
        }
    }
    let mut dins = vec![vec![0.0; trace.in_dim]; trace.traces.len()];
    for i in 0..per_item.len() {
        if touched[i] {
            dins[i] = net.backward(&trace.traces[i], &per_item[i], grads);
        }
    }
    dins
}
