//! Temporal conditional contexts for the entropy model.
//!
//! Every coded coefficient gets a context vector assembled from three
//! sources, all of them decoder-computable before (or while) the symbol
//! stream is read:
//!
//! * explicit: the previous frame's coefficient tree, sampled by k-nearest
//!   neighbors at the same tree level around the node's motion-warped
//!   centroid and max-pooled through a shared MLP;
//! * implicit: the transform coefficients of the prediction signal on the
//!   current tree, combined with a same-level spatial max-pool over the
//!   node's neighbors (self excluded);
//! * intra: the parent merge node's already-decoded dequantized coefficient
//!   plus the node's level and log-weight.
//!
//! Contexts never read any current-frame residual coefficient except the
//! parent's, which precedes the node in coding order, so decoding stays
//! causal. Disabled context families contribute exact zeros, which is also
//! what freshly zeroed networks produce.

use crate::error::Result;
use crate::knn::GridIndex;
use crate::nnet::mlp::{set_aggregate, set_aggregate_backward, Mlp, MlpTrace, SetTrace};
use crate::raht::{Children, RahtTree};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Width of each context family's feature vector.
pub const CTX_FEAT: usize = 8;
/// Width of the assembled per-node context.
pub const NODE_CTX: usize = CTX_FEAT;
/// Width of the density model's conditioning input: assembled context plus
/// a channel one-hot.
pub const DENSITY_CTX: usize = NODE_CTX + 3;
/// Width of the intra feature: parent coefficient, level, log-weight.
pub const INTRA_IN: usize = 5;

/// Which context families feed the entropy model. Disabled families are
/// replaced by zeros everywhere, including in the model file hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFlags {
    pub use_explicit: bool,
    pub use_implicit: bool,
}

impl Default for ContextFlags {
    fn default() -> Self {
        ContextFlags {
            use_explicit: true,
            use_implicit: true,
        }
    }
}

/// All context networks. Shapes follow the shared 3-layer pattern with
/// hidden widths 16 and 32 and feature width 8.
#[derive(Debug, Clone)]
pub struct ContextNet {
    /// Explicit: `[c_prev/255 ⊕ Δx/2^depth]` per previous-tree neighbor.
    pub explicit: Mlp,
    /// Implicit node feature from the node's own prediction coefficient.
    pub implicit_n: Mlp,
    /// Implicit spatial pool: `[c_p(j)/255 ⊕ Δx/2^depth]` per neighbor.
    pub implicit_s: Mlp,
    /// Implicit fusion of `[N ⊕ S]`.
    pub implicit_f: Mlp,
    /// Intra embedding of the 5-wide intra feature.
    pub intra: Mlp,
    /// Final assembly of `[E ⊕ I ⊕ intra]` into the node context.
    pub assemble: Mlp,
}

impl ContextNet {
    pub fn zeros() -> ContextNet {
        ContextNet {
            explicit: Mlp::zeros(&[6, 16, 32, CTX_FEAT]),
            implicit_n: Mlp::zeros(&[3, 16, 32, CTX_FEAT]),
            implicit_s: Mlp::zeros(&[6, 16, 32, CTX_FEAT]),
            implicit_f: Mlp::zeros(&[2 * CTX_FEAT, 16, 32, CTX_FEAT]),
            intra: Mlp::zeros(&[INTRA_IN, 16, 32, CTX_FEAT]),
            assemble: Mlp::zeros(&[3 * CTX_FEAT, 16, 32, NODE_CTX]),
        }
    }

    pub fn random(rng: &mut impl Rng) -> ContextNet {
        ContextNet {
            explicit: Mlp::random(&[6, 16, 32, CTX_FEAT], rng),
            implicit_n: Mlp::random(&[3, 16, 32, CTX_FEAT], rng),
            implicit_s: Mlp::random(&[6, 16, 32, CTX_FEAT], rng),
            implicit_f: Mlp::random(&[2 * CTX_FEAT, 16, 32, CTX_FEAT], rng),
            intra: Mlp::random(&[INTRA_IN, 16, 32, CTX_FEAT], rng),
            assemble: Mlp::random(&[3 * CTX_FEAT, 16, 32, NODE_CTX], rng),
        }
    }

    pub fn zeros_like(&self) -> ContextNet {
        ContextNet {
            explicit: self.explicit.zeros_like(),
            implicit_n: self.implicit_n.zeros_like(),
            implicit_s: self.implicit_s.zeros_like(),
            implicit_f: self.implicit_f.zeros_like(),
            intra: self.intra.zeros_like(),
            assemble: self.assemble.zeros_like(),
        }
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Vec<f64>)) {
        self.explicit.visit_tensors(f);
        self.implicit_n.visit_tensors(f);
        self.implicit_s.visit_tensors(f);
        self.implicit_f.visit_tensors(f);
        self.intra.visit_tensors(f);
        self.assemble.visit_tensors(f);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        self.explicit.visit_tensors_mut(f);
        self.implicit_n.visit_tensors_mut(f);
        self.implicit_s.visit_tensors_mut(f);
        self.implicit_f.visit_tensors_mut(f);
        self.intra.visit_tensors_mut(f);
        self.assemble.visit_tensors_mut(f);
    }
}

/// Per-coded-node explicit and implicit features, indexed by position in
/// the tree's coding order.
#[derive(Debug, Clone)]
pub struct FrameContexts {
    pub explicit: Vec<[f64; CTX_FEAT]>,
    pub implicit: Vec<[f64; CTX_FEAT]>,
}

/// One coded node's implicit-path bookkeeping.
pub struct ImplicitTrace {
    n: MlpTrace,
    s: Option<SetTrace>,
    f: MlpTrace,
}

/// Reverse-pass bookkeeping for a whole frame's contexts.
pub struct ContextTraces {
    explicit: Vec<Option<SetTrace>>,
    implicit: Vec<Option<ImplicitTrace>>,
}

/// Merge nodes per level with their centroids, in Morton order.
struct LevelPools {
    ids: HashMap<u16, Vec<u32>>,
    centroids: HashMap<u16, Vec<[f64; 3]>>,
    indexes: HashMap<u16, GridIndex>,
}

impl LevelPools {
    fn build(tree: &RahtTree<f64>) -> LevelPools {
        let mut ids: HashMap<u16, Vec<u32>> = HashMap::new();
        let mut centroids: HashMap<u16, Vec<[f64; 3]>> = HashMap::new();
        for &idx in &tree.coding_order {
            let node = &tree.nodes[idx as usize];
            ids.entry(node.level).or_default().push(idx);
            centroids.entry(node.level).or_default().push(node.centroid);
        }
        LevelPools {
            ids,
            centroids,
            indexes: HashMap::new(),
        }
    }

    fn index(&mut self, level: u16) -> Option<(&Vec<u32>, &Vec<[f64; 3]>, &GridIndex)> {
        let ids = self.ids.get(&level)?;
        let centroids = &self.centroids[&level];
        let index = self
            .indexes
            .entry(level)
            .or_insert_with(|| GridIndex::new(centroids));
        Some((ids, centroids, index))
    }
}

/// Explicit contexts for every coded node of the current tree against the
/// previous tree's coefficients. `prev_coeffs` is indexed by previous node
/// id; only merge-node entries are read. Levels with no previous merge node
/// yield a zero feature.
pub fn explicit_contexts_traced(
    net: &Mlp,
    prev_tree: &RahtTree<f64>,
    prev_coeffs: &[[f64; 3]],
    cur_tree: &RahtTree<f64>,
    node_vectors: &[[f64; 3]],
    k: usize,
) -> Result<(Vec<[f64; CTX_FEAT]>, Vec<Option<SetTrace>>)> {
    let pos_scale = (1u64 << cur_tree.depth) as f64;
    let mut pools = LevelPools::build(prev_tree);
    let mut out = Vec::with_capacity(cur_tree.coding_order.len());
    let mut traces = Vec::with_capacity(cur_tree.coding_order.len());
    for &ni in &cur_tree.coding_order {
        let node = &cur_tree.nodes[ni as usize];
        let Some((ids, centroids, index)) = pools.index(node.level) else {
            out.push([0.0; CTX_FEAT]);
            traces.push(None);
            continue;
        };
        let v = node_vectors[ni as usize];
        let xw = [
            node.centroid[0] + v[0],
            node.centroid[1] + v[1],
            node.centroid[2] + v[2],
        ];
        let items: Vec<Vec<f64>> = index
            .nearest(xw, k)
            .iter()
            .map(|&(j, _)| {
                let j = j as usize;
                let c = prev_coeffs[ids[j] as usize];
                vec![
                    c[0] / 255.0,
                    c[1] / 255.0,
                    c[2] / 255.0,
                    (centroids[j][0] - xw[0]) / pos_scale,
                    (centroids[j][1] - xw[1]) / pos_scale,
                    (centroids[j][2] - xw[2]) / pos_scale,
                ]
            })
            .collect();
        let (e, trace) = set_aggregate(net, &items)?;
        let mut arr = [0.0; CTX_FEAT];
        arr.copy_from_slice(&e);
        out.push(arr);
        traces.push(Some(trace));
    }
    Ok((out, traces))
}

/// Implicit contexts from the prediction coefficients `cp_highs` (indexed
/// by node id) on the current tree. The spatial pool excludes the node
/// itself; a level with a single merge node gets a zero pool feature.
pub fn implicit_contexts_traced(
    net: &ContextNet,
    tree: &RahtTree<f64>,
    cp_highs: &[[f64; 3]],
    k: usize,
) -> Result<(Vec<[f64; CTX_FEAT]>, Vec<Option<ImplicitTrace>>)> {
    let pos_scale = (1u64 << tree.depth) as f64;
    let mut pools = LevelPools::build(tree);
    let mut out = Vec::with_capacity(tree.coding_order.len());
    let mut traces = Vec::with_capacity(tree.coding_order.len());
    for &ni in &tree.coding_order {
        let node = &tree.nodes[ni as usize];
        let cp = cp_highs[ni as usize];
        let (n_out, n_trace) = net
            .implicit_n
            .forward_traced(&[cp[0] / 255.0, cp[1] / 255.0, cp[2] / 255.0])?;

        let (ids, centroids, index) = pools.index(node.level).expect("own level is populated");
        let items: Vec<Vec<f64>> = index
            .nearest(node.centroid, k + 1)
            .iter()
            .filter(|&&(j, _)| ids[j as usize] != ni)
            .take(k)
            .map(|&(j, _)| {
                let j = j as usize;
                let c = cp_highs[ids[j] as usize];
                vec![
                    c[0] / 255.0,
                    c[1] / 255.0,
                    c[2] / 255.0,
                    (centroids[j][0] - node.centroid[0]) / pos_scale,
                    (centroids[j][1] - node.centroid[1]) / pos_scale,
                    (centroids[j][2] - node.centroid[2]) / pos_scale,
                ]
            })
            .collect();
        let (s_out, s_trace) = if items.is_empty() {
            (vec![0.0; CTX_FEAT], None)
        } else {
            let (s, t) = set_aggregate(&net.implicit_s, &items)?;
            (s, Some(t))
        };

        let mut cat = Vec::with_capacity(2 * CTX_FEAT);
        cat.extend_from_slice(&n_out);
        cat.extend_from_slice(&s_out);
        let (i_out, f_trace) = net.implicit_f.forward_traced(&cat)?;
        let mut arr = [0.0; CTX_FEAT];
        arr.copy_from_slice(&i_out);
        out.push(arr);
        traces.push(Some(ImplicitTrace {
            n: n_trace,
            s: s_trace,
            f: f_trace,
        }));
    }
    Ok((out, traces))
}

/// Both context families for a frame, honoring the flags. `prev` carries
/// the previous tree and its per-node coefficients; pass `None` when there
/// is no reference (the explicit family is then zero).
pub fn frame_contexts_traced(
    net: &ContextNet,
    flags: ContextFlags,
    prev: Option<(&RahtTree<f64>, &[[f64; 3]])>,
    cur_tree: &RahtTree<f64>,
    cp_highs: &[[f64; 3]],
    node_vectors: &[[f64; 3]],
    k: usize,
) -> Result<(FrameContexts, ContextTraces)> {
    let coded = cur_tree.coding_order.len();
    let (explicit, e_traces) = match (flags.use_explicit, prev) {
        (true, Some((pt, pc))) => {
            explicit_contexts_traced(&net.explicit, pt, pc, cur_tree, node_vectors, k)?
        }
        _ => (vec![[0.0; CTX_FEAT]; coded], (0..coded).map(|_| None).collect()),
    };
    let (implicit, i_traces) = if flags.use_implicit {
        implicit_contexts_traced(net, cur_tree, cp_highs, k)?
    } else {
        (vec![[0.0; CTX_FEAT]; coded], (0..coded).map(|_| None).collect())
    };
    Ok((
        FrameContexts { explicit, implicit },
        ContextTraces {
            explicit: e_traces,
            implicit: i_traces,
        },
    ))
}

/// [`frame_contexts_traced`] without keeping the reverse-pass bookkeeping.
pub fn frame_contexts(
    net: &ContextNet,
    flags: ContextFlags,
    prev: Option<(&RahtTree<f64>, &[[f64; 3]])>,
    cur_tree: &RahtTree<f64>,
    cp_highs: &[[f64; 3]],
    node_vectors: &[[f64; 3]],
    k: usize,
) -> Result<FrameContexts> {
    frame_contexts_traced(net, flags, prev, cur_tree, cp_highs, node_vectors, k)
        .map(|(c, _)| c)
}

/// Nearest ancestor of `node_id` that carries a coded coefficient; `None`
/// for the topmost merge node.
pub fn parent_merge(tree: &RahtTree<f64>, node_id: u32) -> Option<u32> {
    let mut cur = tree.nodes[node_id as usize].parent;
    while let Some(p) = cur {
        if matches!(tree.nodes[p as usize].children, Children::Two(_, _)) {
            return Some(p);
        }
        cur = tree.nodes[p as usize].parent;
    }
    None
}

/// The 5-wide intra feature: parent's dequantized coefficient (zeros at the
/// top), level normalized by the tree height, and log point weight.
pub fn intra_input(
    tree: &RahtTree<f64>,
    node_id: u32,
    parent_dequant: [f64; 3],
) -> [f64; INTRA_IN] {
    let node = &tree.nodes[node_id as usize];
    [
        parent_dequant[0] / 255.0,
        parent_dequant[1] / 255.0,
        parent_dequant[2] / 255.0,
        node.level as f64 / (3.0 * tree.depth as f64),
        (node.weight as f64).ln(),
    ]
}

/// Assembles one node's context from its families and the intra feature.
pub fn assemble_context(
    net: &ContextNet,
    e: &[f64; CTX_FEAT],
    i: &[f64; CTX_FEAT],
    intra_in: &[f64; INTRA_IN],
) -> Result<Vec<f64>> {
    let intra = net.intra.forward(intra_in)?;
    let mut cat = Vec::with_capacity(3 * CTX_FEAT);
    cat.extend_from_slice(e);
    cat.extend_from_slice(i);
    cat.extend_from_slice(&intra);
    net.assemble.forward(&cat)
}

/// [`assemble_context`] keeping traces for the reverse pass.
pub fn assemble_context_traced(
    net: &ContextNet,
    e: &[f64; CTX_FEAT],
    i: &[f64; CTX_FEAT],
    intra_in: &[f64; INTRA_IN],
) -> Result<(Vec<f64>, MlpTrace, MlpTrace)> {
    let (intra, intra_trace) = net.intra.forward_traced(intra_in)?;
    let mut cat = Vec::with_capacity(3 * CTX_FEAT);
    cat.extend_from_slice(e);
    cat.extend_from_slice(i);
    cat.extend_from_slice(&intra);
    let (out, asm_trace) = net.assemble.forward_traced(&cat)?;
    Ok((out, intra_trace, asm_trace))
}

/// Reverse of [`assemble_context_traced`]: accumulates gradients for the
/// assembly and intra nets, returning `(dE, dI)` for the family backwards.
pub fn assemble_backward(
    net: &ContextNet,
    intra_trace: &MlpTrace,
    asm_trace: &MlpTrace,
    dctx: &[f64],
    grads: &mut ContextNet,
) -> ([f64; CTX_FEAT], [f64; CTX_FEAT]) {
    let dcat = net.assemble.backward(asm_trace, dctx, &mut grads.assemble);
    let mut de = [0.0; CTX_FEAT];
    let mut di = [0.0; CTX_FEAT];
    de.copy_from_slice(&dcat[..CTX_FEAT]);
    di.copy_from_slice(&dcat[CTX_FEAT..2 * CTX_FEAT]);
    net.intra
        .backward(intra_trace, &dcat[2 * CTX_FEAT..], &mut grads.intra);
    (de, di)
}

/// Routes per-node explicit gradients through the pooled MLP.
pub fn explicit_backward(
    net: &Mlp,
    traces: &ContextTraces,
    dout: &[[f64; CTX_FEAT]],
    grads: &mut Mlp,
) {
    for (trace, d) in traces.explicit.iter().zip(dout) {
        if let Some(t) = trace {
            set_aggregate_backward(net, t, d, grads);
        }
    }
}

/// Routes per-node implicit gradients through fusion, node, and pool nets.
pub fn implicit_backward(
    net: &ContextNet,
    traces: &ContextTraces,
    dout: &[[f64; CTX_FEAT]],
    grads: &mut ContextNet,
) {
    for (trace, d) in traces.implicit.iter().zip(dout) {
        let Some(t) = trace else { continue };
        let dnf = net.implicit_f.backward(&t.f, d, &mut grads.implicit_f);
        net.implicit_n
            .backward(&t.n, &dnf[..CTX_FEAT], &mut grads.implicit_n);
        if let Some(st) = &t.s {
            set_aggregate_backward(&net.implicit_s, st, &dnf[CTX_FEAT..], &mut grads.implicit_s);
        }
    }
}

/// Density conditioning input: node context plus channel one-hot.
pub fn channel_context(ctx: &[f64], channel: usize) -> Vec<f64> {
    debug_assert!(channel < 3);
    let mut out = Vec::with_capacity(DENSITY_CTX);
    out.extend_from_slice(ctx);
    for c in 0..3 {
        out.push(if c == channel { 1.0 } else { 0.0 });
    }
    out
}
