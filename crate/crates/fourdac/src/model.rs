//! Learned-parameter files.
//!
//! A model file carries every learned tensor of the codec: the motion
//! estimation and compensation nets, the context nets, and the density
//! model, together with the flags needed to rebuild the same architecture.
//! The format is versioned and self-checking; the trailing content hash is
//! echoed in every predicted frame's header so a decoder can reject a
//! mismatched model before touching the payload.
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! magic "4DAM" | version u8 | use_explicit u8 | use_implicit u8
//! density_variant u8 (0 = conditional Laplace, 1 = factorized CDF)
//! k_neighbors u8 | tensor_count u16
//! per tensor: name_len u8, name, rank u8, dims u32 × rank, data f64 × ∏dims
//! content_hash u64 (FNV-1a over every preceding byte)
//! ```

use crate::context::{ContextFlags, ContextNet, DENSITY_CTX};
use crate::error::{Error, Result};
use crate::motion::MotionNet;
use crate::nnet::density::{DensityModel, DensityVariant};
use crate::nnet::mlp::Mlp;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MODEL_MAGIC: [u8; 4] = *b"4DAM";
pub const MODEL_VERSION: u8 = 1;

/// Architecture switches stored in the model file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub context: ContextFlags,
    pub density: DensityVariant,
    pub k_neighbors: usize,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            context: ContextFlags::default(),
            density: DensityVariant::ConditionalLaplace,
            k_neighbors: 3,
        }
    }
}

/// Every learned parameter of the codec.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub flags: ModelFlags,
    pub me: MotionNet,
    pub mc: MotionNet,
    pub ctx: ContextNet,
    pub density: DensityModel,
}

impl ModelParams {
    pub fn zeros(flags: ModelFlags) -> ModelParams {
        ModelParams {
            flags,
            me: MotionNet::zeros(),
            mc: MotionNet::zeros(),
            ctx: ContextNet::zeros(),
            density: match flags.density {
                DensityVariant::ConditionalLaplace => DensityModel::laplace_zeros(DENSITY_CTX),
                DensityVariant::FactorizedCdf => DensityModel::factorized_zeros(DENSITY_CTX),
            },
        }
    }

    pub fn random(flags: ModelFlags, rng: &mut impl Rng) -> ModelParams {
        ModelParams {
            flags,
            me: MotionNet::random(rng),
            mc: MotionNet::random(rng),
            ctx: ContextNet::random(rng),
            density: match flags.density {
                DensityVariant::ConditionalLaplace => {
                    DensityModel::laplace_random(DENSITY_CTX, rng)
                }
                DensityVariant::FactorizedCdf => DensityModel::factorized_random(DENSITY_CTX, rng),
            },
        }
    }

    /// Same shapes, all parameters zero; the canonical gradient holder.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            flags: self.flags,
            me: self.me.zeros_like(),
            mc: self.mc.zeros_like(),
            ctx: self.ctx.zeros_like(),
            density: self.density.zeros_like(),
        }
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Vec<f64>)) {
        self.me.visit_tensors(f);
        self.mc.visit_tensors(f);
        self.ctx.visit_tensors(f);
        self.density.visit_tensors(f);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        self.me.visit_tensors_mut(f);
        self.mc.visit_tensors_mut(f);
        self.ctx.visit_tensors_mut(f);
        self.density.visit_tensors_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |t| n += t.len());
        n
    }

    /// All parameters in visit order, for flat optimizers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        self.visit_tensors(&mut |t| flat.extend_from_slice(t));
        flat
    }

    /// Writes a flat vector produced by [`flatten`](Self::flatten) back.
    pub fn assign(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.visit_tensors_mut(&mut |t| {
            let n = t.len();
            t.copy_from_slice(&flat[i..i + n]);
            i += n;
        });
        assert_eq!(i, flat.len(), "flat parameter length mismatch");
    }

    /// Named tensors with shapes, in visit order.
    fn tensor_table(&self) -> Vec<(String, Vec<u32>, Vec<f64>)> {
        let mut out = Vec::new();
        mlp_tensors("me.round1", &self.me.round1, &mut out);
        mlp_tensors("me.round2", &self.me.round2, &mut out);
        mlp_tensors("me.head", &self.me.head, &mut out);
        out.push((
            "me.scale".into(),
            vec![self.me.scale.len() as u32],
            self.me.scale.clone(),
        ));
        mlp_tensors("mc.round1", &self.mc.round1, &mut out);
        mlp_tensors("mc.round2", &self.mc.round2, &mut out);
        mlp_tensors("mc.head", &self.mc.head, &mut out);
        out.push((
            "mc.scale".into(),
            vec![self.mc.scale.len() as u32],
            self.mc.scale.clone(),
        ));
        mlp_tensors("ctx.explicit", &self.ctx.explicit, &mut out);
        mlp_tensors("ctx.implicit_n", &self.ctx.implicit_n, &mut out);
        mlp_tensors("ctx.implicit_s", &self.ctx.implicit_s, &mut out);
        mlp_tensors("ctx.implicit_f", &self.ctx.implicit_f, &mut out);
        mlp_tensors("ctx.intra", &self.ctx.intra, &mut out);
        mlp_tensors("ctx.assemble", &self.ctx.assemble, &mut out);
        match &self.density {
            DensityModel::ConditionalLaplace(m) => {
                mlp_tensors("density.net", &m.net, &mut out);
            }
            DensityModel::FactorizedCdf(m) => {
                let h = m.a1.len() as u32;
                let c = m.ctx_width as u32;
                out.push(("density.a1".into(), vec![h], m.a1.clone()));
                out.push(("density.w1".into(), vec![h, c], m.w1.clone()));
                out.push(("density.b1".into(), vec![h], m.b1.clone()));
                out.push(("density.a2".into(), vec![h], m.a2.clone()));
                out.push(("density.w2".into(), vec![c], m.w2.clone()));
                out.push(("density.b2".into(), vec![1], m.b2.clone()));
            }
        }
        out
    }

    /// Everything before the trailing hash.
    fn body_bytes(&self) -> Vec<u8> {
        let table = self.tensor_table();
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(self.flags.context.use_explicit as u8);
        out.push(self.flags.context.use_implicit as u8);
        out.push(match self.flags.density {
            DensityVariant::ConditionalLaplace => 0,
            DensityVariant::FactorizedCdf => 1,
        });
        out.push(self.flags.k_neighbors as u8);
        out.extend_from_slice(&(table.len() as u16).to_le_bytes());
        for (name, dims, data) in &table {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// The hash stored at the end of the file and echoed in frame headers.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(&self.body_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        let hash = fnv1a64(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedPayload(
                "model file shorter than its hash".into(),
            ));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::ParseError("model content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic("not a model file".into()));
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(format!("model version {version}")));
        }
        let use_explicit = r.u8()? != 0;
        let use_implicit = r.u8()? != 0;
        let density = match r.u8()? {
            0 => DensityVariant::ConditionalLaplace,
            1 => DensityVariant::FactorizedCdf,
            v => return Err(Error::ParseError(format!("unknown density variant {v}"))),
        };
        let k_neighbors = r.u8()? as usize;
        let flags = ModelFlags {
            context: ContextFlags {
                use_explicit,
                use_implicit,
            },
            density,
            k_neighbors,
        };
        let count = r.u16()? as usize;

        let mut model = ModelParams::zeros(flags);
        let expected = model.tensor_table();
        if count != expected.len() {
            return Err(Error::ParseError(format!(
                "model holds {count} tensors, architecture needs {}",
                expected.len()
            )));
        }
        let mut parsed: Vec<Vec<f64>> = Vec::with_capacity(count);
        for (name, dims, _) in &expected {
            let name_len = r.u8()? as usize;
            let got = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::ParseError("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::ParseError(format!(
                    "tensor {got:?} where {name:?} was expected"
                )));
            }
            let rank = r.u8()? as usize;
            let mut len = 1usize;
            let mut got_dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u32()?;
                got_dims.push(d);
                len *= d as usize;
            }
            if got_dims != *dims {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: shape {got_dims:?} does not match {dims:?}"
                )));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64()?);
            }
            parsed.push(data);
        }
        if r.pos != body.len() {
            return Err(Error::ParseError("trailing bytes after tensors".into()));
        }
        let mut it = parsed.into_iter();
        model.visit_tensors_mut(&mut |t| {
            *t = it.next().expect("tensor count was validated");
        });
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        ModelParams::from_bytes(&std::fs::read(path)?)
    }
}

fn mlp_tensors(name: &str, net: &Mlp, out: &mut Vec<(String, Vec<u32>, Vec<f64>)>) {
    for (i, layer) in net.layers.iter().enumerate() {
        out.push((
            format!("{name}.w{i}"),
            vec![layer.out_dim as u32, layer.in_dim as u32],
            layer.w.clone(),
        ));
        out.push((
            format!("{name}.b{i}"),
            vec![layer.out_dim as u32],
            layer.b.clone(),
        ));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload("model file ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// 64-bit FNV-1a over a byte slice.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// 32-bit FNV-1a over a byte slice.
pub(crate) fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h = 0x811c_9dc5u32;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}
