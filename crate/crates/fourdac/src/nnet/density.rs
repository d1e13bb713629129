//! Discretized density models over quantized transform coefficients.
//!
//! Both variants turn a context vector into a distribution over the coder's
//! alphabet: integer coefficients in `[−K_MAX, K_MAX]` plus two escape
//! symbols that fold in everything beyond (their magnitudes travel as raw
//! bits). Probabilities are cell masses of a continuous CDF,
//! `P(k) = F(k+½) − F(k−½)`, so the alphabet sums to exactly one by
//! telescoping. The conditional-Laplace variant predicts `(μ, log b)` with a
//! small MLP and uses the closed-form Laplace CDF; the factorized variant is
//! a monotone network in the coefficient with the context entering as an
//! additive bias, weights constrained non-negative through softplus.

use crate::error::{Error, Result};
use crate::nnet::mlp::Mlp;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest coefficient magnitude carried by a regular symbol.
pub const K_MAX: i32 = 1023;
/// Regular symbols plus the two escapes.
pub const ALPHABET: usize = 2 * K_MAX as usize + 3;
/// Symbol index for coefficients below −K_MAX.
pub const ESCAPE_LO: usize = 2 * K_MAX as usize + 1;
/// Symbol index for coefficients above K_MAX.
pub const ESCAPE_HI: usize = ESCAPE_LO + 1;

/// Training-time probability floor: the coder's quantizer guarantees at
/// least this much mass per symbol, so a symbol never costs more than ~16
/// bits; the cross-entropy loss charges the same cap.
pub const P_FLOOR: f64 = 1.0 / 65536.0;

/// Coefficient scale inside the factorized network.
const X_SCALE: f64 = 64.0;
/// Hidden width of the factorized network.
const FACT_HIDDEN: usize = 16;
/// `log b` is clamped here to keep the Laplace scale finite.
const LOG_B_RANGE: f64 = 10.0;

/// Maps a coefficient to its symbol index.
pub fn symbol_index(k: i32) -> usize {
    if k < -K_MAX {
        ESCAPE_LO
    } else if k > K_MAX {
        ESCAPE_HI
    } else {
        (k + K_MAX) as usize
    }
}

/// Inverse of [`symbol_index`] for regular (non-escape) symbols.
pub fn symbol_value(index: usize) -> Option<i32> {
    if index < ESCAPE_LO {
        Some(index as i32 - K_MAX)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityVariant {
    ConditionalLaplace,
    FactorizedCdf,
}

#[derive(Clone, Debug)]
pub struct LaplaceModel {
    pub net: Mlp,
}

/// Monotone scalar network `F(x | ctx) = σ(u)` with
/// `u = softplus(a2)·tanh(softplus(a1)·x/X_SCALE + W1·ctx + b1) + w2·ctx + b2`.
#[derive(Clone, Debug)]
pub struct FactorizedModel {
    pub a1: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub a2: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ctx_width: usize,
}

#[derive(Clone, Debug)]
pub enum DensityModel {
    ConditionalLaplace(LaplaceModel),
    FactorizedCdf(FactorizedModel),
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn laplace_cdf(mu: f64, b: f64, x: f64) -> f64 {
    let t = (x - mu) / b;
    if t <= 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

/// Mass of the unit cell around `k`. Cells fully on one side of μ use the
/// product form, which keeps relative precision where the CDF difference
/// would cancel against 1.
fn laplace_cell(mu: f64, b: f64, k: f64) -> f64 {
    let lo = k - 0.5;
    let hi = k + 0.5;
    let gap = 1.0 - (-1.0 / b).exp();
    if hi <= mu {
        0.5 * ((hi - mu) / b).exp() * gap
    } else if lo >= mu {
        0.5 * ((mu - lo) / b).exp() * gap
    } else {
        (laplace_cdf(mu, b, hi) - laplace_cdf(mu, b, lo)).max(0.0)
    }
}

impl DensityModel {
    pub fn laplace_zeros(ctx_width: usize) -> DensityModel {
        DensityModel::ConditionalLaplace(LaplaceModel {
            net: Mlp::zeros(&[ctx_width, 32, 2]),
        })
    }

    pub fn laplace_random(ctx_width: usize, rng: &mut impl Rng) -> DensityModel {
        DensityModel::ConditionalLaplace(LaplaceModel {
            net: Mlp::random(&[ctx_width, 32, 2], rng),
        })
    }

    pub fn factorized_zeros(ctx_width: usize) -> DensityModel {
        DensityModel::FactorizedCdf(FactorizedModel {
            a1: vec![0.0; FACT_HIDDEN],
            w1: vec![0.0; FACT_HIDDEN * ctx_width],
            b1: vec![0.0; FACT_HIDDEN],
            a2: vec![0.0; FACT_HIDDEN],
            w2: vec![0.0; ctx_width],
            b2: vec![0.0; 1],
            ctx_width,
        })
    }

    /// Random thresholds and slopes break the hidden-unit symmetry that the
    /// all-zero start cannot escape.
    pub fn factorized_random(ctx_width: usize, rng: &mut impl Rng) -> DensityModel {
        let mut m = match Self::factorized_zeros(ctx_width) {
            DensityModel::FactorizedCdf(m) => m,
            _ => unreachable!(),
        };
        for v in m.a1.iter_mut().chain(m.a2.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in m.w1.iter_mut().chain(m.w2.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in m.b1.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        DensityModel::FactorizedCdf(m)
    }

    pub fn variant(&self) -> DensityVariant {
        match self {
            DensityModel::ConditionalLaplace(_) => DensityVariant::ConditionalLaplace,
            DensityModel::FactorizedCdf(_) => DensityVariant::FactorizedCdf,
        }
    }

    pub fn ctx_width(&self) -> usize {
        match self {
            DensityModel::ConditionalLaplace(m) => m.net.in_dim(),
            DensityModel::FactorizedCdf(m) => m.ctx_width,
        }
    }

    pub fn zeros_like(&self) -> DensityModel {
        match self {
            DensityModel::ConditionalLaplace(m) => {
                DensityModel::ConditionalLaplace(LaplaceModel {
                    net: m.net.zeros_like(),
                })
            }
            DensityModel::FactorizedCdf(m) => DensityModel::FactorizedCdf(FactorizedModel {
                a1: vec![0.0; m.a1.len()],
                w1: vec![0.0; m.w1.len()],
                b1: vec![0.0; m.b1.len()],
                a2: vec![0.0; m.a2.len()],
                w2: vec![0.0; m.w2.len()],
                b2: vec![0.0; 1],
                ctx_width: m.ctx_width,
            }),
        }
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Vec<f64>)) {
        match self {
            DensityModel::ConditionalLaplace(m) => m.net.visit_tensors(f),
            DensityModel::FactorizedCdf(m) => {
                f(&m.a1);
                f(&m.w1);
                f(&m.b1);
                f(&m.a2);
                f(&m.w2);
                f(&m.b2);
            }
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        match self {
            DensityModel::ConditionalLaplace(m) => m.net.visit_tensors_mut(f),
            DensityModel::FactorizedCdf(m) => {
                f(&mut m.a1);
                f(&mut m.w1);
                f(&mut m.b1);
                f(&mut m.a2);
                f(&mut m.w2);
                f(&mut m.b2);
            }
        }
    }

    fn laplace_params(&self, ctx: &[f64]) -> Result<(f64, f64)> {
        let DensityModel::ConditionalLaplace(m) = self else {
            unreachable!()
        };
        let out = m.net.forward(ctx)?;
        let mu = out[0];
        let logb = out[1].clamp(-LOG_B_RANGE, LOG_B_RANGE);
        Ok((mu, logb.exp()))
    }

    /// Context-independent precomputation for the factorized net: per-hidden
    /// slope, bias (context folded in), output weight, and the scalar tail.
    fn factorized_basis(&self, ctx: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let DensityModel::FactorizedCdf(m) = self else {
            unreachable!()
        };
        if ctx.len() != m.ctx_width {
            return Err(Error::ShapeMismatch(format!(
                "context width {} does not match model width {}",
                ctx.len(),
                m.ctx_width
            )));
        }
        let h = m.a1.len();
        let mut slope = Vec::with_capacity(h);
        let mut bias = Vec::with_capacity(h);
        let mut wout = Vec::with_capacity(h);
        for i in 0..h {
            slope.push(softplus(m.a1[i]));
            let mut acc = m.b1[i];
            for (w, c) in m.w1[i * m.ctx_width..(i + 1) * m.ctx_width].iter().zip(ctx) {
                acc += w * c;
            }
            bias.push(acc);
            wout.push(softplus(m.a2[i]));
        }
        let mut tail = m.b2[0];
        for (w, c) in m.w2.iter().zip(ctx) {
            tail += w * c;
        }
        Ok((slope, bias, wout, tail))
    }

    fn factorized_u(basis: &(Vec<f64>, Vec<f64>, Vec<f64>, f64), x: f64) -> f64 {
        let (slope, bias, wout, tail) = basis;
        let xn = x / X_SCALE;
        let mut u = *tail;
        for i in 0..slope.len() {
            u += wout[i] * (slope[i] * xn + bias[i]).tanh();
        }
        u
    }

    /// The continuous CDF the cell masses come from; monotone in `x`.
    pub fn cdf(&self, ctx: &[f64], x: f64) -> Result<f64> {
        match self {
            DensityModel::ConditionalLaplace(_) => {
                let (mu, b) = self.laplace_params(ctx)?;
                Ok(laplace_cdf(mu, b, x))
            }
            DensityModel::FactorizedCdf(_) => {
                let basis = self.factorized_basis(ctx)?;
                Ok(sigmoid(Self::factorized_u(&basis, x)))
            }
        }
    }

    /// Raw model probability of coefficient `k` (escapes included via
    /// folding); the coding path floors and quantizes afterwards.
    pub fn symbol_probability(&self, ctx: &[f64], k: i32) -> Result<f64> {
        let idx = symbol_index(k);
        if idx == ESCAPE_LO {
            return self.cdf(ctx, -(K_MAX as f64) - 0.5);
        }
        if idx == ESCAPE_HI {
            return Ok(1.0 - self.cdf(ctx, K_MAX as f64 + 0.5)?);
        }
        match self {
            DensityModel::ConditionalLaplace(_) => {
                let (mu, b) = self.laplace_params(ctx)?;
                Ok(laplace_cell(mu, b, k as f64))
            }
            DensityModel::FactorizedCdf(_) => {
                let lo = self.cdf(ctx, k as f64 - 0.5)?;
                let hi = self.cdf(ctx, k as f64 + 0.5)?;
                Ok((hi - lo).max(0.0))
            }
        }
    }

    /// Full distribution over the alphabet, index `k + K_MAX` for regular
    /// symbols, escapes last. Sums to one up to rounding.
    pub fn probabilities(&self, ctx: &[f64]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; ALPHABET];
        match self {
            DensityModel::ConditionalLaplace(_) => {
                let (mu, b) = self.laplace_params(ctx)?;
                // Geometric decay away from the cell containing μ keeps this
                // at O(1) exponentials for the whole table.
                let r = (-1.0 / b).exp();
                let m = (mu.round() as i64).clamp(-(K_MAX as i64), K_MAX as i64) as i32;
                p[symbol_index(m)] = laplace_cell(mu, b, m as f64);
                if m < K_MAX {
                    let mut v = laplace_cell(mu, b, (m + 1) as f64);
                    for k in m + 1..=K_MAX {
                        p[symbol_index(k)] = v;
                        v *= r;
                    }
                }
                if m > -K_MAX {
                    let mut v = laplace_cell(mu, b, (m - 1) as f64);
                    for k in (-K_MAX..=m - 1).rev() {
                        p[symbol_index(k)] = v;
                        v *= r;
                    }
                }
                p[ESCAPE_LO] = laplace_cdf(mu, b, -(K_MAX as f64) - 0.5);
                p[ESCAPE_HI] = 1.0 - laplace_cdf(mu, b, K_MAX as f64 + 0.5);
            }
            DensityModel::FactorizedCdf(_) => {
                let basis = self.factorized_basis(ctx)?;
                let mut prev = sigmoid(Self::factorized_u(&basis, -(K_MAX as f64) - 0.5));
                p[ESCAPE_LO] = prev;
                for k in -K_MAX..=K_MAX {
                    let cur = sigmoid(Self::factorized_u(&basis, k as f64 + 0.5));
                    p[symbol_index(k)] = (cur - prev).max(0.0);
                    prev = cur;
                }
                p[ESCAPE_HI] = 1.0 - prev;
            }
        }
        Ok(p)
    }

    /// Cross-entropy of one coded symbol and its gradients: accumulates
    /// parameter gradients into `grads` (a [`DensityModel::zeros_like`]
    /// holder) and returns `(−ln max(P, P_FLOOR), dL/dctx)`. In the floored
    /// region the true coding cost is flat, so the gradient is zero.
    pub fn ce_backward(
        &self,
        ctx: &[f64],
        symbol: usize,
        grads: &mut DensityModel,
    ) -> Result<(f64, Vec<f64>)> {
        if symbol >= ALPHABET {
            return Err(Error::SymbolOutOfAlphabet(format!(
                "symbol {symbol} outside alphabet {ALPHABET}"
            )));
        }
        // Evaluation points: P is F(hi) − F(lo) with the escapes dropping
        // one side (F(−∞) = 0, F(∞) = 1).
        let (lo, hi): (Option<f64>, Option<f64>) = if symbol == ESCAPE_LO {
            (None, Some(-(K_MAX as f64) - 0.5))
        } else if symbol == ESCAPE_HI {
            (Some(K_MAX as f64 + 0.5), None)
        } else {
            let k = symbol_value(symbol).unwrap() as f64;
            (Some(k - 0.5), Some(k + 0.5))
        };

        match self {
            DensityModel::ConditionalLaplace(m) => {
                let (out, trace) = m.net.forward_traced(ctx)?;
                let mu = out[0];
                let logb_raw = out[1];
                let logb = logb_raw.clamp(-LOG_B_RANGE, LOG_B_RANGE);
                let b = logb.exp();
                let f = |x: f64| laplace_cdf(mu, b, x);
                let f_hi = hi.map(f).unwrap_or(1.0);
                let f_lo = lo.map(f).unwrap_or(0.0);
                let p = f_hi - f_lo;
                if p < P_FLOOR {
                    return Ok((-(P_FLOOR.ln()), vec![0.0; ctx.len()]));
                }
                // ∂F/∂μ = −pdf(x); ∂F/∂log b = −(x−μ)/b · tail mass on x's
                // side of μ (left: F, right: 1−F).
                let d_mu = |x: f64| -> f64 {
                    let t = (x - mu) / b;
                    if t <= 0.0 {
                        -0.5 * t.exp() / b
                    } else {
                        -0.5 * (-t).exp() / b
                    }
                };
                let d_logb = |x: f64, fx: f64| -> f64 {
                    let t = (x - mu) / b;
                    if t <= 0.0 {
                        -t * fx
                    } else {
                        -t * (1.0 - fx)
                    }
                };
                let mut dp_dmu = 0.0;
                let mut dp_dlogb = 0.0;
                if let Some(x) = hi {
                    dp_dmu += d_mu(x);
                    dp_dlogb += d_logb(x, f_hi);
                }
                if let Some(x) = lo {
                    dp_dmu -= d_mu(x);
                    dp_dlogb -= d_logb(x, f_lo);
                }
                let scale = -1.0 / p;
                let mut dout = [scale * dp_dmu, scale * dp_dlogb];
                if logb_raw.abs() > LOG_B_RANGE {
                    dout[1] = 0.0;
                }
                let DensityModel::ConditionalLaplace(g) = grads else {
                    return Err(Error::ShapeMismatch("gradient holder variant".into()));
                };
                let dctx = m.net.backward(&trace, &dout, &mut g.net);
                Ok((-(p.ln()), dctx))
            }
            DensityModel::FactorizedCdf(m) => {
                let basis = self.factorized_basis(ctx)?;
                let eval = |x: f64| sigmoid(Self::factorized_u(&basis, x));
                let e_hi = hi.map(eval);
                let e_lo = lo.map(eval);
                let f_hi = e_hi.unwrap_or(1.0);
                let f_lo = e_lo.unwrap_or(0.0);
                let p = f_hi - f_lo;
                if p < P_FLOOR {
                    return Ok((-(P_FLOOR.ln()), vec![0.0; ctx.len()]));
                }
                let DensityModel::FactorizedCdf(g) = grads else {
                    return Err(Error::ShapeMismatch("gradient holder variant".into()));
                };
                let mut dctx = vec![0.0; ctx.len()];
                let scale = -1.0 / p;
                // dL/dF(hi) = scale, dL/dF(lo) = −scale.
                if let Some((x, fx)) = hi.zip(e_hi) {
                    Self::factorized_point_backward(m, &basis, ctx, x, fx, scale, g, &mut dctx);
                }
                if let Some((x, fx)) = lo.zip(e_lo) {
                    Self::factorized_point_backward(m, &basis, ctx, x, fx, -scale, g, &mut dctx);
                }
                Ok((-(p.ln()), dctx))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn factorized_point_backward(
        m: &FactorizedModel,
        basis: &(Vec<f64>, Vec<f64>, Vec<f64>, f64),
        ctx: &[f64],
        x: f64,
        fx: f64,
        df: f64,
        g: &mut FactorizedModel,
        dctx: &mut [f64],
    ) {
        let (slope, bias, wout, _) = basis;
        let du = df * fx * (1.0 - fx);
        let xn = x / X_SCALE;
        g.b2[0] += du;
        for (i, c) in ctx.iter().enumerate() {
            g.w2[i] += du * c;
            dctx[i] += du * m.w2[i];
        }
        for i in 0..slope.len() {
            let t = (slope[i] * xn + bias[i]).tanh();
            let dt = du * wout[i];
            g.a2[i] += du * t * sigmoid(m.a2[i]);
            let dpre = dt * (1.0 - t * t);
            g.a1[i] += dpre * xn * sigmoid(m.a1[i]);
            g.b1[i] += dpre;
            for (j, c) in ctx.iter().enumerate() {
                g.w1[i * m.ctx_width + j] += dpre * c;
                dctx[j] += dpre * m.w1[i * m.ctx_width + j];
            }
        }
    }
}
