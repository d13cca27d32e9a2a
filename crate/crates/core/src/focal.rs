//! Self-attention-free feature blocks: focal spatial modulation (FSM),
//! low-rank spectral modulation (LRSM), the spatial-spectral modulation block
//! (SSMB) that composes them with a feed-forward layer, and a naive global
//! self-attention used only as a cost reference.
//!
//! All blocks take channel-last feature maps `[N, H, W, C]` (or `[H, W, C]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Hierarchical context configuration: one depthwise kernel per level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsmConfig {
    pub kernels: Vec<usize>,
}

impl Default for FsmConfig {
    fn default() -> Self {
        FsmConfig { kernels: vec![3, 5] }
    }
}

impl FsmConfig {
    pub fn levels(&self) -> usize {
        self.kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("focal modulation needs at least one level".into()));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("focal kernel sizes must be odd, got {k}")));
        }
        Ok(())
    }

    /// Effective receptive field of each level: `1 + sum_{i<=l} (k_i - 1)`.
    pub fn receptive_fields(&self) -> Vec<usize> {
        self.kernels
            .iter()
            .scan(1, |r, &k| {
                *r += k - 1;
                Some(*r)
            })
            .collect()
    }
}

/// Parameters of one FSM.
#[derive(Clone, Debug)]
pub struct FsmParams {
    pub config: FsmConfig,
    pub channels: usize,
    pub f_z: Linear,
    /// Depthwise kernels `[k, k, C]`, one per level.
    pub context: Vec<ParamId>,
    /// Gate projection `C -> L + 1`.
    pub f_g: Linear,
    pub q: Linear,
    /// Modulator projection applied to the aggregated context.
    pub h: Linear,
    pub out: Linear,
}

impl FsmParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: &FsmConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        init.scope(name, |init| {
            let f_z = init.linear("f_z", channels, channels)?;
            let mut context = Vec::new();
            for (l, &k) in config.kernels.iter().enumerate() {
                let bound = 1.0 / (k as f64);
                context.push(init.uniform(&format!("context{l}"), &[k, k, channels], bound)?);
            }
            Ok(FsmParams {
                config: config.clone(),
                channels,
                f_z,
                context,
                f_g: init.linear("f_g", channels, config.levels() + 1)?,
                q: init.linear("q", channels, channels)?,
                h: init.linear("h", channels, channels)?,
                out: init.linear("out", channels, channels)?,
            })
        })
    }
}

/// Nonlinearity between context levels; `Identity` exists for analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextActivation {
    Gelu,
    Identity,
}

/// Context levels `Z^1..Z^{L+1}`: `Z^0 = f_z(X)`,
/// `Z^l = act(DWConv_{k_l}(Z^{l-1}))`, and `Z^{L+1}` the spatial mean of
/// `Z^L`, kept at spatial size 1x1 and broadcast wherever it is consumed.
pub fn hierarchical_contextualize<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &FsmParams,
    act: ContextActivation,
) -> Result<Vec<Var>> {
    check_channels(tape, x, params.channels, "fsm")?;
    let mut z = params.f_z.forward(tape, x)?;
    let mut levels = Vec::with_capacity(params.context.len() + 1);
    for &k in &params.context {
        let conv = tape.depthwise_conv2d(z, k.into(), None)?;
        z = match act {
            ContextActivation::Gelu => tape.gelu(conv),
            ContextActivation::Identity => conv,
        };
        levels.push(z);
    }
    levels.push(tape.global_avg_pool(z)?);
    Ok(levels)
}

/// `Z^out = sum_l G^l * Z^l` where `gates` is `[.., L+1]` and gate `l` is a
/// single channel broadcast over all feature channels.
pub fn gated_aggregate<T: Scalar>(tape: &mut Tape<T>, gates: Var, levels: &[Var]) -> Result<Var> {
    let g = *tape.shape(gates).last().unwrap_or(&0);
    if g != levels.len() || levels.is_empty() {
        return Err(Error::shape(
            "gated_aggregate",
            format!("{g} gates for {} context levels", levels.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (l, &z) in levels.iter().enumerate() {
        let gl = tape.slice_last(gates, l, 1)?;
        let term = tape.mul(gl, z)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one level"))
}

/// Focal spatial modulation: `out(q(X) * h(Z^out))`.
pub fn fsm_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &FsmParams) -> Result<Var> {
    let levels = hierarchical_contextualize(tape, x, params, ContextActivation::Gelu)?;
    let gates = params.f_g.forward(tape, x)?;
    let z_out = gated_aggregate(tape, gates, &levels)?;
    let modulator = params.h.forward(tape, z_out)?;
    let query = params.q.forward(tape, x)?;
    let y = tape.mul(query, modulator)?;
    params.out.forward(tape, y)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrsmConfig {
    /// Subspace rank; `None` picks `max(C / 4, 4)` capped at `C`.
    pub rank: Option<usize>,
    pub bank: usize,
}

impl Default for LrsmConfig {
    fn default() -> Self {
        LrsmConfig { rank: None, bank: 32 }
    }
}

impl LrsmConfig {
    pub fn rank_for(&self, channels: usize) -> usize {
        self.rank.unwrap_or_else(|| (channels / 4).max(4).min(channels))
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let k = self.rank_for(channels);
        if k == 0 || k > channels {
            return Err(Error::Config(format!("rank {k} must lie in 1..={channels}")));
        }
        if self.bank == 0 {
            return Err(Error::Config("memory bank needs at least one entry".into()));
        }
        Ok(())
    }
}

/// Learnable low-rank memory and projections of one LRSM.
#[derive(Clone, Debug)]
pub struct LowRankMemory {
    pub channels: usize,
    pub rank: usize,
    /// `[K, B]` bank of low-rank spectral vectors (one per column).
    pub bank: ParamId,
    pub down: Linear,
    pub up: Linear,
    pub q: Linear,
}

impl LowRankMemory {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: &LrsmConfig, channels: usize) -> Result<Self> {
        config.validate(channels)?;
        let rank = config.rank_for(channels);
        init.scope(name, |init| {
            Ok(LowRankMemory {
                channels,
                rank,
                bank: init.uniform("bank", &[rank, config.bank], 1.0)?,
                down: init.linear("down", channels, rank)?,
                up: init.linear("up", rank, channels)?,
                q: init.linear("q", channels, channels)?,
            })
        })
    }
}

/// `Z^c` (pooled spectrum, `[N, C]`) and `Z^k = down(Z^c)` (`[N, K]`).
pub fn lrsm_project<T: Scalar>(tape: &mut Tape<T>, x: Var, mem: &LowRankMemory) -> Result<(Var, Var)> {
    check_channels(tape, x, mem.channels, "lrsm")?;
    let pooled = tape.global_avg_pool(x)?;
    let n = tape.value(pooled).len() / mem.channels;
    let zc = tape.reshape(pooled, &[n, mem.channels])?;
    let zk = mem.down.forward(tape, zc)?;
    Ok((zc, zk))
}

/// Coefficients `I = softmax(Z^k M)` (returned as a plain tensor) and the
/// retrieved vector `Z^l = I M^T`.
pub fn lrsm_aggregate<T: Scalar>(tape: &mut Tape<T>, zk: Var, mem: &LowRankMemory) -> Result<(Tensor<T>, Var)> {
    let (zl, coeffs) = tape.memory_read(zk, mem.bank.into())?;
    Ok((coeffs, zl))
}

/// Spectral modulator `sigmoid(up(Z^l))`, shaped to broadcast over space.
pub fn lrsm_modulator<T: Scalar>(tape: &mut Tape<T>, x: Var, mem: &LowRankMemory) -> Result<Var> {
    let (_, zk) = lrsm_project(tape, x, mem)?;
    let (_, zl) = lrsm_aggregate(tape, zk, mem)?;
    let up = mem.up.forward(tape, zl)?;
    let s = tape.sigmoid(up);
    let mut shape = vec![1; tape.shape(x).len()];
    let last = shape.len() - 1;
    shape[last] = mem.channels;
    if shape.len() == 4 {
        shape[0] = tape.shape(x)[0];
    }
    tape.reshape(s, &shape)
}

/// Low-rank spectral modulation: `q(X) * sigmoid(up(Z^l))`.
pub fn lrsm_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, mem: &LowRankMemory) -> Result<Var> {
    let s = lrsm_modulator(tape, x, mem)?;
    let query = mem.q.forward(tape, x)?;
    tape.mul(query, s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmbConfig {
    pub fsm: FsmConfig,
    pub lrsm: LrsmConfig,
    pub ffn_expansion: usize,
}

impl Default for SsmbConfig {
    fn default() -> Self {
        SsmbConfig {
            fsm: FsmConfig::default(),
            lrsm: LrsmConfig::default(),
            ffn_expansion: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmbParams {
    pub norm1: LayerNorm,
    pub fsm: FsmParams,
    pub norm2: LayerNorm,
    pub lrsm: LowRankMemory,
    pub norm3: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl SsmbParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: &SsmbConfig, channels: usize) -> Result<Self> {
        if config.ffn_expansion == 0 {
            return Err(Error::Config("ffn expansion must be at least 1".into()));
        }
        init.scope(name, |init| {
            let hidden = channels * config.ffn_expansion;
            Ok(SsmbParams {
                norm1: init.layer_norm("norm1", channels)?,
                fsm: FsmParams::init(init, "fsm", &config.fsm, channels)?,
                norm2: init.layer_norm("norm2", channels)?,
                lrsm: LowRankMemory::init(init, "lrsm", &config.lrsm, channels)?,
                norm3: init.layer_norm("norm3", channels)?,
                ffn_in: init.linear("ffn_in", channels, hidden)?,
                ffn_out: init.linear("ffn_out", hidden, channels)?,
            })
        })
    }
}

/// Pre-norm residual composition:
/// `X1 = X + FSM(LN(X))`, `X2 = X1 + LRSM(LN(X1))`, `out = X2 + FFN(LN(X2))`.
pub fn ssmb_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SsmbParams) -> Result<Var> {
    let n1 = p.norm1.forward(tape, x)?;
    let f = fsm_forward(tape, n1, &p.fsm)?;
    let x1 = tape.add(x, f)?;
    let n2 = p.norm2.forward(tape, x1)?;
    let s = lrsm_forward(tape, n2, &p.lrsm)?;
    let x2 = tape.add(x1, s)?;
    let n3 = p.norm3.forward(tape, x2)?;
    let hidden = p.ffn_in.forward(tape, n3)?;
    let act = tape.gelu(hidden);
    let ff = p.ffn_out.forward(tape, act)?;
    tape.add(x2, ff)
}

/// Projections of the reference global self-attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub channels: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(AttentionParams {
                channels,
                q: init.linear("q", channels, channels)?,
                k: init.linear("k", channels, channels)?,
                v: init.linear("v", channels, channels)?,
                out: init.linear("out", channels, channels)?,
            })
        })
    }
}

/// Single-head scaled dot-product attention over all `H*W` tokens.
/// Cost reference only; never part of the network.
pub fn naive_self_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    check_channels(tape, x, p.channels, "self_attention")?;
    let shape = tape.shape(x).to_vec();
    let c = p.channels;
    let tokens = shape[shape.len() - 3] * shape[shape.len() - 2];
    let batch = tape.value(x).len() / (tokens * c);
    let flat = tape.reshape(x, &[batch, tokens, c])?;
    let q = p.q.forward(tape, flat)?;
    let k = p.k.forward(tape, flat)?;
    let v = p.v.forward(tape, flat)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax(scaled, 2)?;
    let mixed = tape.matmul(attn, v)?;
    let y = p.out.forward(tape, mixed)?;
    tape.reshape(y, &shape)
}

fn check_channels<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if !(s.len() == 3 || s.len() == 4) || s[s.len() - 1] != channels {
        return Err(Error::shape(op, format!("expected [.., H, W, {channels}], got {s:?}")));
    }
    Ok(())
}

#[cfg(test)]
#[path = "focal_tests.rs"]
mod tests;
