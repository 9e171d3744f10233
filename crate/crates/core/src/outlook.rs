//! Context outlook attention.
//!
//! Every anchor token `i` owns a window of `K` whole-token rows centred on
//! it. A linear map of the anchor's own (normalised) features produces
//! `K·K·F` logits, read as `a[i, j, r, f]`: output row `j` of the window,
//! source row `r`, channel `f`. No query/key products are involved. The
//! logits are softmax-normalised over the sources of each window, used to mix
//! the unfolded values, and the `K` output rows of each window are folded
//! back onto the positions they cover, so position `i` collects
//! contributions from every window containing it.
//!
//! Sources outside the sequence or on padding are masked out of the softmax.
//! Windows anchored on padding contribute nothing.

use std::fmt;
use std::str::FromStr;

use crate::graph::Var;
use crate::kernels::window_source;
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParameterStore, Session};
use crate::tensor::{invalid, Result, Tensor};

/// Axis the window softmax normalises over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxScope {
    /// Over source rows `r`, separately for every `(j, f)`.
    #[default]
    PerChannel,
    /// Jointly over `(r, f)` for every `j`.
    Flattened,
}

impl fmt::Display for SoftmaxScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftmaxScope::PerChannel => "per_channel",
            SoftmaxScope::Flattened => "flattened",
        })
    }
}

impl FromStr for SoftmaxScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_channel" => Ok(SoftmaxScope::PerChannel),
            "flattened" => Ok(SoftmaxScope::Flattened),
            other => Err(format!("unknown softmax scope '{other}' (per_channel, flattened)")),
        }
    }
}

/// Source validity `[L×K]`: in range and not padding.
pub fn source_mask(mask: &[bool], k: usize) -> Vec<bool> {
    let len = mask.len();
    let mut out = vec![false; len * k];
    for i in 0..len {
        for r in 0..k {
            out[i * k + r] = window_source(i, r, k, len).is_some_and(|src| mask[src]);
        }
    }
    out
}

/// Softmax mask over `[L×K×K×F]`. Windows anchored on padding keep only their
/// centre source so the softmax stays well defined; their weights are zeroed
/// afterwards.
fn weight_mask(mask: &[bool], k: usize, channels: usize) -> Vec<bool> {
    let len = mask.len();
    let sources = source_mask(mask, k);
    let mut out = Vec::with_capacity(len * k * k * channels);
    for i in 0..len {
        for _j in 0..k {
            for r in 0..k {
                let ok = if mask[i] { sources[i * k + r] } else { r == k / 2 };
                out.extend(std::iter::repeat_n(ok, channels));
            }
        }
    }
    out
}

/// Intermediate values of one outlook attention pass.
#[derive(Debug, Clone, Copy)]
pub struct OutlookTrace {
    /// `[L×F]`
    pub values: Var,
    /// Normalised window weights `[L×K×K×F]`; all zero for padded anchors.
    pub weights: Var,
    /// Per-window outputs `[L×K×F]` (zero for padded anchors).
    pub window_out: Var,
    /// Folded result `[L×F]`.
    pub output: Var,
}

/// Mixes `values [L×F]` with window `logits [L×K×K×F]` and folds the window
/// outputs back onto the sequence.
pub fn attend_windows(
    s: &mut Session,
    values: Var,
    logits: Var,
    mask: &[bool],
    k: usize,
    scope: SoftmaxScope,
) -> Result<OutlookTrace> {
    let vshape = s.graph.shape(values).to_vec();
    let (len, channels) = (vshape[0], vshape[1]);
    if mask.len() != len {
        return Err(invalid(
            "outlook_attend",
            format!("mask of length {} for {len} tokens", mask.len()),
        ));
    }
    if s.graph.shape(logits) != [len, k, k, channels] {
        return Err(invalid(
            "outlook_attend",
            format!("logits {:?} for K={k}, F={channels}", s.graph.shape(logits)),
        ));
    }
    let wmask = weight_mask(mask, k, channels);
    let weights = match scope {
        SoftmaxScope::PerChannel => s.graph.softmax(logits, 2, Some(&wmask))?,
        SoftmaxScope::Flattened => {
            let flat = s.graph.reshape(logits, &[len, k, k * channels])?;
            let w = s.graph.softmax(flat, 2, Some(&wmask))?;
            s.graph.reshape(w, &[len, k, k, channels])?
        }
    };
    let weights = if mask.iter().all(|&m| m) {
        weights
    } else {
        let keep: Vec<f64> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, k * k * channels))
            .collect();
        let keep = s.constant(Tensor::new([len, k, k, channels], keep)?);
        s.graph.mul(weights, keep)?
    };
    let unfolded = s.graph.unfold1d(values, k)?;
    let window_out = s.graph.window_aggregate(weights, unfolded)?;
    let output = s.graph.fold1d(window_out)?;
    Ok(OutlookTrace {
        values,
        weights,
        window_out,
        output,
    })
}

/// One context outlook layer: outlook attention followed by a linear MLP,
/// each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlookLayer {
    pub kernel: usize,
    pub channels: usize,
    pub pre_norm: LayerNorm,
    pub value_proj: Linear,
    pub attn_proj: Linear,
    pub mlp_norm: LayerNorm,
    pub mlp: Linear,
    pub scope: SoftmaxScope,
}

impl OutlookLayer {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        kernel: usize,
        scope: SoftmaxScope,
        seed: u64,
    ) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(invalid("outlook", format!("window size must be odd, got {kernel}")));
        }
        Ok(OutlookLayer {
            kernel,
            channels,
            pre_norm: LayerNorm::new(store, &format!("{prefix}.pre_norm"), channels),
            value_proj: Linear::new(store, &format!("{prefix}.value"), channels, channels, seed),
            attn_proj: Linear::new(
                store,
                &format!("{prefix}.attn"),
                channels,
                kernel * kernel * channels,
                seed,
            ),
            mlp_norm: LayerNorm::new(store, &format!("{prefix}.mlp_norm"), channels),
            mlp: Linear::new(store, &format!("{prefix}.mlp"), channels, channels, seed),
            scope,
        })
    }

    /// Outlook attention alone, returning every intermediate.
    pub fn attend(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<OutlookTrace> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(invalid(
                "outlook_attend",
                format!("input {shape:?} does not have {} channels", self.channels),
            ));
        }
        let normed = self.pre_norm.forward(s, x)?;
        let values = self.value_proj.forward(s, normed)?;
        let logits = self.attn_proj.forward(s, normed)?;
        let k = self.kernel;
        let logits = s.graph.reshape(logits, &[shape[0], k, k, self.channels])?;
        attend_windows(s, values, logits, mask, k, self.scope)
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Var> {
        let attended = self.attend(s, x, mask)?.output;
        let h = s.graph.add(attended, x)?;
        let normed = self.mlp_norm.forward(s, h)?;
        let m = self.mlp.forward(s, normed)?;
        s.graph.add(m, h)
    }
}

/// Sequential stack of outlook layers sharing one channel count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlookBlock {
    pub layers: Vec<OutlookLayer>,
}

impl OutlookBlock {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        num_layers: usize,
        channels: usize,
        kernel: usize,
        scope: SoftmaxScope,
        seed: u64,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|n| OutlookLayer::new(store, &format!("{prefix}.layer{n}"), channels, kernel, scope, seed))
            .collect::<Result<_>>()?;
        Ok(OutlookBlock { layers })
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(s, h, mask))
    }
}
