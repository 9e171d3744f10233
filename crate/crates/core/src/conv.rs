//! Convolutional local-feature block.
//!
//! Each branch slides a full-feature-width kernel of `width` tokens over the
//! sequence. Both axes are zero-padded by 2 on each side, so a branch turns
//! `[L×H]` into `[(L+5-width)×filters]`. Branches run in parallel on the same
//! input; their ReLU outputs are adaptive-pooled back to `L` rows and
//! concatenated channel-wise.

use crate::graph::Var;
use crate::params::{glorot_bound, init_uniform, ParameterStore, Session};
use crate::tensor::{invalid, Result, Tensor};

/// Zero padding applied to both the length and the feature axis.
pub const CONV_PAD: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    /// `[width × (hidden+4) × filters]`
    pub kernel: String,
    pub bias: String,
    pub width: usize,
    pub filters: usize,
    pub hidden: usize,
}

impl ConvBranch {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        filters: usize,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || filters == 0 {
            return Err(invalid("conv_branch", "width and filters must be positive"));
        }
        let kernel = format!("{prefix}.kernel");
        let bias = format!("{prefix}.bias");
        let padded = hidden + 2 * CONV_PAD;
        let bound = glorot_bound(width * padded, filters);
        store.insert(&kernel, init_uniform(seed, &kernel, &[width, padded, filters], bound));
        store.insert(&bias, Tensor::zeros([filters]));
        Ok(ConvBranch {
            kernel,
            bias,
            width,
            filters,
            hidden,
        })
    }

    /// Output length for an input of `len` tokens.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len + 2 * CONV_PAD + 1).checked_sub(self.width).filter(|&l| l >= 1)
    }

    /// `ReLU(conv(h))`: `[L×H] -> [(L+5-w)×filters]`.
    pub fn forward(&self, s: &mut Session, h: Var) -> Result<Var> {
        let shape = s.graph.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.hidden {
            return Err(invalid(
                "conv_branch",
                format!("input {shape:?} does not match hidden size {}", self.hidden),
            ));
        }
        let out_len = self.output_len(shape[0]).ok_or_else(|| {
            invalid(
                "conv_branch",
                format!("sequence of {} tokens is too short for width {}", shape[0], self.width),
            )
        })?;
        let padded_dim = self.hidden + 2 * CONV_PAD;
        let padded = s.graph.pad2d(h, [CONV_PAD; 4])?;
        let windows = s.graph.frames(padded, self.width)?;
        let windows = s.graph.reshape(windows, &[out_len, self.width * padded_dim])?;
        let kernel = s.param(&self.kernel)?;
        let kernel = s.graph.reshape(kernel, &[self.width * padded_dim, self.filters])?;
        let bias = s.param(&self.bias)?;
        let y = s.graph.matmul(windows, kernel)?;
        let y = s.graph.add(y, bias)?;
        s.graph.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub branches: Vec<ConvBranch>,
}

impl ConvBlock {
    /// One branch per entry of `widths`, each with `filters` output channels.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        widths: &[usize],
        filters: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(invalid("conv_block", "at least one branch is required"));
        }
        let branches = widths
            .iter()
            .enumerate()
            .map(|(d, &w)| ConvBranch::new(store, &format!("{prefix}.branch{d}"), w, hidden, filters, seed))
            .collect::<Result<_>>()?;
        Ok(ConvBlock { branches })
    }

    /// Total channel count `F = Σ filters`.
    pub fn channels(&self) -> usize {
        self.branches.iter().map(|b| b.filters).sum()
    }

    /// `[L×H] -> [L×F]`.
    pub fn forward(&self, s: &mut Session, h: Var) -> Result<Var> {
        let len = s.graph.shape(h)[0];
        let mut parts = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let y = branch.forward(s, h)?;
            parts.push(s.graph.adaptive_avg_pool1d(y, len)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        s.graph.concat_cols(&parts)
    }
}
