//! Parameterised layers: linear, layer norm, embedding lookup and a pre-norm
//! self-attention encoder block.
//!
//! Layers are lightweight handles holding parameter names and dimensions;
//! the tensors themselves live in a [`ParameterStore`].

use crate::graph::Var;
use crate::params::{glorot_bound, init_normal, init_uniform, ParameterStore, Session};
use crate::tensor::{invalid, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a Glorot-uniform weight and zero bias under `prefix`.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Self {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert(
            &weight,
            init_uniform(seed, &weight, &[in_dim, out_dim], glorot_bound(in_dim, out_dim)),
        );
        store.insert(&bias, Tensor::zeros([out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let last = *s.graph.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: s.graph.shape(x).to_vec(),
                right: vec![self.in_dim, self.out_dim],
            });
        }
        let w = s.param(&self.weight)?;
        let b = s.param(&self.bias)?;
        let xw = s.graph.matmul(x, w)?;
        s.graph.add(xw, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize) -> Self {
        let gain = format!("{prefix}.gain");
        let shift = format!("{prefix}.shift");
        store.insert(&gain, Tensor::full([dim], 1.0));
        store.insert(&shift, Tensor::zeros([dim]));
        LayerNorm {
            gain,
            shift,
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&self.gain)?;
        let b = s.param(&self.shift)?;
        s.graph.layer_norm(x, g, b, self.eps)
    }
}

/// Lookup table `[V×H]` initialised from `N(0, 0.02)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, name: &str, vocab: usize, dim: usize, seed: u64) -> Self {
        store.insert(name, init_normal(seed, name, &[vocab, dim], 0.02));
        Embedding {
            table: name.to_string(),
            vocab,
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        let t = s.param(&self.table)?;
        s.graph.gather(t, ids)
    }
}

/// Pre-norm transformer encoder layer: multi-head self-attention and a ReLU
/// feed-forward pair, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        ffn_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(invalid(
                "encoder_block",
                format!("hidden size {hidden} not divisible by {heads} heads"),
            ));
        }
        Ok(EncoderBlock {
            attn_norm: LayerNorm::new(store, &format!("{prefix}.attn_norm"), hidden),
            query: Linear::new(store, &format!("{prefix}.attn.query"), hidden, hidden, seed),
            key: Linear::new(store, &format!("{prefix}.attn.key"), hidden, hidden, seed),
            value: Linear::new(store, &format!("{prefix}.attn.value"), hidden, hidden, seed),
            output: Linear::new(store, &format!("{prefix}.attn.output"), hidden, hidden, seed),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), hidden),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn.in"), hidden, ffn_dim, seed),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn.out"), ffn_dim, hidden, seed),
            heads,
            dropout: 0.0,
        })
    }

    pub fn hidden(&self) -> usize {
        self.query.in_dim
    }

    /// Attention probabilities per head, each `[L×L]` (row = query).
    pub fn attention_probs(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Vec<Var>> {
        let normed = self.attn_norm.forward(s, x)?;
        Ok(self.attend(s, normed, mask)?.1)
    }

    /// Returns the merged head context `[L×H]` and per-head probabilities.
    fn attend(&self, s: &mut Session, normed: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let shape = s.graph.shape(normed).to_vec();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(invalid(
                "encoder_block",
                format!("mask of length {} for input {shape:?}", mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(invalid("encoder_block", "input is fully padded"));
        }
        let head_dim = self.hidden() / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(s, normed)?;
        let k = self.key.forward(s, normed)?;
        let v = self.value.forward(s, normed)?;
        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = s.graph.slice_cols(q, lo, hi)?;
            let kh = s.graph.slice_cols(k, lo, hi)?;
            let vh = s.graph.slice_cols(v, lo, hi)?;
            let kt = s.graph.transpose(kh)?;
            let scores = s.graph.matmul(qh, kt)?;
            let scores = s.graph.scale(scores, scale)?;
            // Key mask broadcasts over query rows.
            let p = s.graph.softmax(scores, 1, Some(mask))?;
            contexts.push(s.graph.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if contexts.len() == 1 {
            contexts[0]
        } else {
            s.graph.concat_cols(&contexts)?
        };
        Ok((merged, probs))
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Var> {
        let normed = self.attn_norm.forward(s, x)?;
        let (ctx, _) = self.attend(s, normed, mask)?;
        let attn_out = self.output.forward(s, ctx)?;
        let attn_out = s.dropout(attn_out, self.dropout)?;
        let x = s.graph.add(x, attn_out)?;

        let normed = self.ffn_norm.forward(s, x)?;
        let hidden = self.ffn_in.forward(s, normed)?;
        let hidden = s.graph.relu(hidden)?;
        let ffn = self.ffn_out.forward(s, hidden)?;
        let ffn = s.dropout(ffn, self.dropout)?;
        s.graph.add(x, ffn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::naive_matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut store = ParameterStore::new();
        let lin = Linear::new(&mut store, "l", 3, 3, 0);
        *store.get_mut("l.weight").unwrap() = Tensor::identity(3).with_requires_grad(true);
        let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let y = lin.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), x.data());

        let mut store = ParameterStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, 0);
        store.get_mut("l.weight").unwrap().data_mut().fill(0.0);
        store.get_mut("l.bias").unwrap().data_mut().copy_from_slice(&[7.0, -1.0]);
        let mut s = Session::new(&store);
        let xv = s.constant(x);
        let y = lin.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn linear_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let lin = Linear::new(&mut store, "l", 5, 3, 4);
        store.get_mut("l.bias").unwrap().data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let x = random(&mut rng, &[4, 5]);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let y = lin.forward(&mut s, xv).unwrap();
        let mut expect = naive_matmul(&x, store.get("l.weight").unwrap());
        for r in 0..4 {
            for c in 0..3 {
                let v = expect.at(&[r, c]) + store.get("l.bias").unwrap().data()[c];
                expect.set(&[r, c], v);
            }
        }
        assert!(s.graph.value(y).max_abs_diff(&expect) < 1e-14);
        let wrong = s.constant(Tensor::zeros([2, 4]));
        assert!(lin.forward(&mut s, wrong).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParameterStore::new();
        let mut ln = LayerNorm::new(&mut store, "n", 2);
        ln.eps = 1e-12;
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::new([2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap());
        let y = ln.forward(&mut s, x).unwrap();
        let out = s.graph.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let ln = LayerNorm::new(&mut store, "n", 8);
        let mut s = Session::new(&store);
        let x = s.constant(random(&mut rng, &[5, 8]));
        let y = ln.forward(&mut s, x).unwrap();
        for r in 0..5 {
            let row = s.graph.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn embedding_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "tok", 10, 4, 0);
        let ids: Vec<usize> = (0..7).map(|_| rng.gen_range(0..10)).collect();
        let mut s = Session::new(&store);
        let y = emb.forward(&mut s, &ids).unwrap();
        let table = store.get("tok").unwrap();
        for (n, &id) in ids.iter().enumerate() {
            assert_eq!(s.graph.value(y).row(n), table.row(id));
        }
        assert!(emb.forward(&mut s, &[10]).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParameterStore::new();
        let block = EncoderBlock::new(&mut store, "b", 8, 2, 16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = Session::new(&store);
        let x = s.constant(random(&mut rng, &[1, 8]));
        let probs = block.attention_probs(&mut s, x, &[true]).unwrap();
        for p in probs {
            assert_eq!(s.graph.value(p).data(), &[1.0]);
        }
    }

    #[test]
    fn padded_keys_get_no_attention() {
        let mut store = ParameterStore::new();
        let block = EncoderBlock::new(&mut store, "b", 8, 4, 16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = [true, true, true, false, false];
        let mut s = Session::new(&store);
        let x = s.constant(random(&mut rng, &[5, 8]));
        for p in block.attention_probs(&mut s, x, &mask).unwrap() {
            let t = s.graph.value(p);
            for q in 0..5 {
                let row = t.row(q);
                assert_eq!(&row[3..], &[0.0, 0.0]);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_block_is_padding_independent() {
        let mut store = ParameterStore::new();
        let block = EncoderBlock::new(&mut store, "b", 8, 2, 16, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = [true, true, true, true, false, false];
        let a = random(&mut rng, &[6, 8]);
        let mut b = a.clone();
        for v in &mut b.data_mut()[4 * 8..] {
            *v = rng.gen_range(-5.0..5.0);
        }
        let run = |t: Tensor| {
            let mut s = Session::new(&store);
            let x = s.constant(t);
            let y = block.forward(&mut s, x, &mask).unwrap();
            s.graph.value(y).data()[..4 * 8].to_vec()
        };
        assert_eq!(run(a), run(b));
    }

    #[test]
    fn encoder_block_rejects_fully_padded_input() {
        let mut store = ParameterStore::new();
        let block = EncoderBlock::new(&mut store, "b", 4, 2, 8, 0).unwrap();
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros([2, 4]));
        assert!(block.forward(&mut s, x, &[false, false]).is_err());
        assert!(EncoderBlock::new(&mut store, "c", 6, 4, 8, 0).is_err());
    }
}
