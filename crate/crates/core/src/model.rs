//! Full model: global encoder, optional convolutional block and outlook
//! stack arranged in one of three integration modes, plus task heads, losses
//! and span decoding.

use crate::config::{Mode, ModelConfig, TaskKind};
use crate::conv::ConvBlock;
use crate::data::{Batch, Labels};
use crate::encoder::{EncoderDims, GlobalEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::outlook::OutlookBlock;
use crate::params::{ParameterStore, Session};
use crate::tensor::Tensor;

/// Stand-in for a logit that can never be selected.
pub const MASKED_LOGIT: f64 = -1e30;

pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// `F → 2`: column 0 scores starts, column 1 ends.
    Span(Linear),
    Class(Linear),
    Tag(Linear),
    /// `F → 1` score per choice.
    Choice(Linear),
}

impl TaskHead {
    fn new(store: &mut ParameterStore, cfg: &ModelConfig, dim: usize) -> Self {
        let seed = cfg.seed;
        match cfg.task {
            TaskKind::Span => TaskHead::Span(Linear::new(store, "head.span", dim, 2, seed)),
            TaskKind::SeqClass => {
                TaskHead::Class(Linear::new(store, "head.class", dim, cfg.num_labels, seed))
            }
            TaskKind::TokenTag => TaskHead::Tag(Linear::new(store, "head.tag", dim, cfg.num_labels, seed)),
            TaskKind::MultiChoice => TaskHead::Choice(Linear::new(store, "head.choice", dim, 1, seed)),
        }
    }
}

/// Graph outputs for one example, over its real (unpadded) length `l`.
#[derive(Debug, Clone)]
pub enum ExampleOutput {
    /// Start and end logits, each `[l]`.
    Span { start: Var, end: Var },
    /// `[num_labels]`
    Class(Var),
    /// `[l × num_labels]`
    Tags(Var),
    /// `[num_choices]`
    Choice(Var),
}

/// Logit values for a whole batch, padded to the batch length.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLogits {
    /// Each `[B×L]`; padded positions hold [`MASKED_LOGIT`].
    Span { start: Tensor, end: Tensor },
    /// `[B×num_labels]`
    Class(Tensor),
    /// `[B×L×num_labels]`; padded rows are zero.
    Tags(Tensor),
    /// `[B×num_choices]`
    Choice(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: GlobalEncoder,
    pub conv: Option<ConvBlock>,
    pub outlook: OutlookBlock,
    /// `F → H` projection feeding the encoder blocks in `LocalToGlobal`.
    pub local_proj: Option<Linear>,
    /// `(H+F → H, H → F)` fusion in `GlobalAndLocal`.
    pub fusion: Option<(Linear, Linear)>,
    pub head: TaskHead,
    baseline: bool,
}

fn encoder_dims(cfg: &ModelConfig) -> EncoderDims {
    EncoderDims {
        vocab: cfg.vocab_size,
        hidden: cfg.hidden,
        blocks: cfg.encoder_blocks,
        heads: cfg.heads,
        ffn: cfg.ffn_dim,
        max_len: cfg.max_len,
        dropout: cfg.dropout,
    }
}

impl Model {
    /// Builds the model for `cfg` and registers every parameter.
    pub fn assemble(cfg: &ModelConfig) -> Result<(Model, ParameterStore)> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let seed = cfg.seed;
        let hidden = cfg.hidden;
        let encoder = GlobalEncoder::new(&mut store, ENCODER_PREFIX, encoder_dims(cfg), seed)?;
        let conv = if cfg.use_conv_block {
            Some(ConvBlock::new(&mut store, "conv", &cfg.conv_widths, cfg.conv_filters, hidden, seed)?)
        } else {
            None
        };
        let channels = cfg.channels();
        let outlook = OutlookBlock::new(
            &mut store,
            "outlook",
            cfg.num_outlook_layers,
            channels,
            cfg.kernel_size,
            cfg.softmax_scope,
            seed,
        )?;
        let local_proj = (cfg.mode == Mode::LocalToGlobal)
            .then(|| Linear::new(&mut store, "local_proj", channels, hidden, seed));
        let fusion = (cfg.mode == Mode::GlobalAndLocal).then(|| {
            (
                Linear::new(&mut store, "fusion.0", hidden + channels, hidden, seed),
                Linear::new(&mut store, "fusion.1", hidden, channels, seed),
            )
        });
        let head_dim = match cfg.mode {
            Mode::LocalToGlobal => hidden,
            _ => channels,
        };
        let head = TaskHead::new(&mut store, cfg, head_dim);
        let model = Model {
            config: cfg.clone(),
            encoder,
            conv,
            outlook,
            local_proj,
            fusion,
            head,
            baseline: false,
        };
        Ok((model, store))
    }

    /// Plain encoder + task head with no local context encoding.
    pub fn baseline(cfg: &ModelConfig) -> Result<(Model, ParameterStore)> {
        let mut cfg = cfg.clone();
        cfg.mode = Mode::GlobalToLocal;
        cfg.use_conv_block = false;
        cfg.num_outlook_layers = 0;
        let (mut model, store) = Model::assemble(&cfg)?;
        model.baseline = true;
        Ok((model, store))
    }

    fn local(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Var> {
        let x = match &self.conv {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        Ok(self.outlook.forward(s, x, mask)?)
    }

    /// Final per-token representation `[L×D]` fed to the head.
    pub fn represent(&self, s: &mut Session, ids: &[usize], segments: &[usize], mask: &[bool]) -> Result<Var> {
        if self.baseline {
            return Ok(self.encoder.encode_sequence(s, ids, segments, mask)?);
        }
        let enc = &self.encoder;
        match self.config.mode {
            Mode::GlobalToLocal => {
                let h = enc.encode_sequence(s, ids, segments, mask)?;
                self.local(s, h, mask)
            }
            Mode::LocalToGlobal => {
                let e = enc.embed(s, ids, segments)?;
                let l = self.local(s, e, mask)?;
                let proj = self.local_proj.as_ref().expect("LocalToGlobal projection");
                let p = proj.forward(s, l)?;
                Ok(enc.encode_embedded(s, p, mask)?)
            }
            Mode::GlobalAndLocal => {
                let e = enc.embed(s, ids, segments)?;
                let g = enc.encode_embedded(s, e, mask)?;
                let l = self.local(s, e, mask)?;
                let (f0, f1) = self.fusion.as_ref().expect("GlobalAndLocal fusion");
                let c = s.graph.concat_cols(&[g, l])?;
                let h = f0.forward(s, c)?;
                let h = s.graph.relu(h)?;
                Ok(f1.forward(s, h)?)
            }
        }
    }

    fn head_output(&self, s: &mut Session, rep: Var, mask: &[bool]) -> Result<ExampleOutput> {
        let len = s.graph.shape(rep)[0];
        Ok(match &self.head {
            TaskHead::Span(lin) => {
                let logits = lin.forward(s, rep)?;
                let fill: Vec<bool> = mask.iter().map(|m| !m).collect();
                let pick = |s: &mut Session, col: usize| -> Result<Var> {
                    let c = s.graph.slice_cols(logits, col, col + 1)?;
                    let c = s.graph.reshape(c, &[len])?;
                    Ok(s.graph.masked_fill(c, &fill, MASKED_LOGIT)?)
                };
                let start = pick(s, 0)?;
                let end = pick(s, 1)?;
                ExampleOutput::Span { start, end }
            }
            TaskHead::Class(lin) => {
                let pooled = s.graph.slice_rows(rep, 0, 1)?;
                let y = lin.forward(s, pooled)?;
                ExampleOutput::Class(s.graph.reshape(y, &[lin.out_dim])?)
            }
            TaskHead::Tag(lin) => ExampleOutput::Tags(lin.forward(s, rep)?),
            TaskHead::Choice(_) => unreachable!("choice scores are built per group"),
        })
    }

    /// Outputs for one packed row. Trailing padding is dropped before the
    /// forward pass, so results do not depend on how the row was padded.
    pub fn forward_example(
        &self,
        s: &mut Session,
        ids: &[usize],
        segments: &[usize],
        mask: &[bool],
    ) -> Result<ExampleOutput> {
        let len = real_len(mask)?;
        let (ids, segments, mask) = (&ids[..len], &segments[..len], &mask[..len]);
        let rep = self.represent(s, ids, segments, mask)?;
        self.head_output(s, rep, mask)
    }

    /// Outputs for a `GlobalToLocal` model fed an externally computed `h_g`.
    pub fn forward_from_global(&self, s: &mut Session, global: Var, mask: &[bool]) -> Result<ExampleOutput> {
        if self.config.mode != Mode::GlobalToLocal {
            return Err(Error::Invalid(
                "precomputed global representations require mode GlobalToLocal".into(),
            ));
        }
        let len = real_len(mask)?;
        if s.graph.shape(global) != [mask.len(), self.config.hidden] {
            return Err(Error::Invalid(format!(
                "global representation {:?} does not match {} tokens x {} hidden",
                s.graph.shape(global),
                mask.len(),
                self.config.hidden
            )));
        }
        let global = s.graph.slice_rows(global, 0, len)?;
        let mask = &mask[..len];
        let rep = if self.baseline { global } else { self.local(s, global, mask)? };
        self.head_output(s, rep, mask)
    }

    /// One output per example of `batch`.
    pub fn forward_batch(&self, s: &mut Session, batch: &Batch) -> Result<Vec<ExampleOutput>> {
        if let TaskHead::Choice(lin) = &self.head {
            let c = batch.num_choices;
            let mut out = Vec::with_capacity(batch.examples());
            for group in 0..batch.examples() {
                let mut scores = Vec::with_capacity(c);
                for row in group * c..(group + 1) * c {
                    let len = real_len(&batch.mask[row])?;
                    let rep = self.represent(
                        s,
                        &batch.ids[row][..len],
                        &batch.segments[row][..len],
                        &batch.mask[row][..len],
                    )?;
                    let pooled = s.graph.slice_rows(rep, 0, 1)?;
                    scores.push(lin.forward(s, pooled)?);
                }
                let joined = if scores.len() == 1 { scores[0] } else { s.graph.concat_cols(&scores)? };
                out.push(ExampleOutput::Choice(s.graph.reshape(joined, &[c])?));
            }
            return Ok(out);
        }
        (0..batch.rows())
            .map(|r| self.forward_example(s, &batch.ids[r], &batch.segments[r], &batch.mask[r]))
            .collect()
    }

    /// Inference logits for a batch.
    pub fn forward_pass(&self, store: &ParameterStore, batch: &Batch) -> Result<BatchLogits> {
        let mut s = Session::new(store);
        let outputs = self.forward_batch(&mut s, batch)?;
        collect_logits(&s.graph, &outputs, batch)
    }

    /// Mean task loss of a batch (see [`task_loss`]).
    pub fn batch_loss(&self, s: &mut Session, batch: &Batch) -> Result<Var> {
        let outputs = self.forward_batch(s, batch)?;
        task_loss(&mut s.graph, &outputs, &batch.labels)
    }

    pub fn is_baseline(&self) -> bool {
        self.baseline
    }
}

fn real_len(mask: &[bool]) -> Result<usize> {
    mask.iter()
        .rposition(|&m| m)
        .map(|p| p + 1)
        .ok_or_else(|| Error::Invalid("sequence is fully padded".into()))
}

fn collect_logits(g: &Graph, outputs: &[ExampleOutput], batch: &Batch) -> Result<BatchLogits> {
    let rows = outputs.len();
    let len = batch.seq_len();
    let padded = |v: Var, width: usize, fill: f64| {
        let mut row = g.value(v).data().to_vec();
        row.resize(len * width, fill);
        row
    };
    match outputs.first() {
        Some(ExampleOutput::Span { .. }) => {
            let (mut start, mut end) = (Vec::new(), Vec::new());
            for o in outputs {
                let ExampleOutput::Span { start: s, end: e } = o else { unreachable!() };
                start.extend(padded(*s, 1, MASKED_LOGIT));
                end.extend(padded(*e, 1, MASKED_LOGIT));
            }
            Ok(BatchLogits::Span {
                start: Tensor::new([rows, len], start)?,
                end: Tensor::new([rows, len], end)?,
            })
        }
        Some(ExampleOutput::Class(v)) | Some(ExampleOutput::Choice(v)) => {
            let width = g.value(*v).len();
            let mut data = Vec::with_capacity(rows * width);
            for o in outputs {
                let (ExampleOutput::Class(v) | ExampleOutput::Choice(v)) = o else { unreachable!() };
                data.extend_from_slice(g.value(*v).data());
            }
            let t = Tensor::new([rows, width], data)?;
            Ok(if matches!(outputs[0], ExampleOutput::Class(_)) {
                BatchLogits::Class(t)
            } else {
                BatchLogits::Choice(t)
            })
        }
        Some(ExampleOutput::Tags(v)) => {
            let width = g.value(*v).shape()[1];
            let mut data = Vec::with_capacity(rows * len * width);
            for o in outputs {
                let ExampleOutput::Tags(v) = o else { unreachable!() };
                data.extend(padded(*v, width, 0.0));
            }
            Ok(BatchLogits::Tags(Tensor::new([rows, len, width], data)?))
        }
        None => Err(Error::Invalid("empty batch".into())),
    }
}

/// `−log y_s[a_s] − log y_e[a_e]` with `y` the softmax over unmasked
/// positions of the start/end logits.
pub fn span_nll(g: &mut Graph, start: Var, end: Var, mask: &[bool], answer: (usize, usize)) -> Result<Var> {
    let len = g.shape(start)[0];
    let (a_s, a_e) = answer;
    if a_s > a_e || a_e >= len {
        return Err(Error::Invalid(format!(
            "span label ({a_s}, {a_e}) invalid for {len} positions"
        )));
    }
    let allowed = &mask[..len];
    let s = g.reshape(start, &[1, len])?;
    let e = g.reshape(end, &[1, len])?;
    let ls = g.cross_entropy(s, &[Some(a_s)], Some(allowed))?;
    let le = g.cross_entropy(e, &[Some(a_e)], Some(allowed))?;
    Ok(g.add(ls, le)?)
}

/// Batch loss. Span, class and choice losses are averaged over examples;
/// tagging averages cross-entropy over every labelled token.
pub fn task_loss(g: &mut Graph, outputs: &[ExampleOutput], labels: &Labels) -> Result<Var> {
    let mismatch = || Error::Invalid("labels do not match the task head".into());
    let mut terms = Vec::with_capacity(outputs.len());
    let mut count = 0usize;
    for (n, out) in outputs.iter().enumerate() {
        let term = match (out, labels) {
            (ExampleOutput::Span { start, end }, Labels::Span(spans)) => {
                count += 1;
                let len = g.shape(*start)[0];
                let allowed: Vec<bool> = g.value(*start).data().iter().map(|&v| v != MASKED_LOGIT).collect();
                let (a_s, a_e) = spans[n];
                if a_e >= len {
                    return Err(Error::Invalid(format!(
                        "span label ({a_s}, {a_e}) beyond {len} real positions"
                    )));
                }
                span_nll(g, *start, *end, &allowed, spans[n])?
            }
            (ExampleOutput::Class(v), Labels::Class(ids)) | (ExampleOutput::Choice(v), Labels::Choice(ids)) => {
                count += 1;
                let width = g.shape(*v)[0];
                let row = g.reshape(*v, &[1, width])?;
                g.cross_entropy(row, &[Some(ids[n])], None)?
            }
            (ExampleOutput::Tags(v), Labels::Tags(rows)) => {
                let len = g.shape(*v)[0];
                let targets = &rows[n][..len];
                count += targets.iter().filter(|t| t.is_some()).count();
                g.cross_entropy(*v, targets, None)?
            }
            _ => return Err(mismatch()),
        };
        terms.push(term);
    }
    if terms.is_empty() || count == 0 {
        return Err(Error::Invalid("no labelled targets in batch".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / count as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpanPrediction {
    Answer { start: usize, end: usize, score: f64 },
    NoAnswer { null_score: f64 },
}

/// Best legal span `s ≤ e ≤ s + max_answer_len` over candidate positions
/// (position 0 is the null slot and never a candidate), maximising
/// `start[s] + end[e]`. Predicts no answer when
/// `start[0] + end[0] + threshold > best`, so larger thresholds favour
/// abstaining and `+∞` always abstains.
pub fn span_predict(
    start: &[f64],
    end: &[f64],
    candidates: &[bool],
    max_answer_len: usize,
    threshold: f64,
) -> SpanPrediction {
    let len = start.len().min(end.len()).min(candidates.len());
    let null_score = start[0] + end[0];
    let mut best: Option<(usize, usize, f64)> = None;
    for s in 1..len {
        if !candidates[s] {
            continue;
        }
        for e in s..len.min(s + max_answer_len + 1) {
            if !candidates[e] {
                continue;
            }
            let score = start[s] + end[e];
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    match best {
        Some((s, e, score)) if null_score + threshold <= score => SpanPrediction::Answer {
            start: s,
            end: e,
            score,
        },
        _ => SpanPrediction::NoAnswer { null_score },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch_examples, build_vocab, Example, LabelSet, SpanExample};
    use crate::oracle::exhaustive_span_search;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(mode: Mode, conv: bool, layers: usize) -> ModelConfig {
        ModelConfig {
            mode,
            use_conv_block: conv,
            conv_widths: vec![3, 5],
            conv_filters: 3,
            num_outlook_layers: layers,
            hidden: 8,
            encoder_blocks: 1,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 30,
            max_len: 16,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn toy_batch() -> Batch {
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let exs = vec![
            Example::Span(SpanExample {
                id: "a".into(),
                question: words("who ran"),
                context: words("the dog ran fast"),
                answer: Some((1, 1)),
            }),
            Example::Span(SpanExample {
                id: "b".into(),
                question: words("what"),
                context: words("a cat"),
                answer: None,
            }),
        ];
        let vocab = build_vocab(&exs, 30);
        batch_examples(&exs, &vocab, &LabelSet::default(), 16, 8).unwrap().remove(0)
    }

    #[test]
    fn degenerate_config_matches_baseline() {
        let cfg = small_cfg(Mode::GlobalToLocal, false, 0);
        let (m, store) = Model::assemble(&cfg).unwrap();
        let (b, bstore) = Model::baseline(&cfg).unwrap();
        assert_eq!(store, bstore);
        let batch = toy_batch();
        assert_eq!(m.forward_pass(&store, &batch).unwrap(), b.forward_pass(&bstore, &batch).unwrap());
    }

    #[test]
    fn conv_adds_parameters() {
        let (_, without) = Model::assemble(&small_cfg(Mode::GlobalToLocal, false, 1)).unwrap();
        let (_, with) = Model::assemble(&small_cfg(Mode::GlobalToLocal, true, 1)).unwrap();
        assert!(with.names().any(|n| n.starts_with("conv.branch1.")));
        assert!(!without.names().any(|n| n.starts_with("conv.")));
        assert_eq!(with.get("outlook.layer0.value.weight").unwrap().shape(), &[6, 6]);
    }

    #[test]
    fn all_modes_give_finite_logits() {
        let batch = toy_batch();
        for mode in [Mode::GlobalToLocal, Mode::LocalToGlobal, Mode::GlobalAndLocal] {
            for conv in [false, true] {
                let (m, store) = Model::assemble(&small_cfg(mode, conv, 2)).unwrap();
                let BatchLogits::Span { start, end } = m.forward_pass(&store, &batch).unwrap() else {
                    panic!()
                };
                assert_eq!(start.shape(), &[2, batch.seq_len()]);
                // Second example is shorter; its tail is padding.
                let real = batch.mask[1].iter().filter(|&&m| m).count();
                for p in 0..batch.seq_len() {
                    let v = start.at(&[1, p]);
                    if p < real {
                        assert!(v.is_finite() && v > MASKED_LOGIT, "{mode} conv={conv}");
                    } else {
                        assert_eq!(v, MASKED_LOGIT);
                        assert_eq!(end.at(&[1, p]), MASKED_LOGIT);
                    }
                }
            }
        }
    }

    #[test]
    fn class_logits_shape() {
        let mut cfg = small_cfg(Mode::GlobalToLocal, false, 1);
        cfg.task = TaskKind::SeqClass;
        cfg.num_labels = 3;
        let (m, store) = Model::assemble(&cfg).unwrap();
        let exs = crate::data::parse_tsv("a\tx y\nb\ty\nc\tz z z\n").unwrap();
        let labels = crate::data::collect_labels(&exs);
        let vocab = build_vocab(&exs, 30);
        let batch = batch_examples(&exs, &vocab, &labels, 16, 8).unwrap().remove(0);
        let BatchLogits::Class(t) = m.forward_pass(&store, &batch).unwrap() else { panic!() };
        assert_eq!(t.shape(), &[3, 3]);
    }

    #[test]
    fn duplicated_choices_score_equally() {
        let mut cfg = small_cfg(Mode::GlobalToLocal, true, 1);
        cfg.task = TaskKind::MultiChoice;
        cfg.num_labels = 3;
        let (m, store) = Model::assemble(&cfg).unwrap();
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let ex = Example::Choice(crate::data::ChoiceExample {
            id: "c".into(),
            question: words("pick one"),
            choices: vec![words("red fox"), words("red fox"), words("red fox")],
            answer: 1,
        });
        let vocab = build_vocab(std::slice::from_ref(&ex), 30);
        let batch = batch_examples(&[ex], &vocab, &LabelSet::default(), 16, 2).unwrap().remove(0);
        let BatchLogits::Choice(t) = m.forward_pass(&store, &batch).unwrap() else { panic!() };
        assert_eq!(t.shape(), &[1, 3]);
        assert_eq!(t.data()[0], t.data()[1]);
        assert_eq!(t.data()[1], t.data()[2]);
    }

    #[test]
    fn span_loss_closed_forms() {
        let mut g = Graph::new();
        // Peaked correct logits.
        let s = g.constant(Tensor::vector(&[0.0, 60.0, 0.0]));
        let e = g.constant(Tensor::vector(&[0.0, 0.0, 60.0]));
        let l = span_nll(&mut g, s, e, &[true; 3], (1, 2)).unwrap();
        assert!(g.value(l).item() < 1e-20);
        // y_s[a_s] = y_e[a_e] = 0.5.
        let s = g.constant(Tensor::vector(&[0.0, 0.0]));
        let l = span_nll(&mut g, s, s, &[true; 2], (0, 1)).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        // Uniform over 4.
        let s = g.constant(Tensor::vector(&[0.3; 4]));
        let l = span_nll(&mut g, s, s, &[true; 4], (1, 3)).unwrap();
        assert!((g.value(l).item() - 2.0 * 4f64.ln()).abs() < 1e-14);
        // Labels must be ordered and in range.
        assert!(span_nll(&mut g, s, s, &[true; 4], (3, 1)).is_err());
        assert!(span_nll(&mut g, s, s, &[true; 4], (1, 4)).is_err());
    }

    #[test]
    fn span_predict_examples() {
        let mut start = vec![0.0; 12];
        let mut end = vec![0.0; 12];
        start[2] = 5.0;
        end[5] = 5.0;
        let cand = vec![true; 12];
        assert_eq!(
            span_predict(&start, &end, &cand, 10, 0.0),
            SpanPrediction::Answer { start: 2, end: 5, score: 10.0 }
        );
        assert!(matches!(
            span_predict(&start, &end, &cand, 10, f64::INFINITY),
            SpanPrediction::NoAnswer { .. }
        ));

        let mut start = vec![0.0; 8];
        let mut end = vec![0.0; 8];
        start[5] = 5.0;
        end[2] = 5.0;
        let got = span_predict(&start, &end, &cand[..8], 10, -1e9);
        let SpanPrediction::Answer { start: s, end: e, .. } = got else { panic!() };
        assert!(s <= e);
        assert_eq!(Some((s, e)), exhaustive_span_search(&start, &end, &cand[..8], 10).map(|b| (b.0, b.1)));
    }

    #[test]
    fn span_predict_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let start: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let end: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = start.iter().map(|v| v + 7.5).collect();
            let a = span_predict(&start, &end, &[true; 10], 4, -1e9);
            let b = span_predict(&shifted, &end, &[true; 10], 4, -1e9);
            let pos = |p: SpanPrediction| match p {
                SpanPrediction::Answer { start, end, .. } => (start, end),
                _ => panic!(),
            };
            assert_eq!(pos(a), pos(b));
        }
    }

    #[test]
    fn forward_from_global_matches_in_memory() {
        let cfg = small_cfg(Mode::GlobalToLocal, true, 1);
        let (m, store) = Model::assemble(&cfg).unwrap();
        let batch = toy_batch();
        let (ids, segs, mask) = (&batch.ids[0], &batch.segments[0], &batch.mask[0]);
        let mut s = Session::new(&store);
        let ExampleOutput::Span { start: a, .. } = m.forward_example(&mut s, ids, segs, mask).unwrap() else {
            panic!()
        };
        let hg = m.encoder.encode_sequence(&mut s, ids, segs, mask).unwrap();
        let hg = s.graph.value(hg).clone();
        let hv = s.constant(hg);
        let ExampleOutput::Span { start: b, .. } = m.forward_from_global(&mut s, hv, mask).unwrap() else {
            panic!()
        };
        assert_eq!(s.graph.value(a), s.graph.value(b));
    }
}
