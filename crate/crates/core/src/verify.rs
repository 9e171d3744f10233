//! Verification runs shared by the test suite and the command line:
//! gradient checks over every layer type and model mode, and outlook
//! main-path versus reference comparisons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig, TaskKind};
use crate::conv::{ConvBlock, ConvBranch};
use crate::data::{
    batch_examples, build_vocab, Batch, ChoiceExample, ClassExample, Example, LabelSet, SpanExample, TagExample,
};

use crate::encoder::{EncoderDims, GlobalEncoder};
use crate::error::Result;
use crate::graph::Var;
use crate::model::{span_nll, Model};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::oracle::{equivalence_report, gradcheck, naive_outlook_reference, DiffReport};
use crate::outlook::{OutlookLayer, SoftmaxScope};
use crate::params::{ParameterStore, Session};
use crate::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Replaces every tensor of `store` with random values, keeping layer-norm
/// gains near one.
fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut t = random(rng, &shape, scale);
        if name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        store.insert(name, t);
    }
}

/// `Σ c ⊙ y` with fixed random weights `c`, so every output element matters.
fn probe_loss(s: &mut Session, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random(&mut rng, s.graph.shape(y), 1.0);
    let c = s.constant(c);
    let p = s.graph.mul(y, c)?;
    Ok(s.graph.sum(p)?)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn small_model(mode: Mode, task: TaskKind, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        use_conv_block: true,
        conv_widths: vec![2, 3],
        conv_filters: 3,
        num_outlook_layers: 1,
        kernel_size: 3,
        hidden: 8,
        encoder_blocks: 1,
        heads: 2,
        ffn_dim: 8,
        vocab_size: 16,
        max_len: 6,
        task,
        num_labels: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn task_batch(task: TaskKind) -> Result<(Batch, usize)> {
    let examples: Vec<Example> = match task {
        TaskKind::Span => vec![
            Example::Span(SpanExample {
                id: "a".into(),
                question: words("who"),
                context: words("cat sat mat"),
                answer: Some((1, 2)),
            }),
            Example::Span(SpanExample {
                id: "b".into(),
                question: words("why"),
                context: words("dog"),
                answer: None,
            }),
        ],
        TaskKind::SeqClass => vec![
            Example::Class(ClassExample { label: "x".into(), tokens: words("cat sat mat") }),
            Example::Class(ClassExample { label: "z".into(), tokens: words("dog") }),
        ],
        TaskKind::TokenTag => vec![
            Example::Tagged(TagExample { tokens: words("cat sat mat"), tags: words("x y z") }),
            Example::Tagged(TagExample { tokens: words("dog"), tags: words("y") }),
        ],
        TaskKind::MultiChoice => vec![Example::Choice(ChoiceExample {
            id: "c".into(),
            question: words("who"),
            choices: vec![words("cat"), words("dog sat"), words("mat")],
            answer: 2,
        })],
    };
    let labels = LabelSet::build(["x", "y", "z"]);
    let vocab = build_vocab(&examples, 16);
    let n = examples.len();
    Ok((batch_examples(&examples, &vocab, &labels, 6, n)?.remove(0), n))
}

/// Finite-difference checks over every parameterised layer, all task heads
/// and each full integration mode. Shapes stay at `L ≤ 6`, `H ≤ 8`, `K = 3`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<DiffReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    {
        let mut store = ParameterStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, seed);
        store.insert("x", random(&mut rng, &[4, 5], 1.0));
        randomize(&mut store, &mut rng, 1.0);
        reports.push(gradcheck("linear", &store, |s| {
            let x = s.param("x")?;
            let y = lin.forward(s, x)?;
            probe_loss(s, y, seed)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        store.insert("x", random(&mut rng, &[4, 6], 2.0));
        randomize(&mut store, &mut rng, 1.0);
        reports.push(gradcheck("layer_norm", &store, |s| {
            let x = s.param("x")?;
            let y = ln.forward(s, x)?;
            probe_loss(s, y, seed)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        let branch = ConvBranch::new(&mut store, "conv", 3, 5, 3, seed)?;
        store.insert("x", random(&mut rng, &[5, 5], 1.0));
        randomize(&mut store, &mut rng, 0.5);
        reports.push(gradcheck("conv_branch", &store, |s| {
            let x = s.param("x")?;
            let y = branch.forward(s, x)?;
            probe_loss(s, y, seed)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        let block = ConvBlock::new(&mut store, "conv", &[2, 3, 4], 2, 4, seed)?;
        store.insert("x", random(&mut rng, &[5, 4], 1.0));
        randomize(&mut store, &mut rng, 0.5);
        reports.push(gradcheck("conv_block", &store, |s| {
            let x = s.param("x")?;
            let y = block.forward(s, x)?;
            probe_loss(s, y, seed)
        })?);
    }
    for scope in [SoftmaxScope::PerChannel, SoftmaxScope::Flattened] {
        for (tag, mask) in [("", vec![true; 6]), ("_padded", vec![true, true, true, true, false, false])] {
            let mut store = ParameterStore::new();
            let layer = OutlookLayer::new(&mut store, "outlook", 4, 3, scope, seed)?;
            store.insert("x", random(&mut rng, &[6, 4], 1.0));
            randomize(&mut store, &mut rng, 0.7);
            reports.push(gradcheck(&format!("outlook_{scope}{tag}"), &store, |s| {
                let x = s.param("x")?;
                let y = layer.forward(s, x, &mask)?;
                probe_loss(s, y, seed)
            })?);
        }
    }
    {
        let mut store = ParameterStore::new();
        let block = EncoderBlock::new(&mut store, "block", 8, 2, 8, seed)?;
        store.insert("x", random(&mut rng, &[5, 8], 1.0));
        randomize(&mut store, &mut rng, 0.5);
        let mask = [true, true, true, true, false];
        reports.push(gradcheck("encoder_block", &store, |s| {
            let x = s.param("x")?;
            let y = block.forward(s, x, &mask)?;
            probe_loss(s, y, seed)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        let dims = EncoderDims {
            vocab: 10,
            hidden: 8,
            blocks: 1,
            heads: 2,
            ffn: 8,
            max_len: 6,
            dropout: 0.0,
        };
        let enc = GlobalEncoder::new(&mut store, "encoder", dims, seed)?;
        randomize(&mut store, &mut rng, 0.5);
        reports.push(gradcheck("global_encoder", &store, |s| {
            let y = enc.encode_sequence(s, &[2, 5, 7, 3, 9], &[0, 0, 1, 1, 1], &[true; 5])?;
            probe_loss(s, y, seed)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        store.insert("start", random(&mut rng, &[5], 2.0));
        store.insert("end", random(&mut rng, &[5], 2.0));
        let mask = [true, true, true, true, false];
        reports.push(gradcheck("span_loss", &store, |s| {
            let a = s.param("start")?;
            let b = s.param("end")?;
            let a = s.graph.masked_fill(a, &[false, false, false, false, true], -1e30)?;
            span_nll(&mut s.graph, a, b, &mask, (1, 3))
        })?);
    }
    for task in [TaskKind::Span, TaskKind::SeqClass, TaskKind::TokenTag, TaskKind::MultiChoice] {
        let (batch, _) = task_batch(task)?;
        let (model, mut store) = Model::assemble(&small_model(Mode::GlobalToLocal, task, seed))?;
        randomize(&mut store, &mut rng, 0.5);
        reports.push(gradcheck(&format!("head_{task}"), &store, |s| model.batch_loss(s, &batch))?);
    }
    for mode in [Mode::GlobalToLocal, Mode::LocalToGlobal, Mode::GlobalAndLocal] {
        let (batch, _) = task_batch(TaskKind::Span)?;
        let mut cfg = small_model(mode, TaskKind::Span, seed);
        cfg.softmax_scope = if mode == Mode::LocalToGlobal {
            SoftmaxScope::Flattened
        } else {
            SoftmaxScope::PerChannel
        };
        let (model, mut store) = Model::assemble(&cfg)?;
        randomize(&mut store, &mut rng, 0.5);
        reports.push(gradcheck(&format!("model_{mode}"), &store, |s| model.batch_loss(s, &batch))?);
    }
    Ok(reports)
}

/// One random outlook comparison case.
#[derive(Debug, Clone)]
pub struct OutlookCase {
    pub len: usize,
    pub channels: usize,
    pub kernel: usize,
    pub scope: SoftmaxScope,
    pub mask: Vec<bool>,
    pub store: ParameterStore,
    pub layer: OutlookLayer,
    pub input: Tensor,
}

/// Random layer, input and padding mask with `L ≤ 16`, `F ≤ 8`, `K ∈ {1,3,5}`.
/// At least the first token is always real.
pub fn random_outlook_case(rng: &mut ChaCha8Rng, scope: SoftmaxScope) -> Result<OutlookCase> {
    let len = rng.gen_range(1..=16);
    let channels = rng.gen_range(1..=8);
    let kernel = [1, 3, 5][rng.gen_range(0..3)];
    let real = rng.gen_range(1..=len);
    let mask: Vec<bool> = (0..len).map(|i| i < real).collect();
    let mut store = ParameterStore::new();
    let layer = OutlookLayer::new(&mut store, "outlook", channels, kernel, scope, rng.gen())?;
    randomize(&mut store, rng, 1.0);
    let input = random(rng, &[len, channels], 2.0);
    Ok(OutlookCase {
        len,
        channels,
        kernel,
        scope,
        mask,
        store,
        layer,
        input,
    })
}

/// Main path output of an outlook case.
pub fn outlook_main(case: &OutlookCase) -> Result<Tensor> {
    let mut s = Session::new(&case.store);
    let x = s.constant(case.input.clone());
    let y = case.layer.forward(&mut s, x, &case.mask)?;
    Ok(s.graph.value(y).clone())
}

/// Compares the main outlook layer against the loop reference on `cases`
/// random configurations per softmax scope.
pub fn oracle_diff_suite(seed: u64, cases: usize, tol: f64) -> Result<Vec<DiffReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for scope in [SoftmaxScope::PerChannel, SoftmaxScope::Flattened] {
        let mut worst: Option<DiffReport> = None;
        let mut total = 0;
        let mut pass = true;
        for _ in 0..cases {
            let case = random_outlook_case(&mut rng, scope)?;
            let main = outlook_main(&case)?;
            let naive = naive_outlook_reference(&case.layer, &case.store, &case.input, &case.mask);
            let r = equivalence_report(&format!("outlook_{scope}"), &main, &naive.output, tol)?;
            total += r.elements;
            pass &= r.max_abs <= tol;
            if worst.as_ref().is_none_or(|w| r.max_abs > w.max_abs) {
                worst = Some(r);
            }
        }
        if let Some(mut w) = worst {
            w.elements = total;
            w.pass = pass;
            reports.push(w);
        }
    }
    Ok(reports)
}
