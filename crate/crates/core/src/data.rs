//! Tokenisation, vocabularies, dataset readers and batch construction.
//!
//! Readers:
//! - `span_jsonl`: `{"id", "question", "context", "answer_start_token",
//!   "answer_end_token", "is_impossible"}` per line, answers as token indices
//!   into the tokenised context.
//! - `conll`: whitespace-separated `token pos chunk ner` rows, blank line
//!   between sentences.
//! - `tsv`: `label<TAB>text`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn line_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Line {
        line,
        msg: msg.into(),
    }
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.extend(c.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token ↔ id map with ids 0..3 reserved for pad, unk, cls and sep.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from token streams: most frequent first (ties by token), at
    /// most `capacity` ids including the reserved ones.
    pub fn build<'a>(streams: impl IntoIterator<Item = &'a [String]>, capacity: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in streams {
            for t in stream {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = capacity.saturating_sub(RESERVED.len());
        Vocab::from_tokens(
            RESERVED
                .iter()
                .copied()
                .chain(ranked.into_iter().take(room).map(|(t, _)| t))
                .map(String::from)
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Vocabulary with explicit ids for the given tokens, starting at 4.
    pub fn from_words(words: &[&str]) -> Self {
        Vocab::from_tokens(
            RESERVED
                .iter()
                .chain(words)
                .map(|s| s.to_string())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokenize_and_encode(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(DataError::Invalid("vocabulary file lacks the reserved tokens".into()));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Sorted set of string labels (classes or tags) mapped to dense ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(String::from).collect();
        labels.sort();
        labels.dedup();
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.labels.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        LabelSet::build(text.lines().filter(|l| !l.is_empty()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanExample {
    pub id: String,
    pub question: Vec<String>,
    pub context: Vec<String>,
    /// Inclusive token span in `context`; `None` when unanswerable.
    pub answer: Option<(usize, usize)>,
}

impl SpanExample {
    pub fn answer_text(&self) -> String {
        match self.answer {
            Some((s, e)) => self.context[s..=e].join(" "),
            None => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassExample {
    pub label: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceExample {
    pub id: String,
    pub question: Vec<String>,
    pub choices: Vec<Vec<String>>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Span(SpanExample),
    Class(ClassExample),
    Tagged(TagExample),
    Choice(ChoiceExample),
}

impl Example {
    /// All tokens, for vocabulary building.
    pub fn tokens(&self) -> Vec<&[String]> {
        match self {
            Example::Span(e) => vec![&e.question, &e.context],
            Example::Class(e) => vec![&e.tokens],
            Example::Tagged(e) => vec![&e.tokens],
            Example::Choice(e) => {
                let mut v: Vec<&[String]> = vec![&e.question];
                v.extend(e.choices.iter().map(Vec::as_slice));
                v
            }
        }
    }

    pub fn labels(&self) -> Vec<&str> {
        match self {
            Example::Class(e) => vec![e.label.as_str()],
            Example::Tagged(e) => e.tags.iter().map(String::as_str).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    SpanJsonl,
    Conll,
    Tsv,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::SpanJsonl => "span_jsonl",
            DataFormat::Conll => "conll",
            DataFormat::Tsv => "tsv",
        })
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "span_jsonl" => Ok(DataFormat::SpanJsonl),
            "conll" => Ok(DataFormat::Conll),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(format!("unknown format '{other}' (span_jsonl, conll, tsv)")),
        }
    }
}

impl DataFormat {
    /// Guess from the file extension.
    pub fn infer(path: &Path) -> Option<DataFormat> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(DataFormat::SpanJsonl),
            "conll" | "txt" => Some(DataFormat::Conll),
            "tsv" => Some(DataFormat::Tsv),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct SpanRecord {
    id: String,
    question: String,
    context: String,
    answer_start_token: i64,
    answer_end_token: i64,
    #[serde(default)]
    is_impossible: bool,
}

pub fn parse_span_jsonl(text: &str) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpanRecord =
            serde_json::from_str(line).map_err(|e| line_err(line_no, e.to_string()))?;
        let context = tokenize(&rec.context);
        let question = tokenize(&rec.question);
        if question.is_empty() {
            return Err(line_err(line_no, "empty question"));
        }
        let answer = if rec.is_impossible {
            None
        } else {
            let (s, e) = (rec.answer_start_token, rec.answer_end_token);
            if e < s {
                return Err(line_err(
                    line_no,
                    format!("answer_end_token {e} precedes answer_start_token {s}"),
                ));
            }
            if s < 0 || e as usize >= context.len() {
                return Err(line_err(
                    line_no,
                    format!("answer span [{s}, {e}] outside passage of {} tokens", context.len()),
                ));
            }
            Some((s as usize, e as usize))
        };
        out.push(Example::Span(SpanExample {
            id: rec.id,
            question,
            context,
            answer,
        }));
    }
    Ok(out)
}

pub fn parse_conll(text: &str) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            out.push(Example::Tagged(TagExample {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            }));
        }
    };
    for (n, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        if cols.len() != 4 {
            return Err(line_err(n + 1, format!("expected 4 columns, found {}", cols.len())));
        }
        tokens.push(cols[0].to_lowercase());
        tags.push(cols[3].to_string());
    }
    flush(&mut tokens, &mut tags);
    Ok(out)
}

pub fn parse_tsv(text: &str) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| line_err(n + 1, "expected label<TAB>text"))?;
        let tokens = tokenize(body);
        if label.trim().is_empty() || tokens.is_empty() {
            return Err(line_err(n + 1, "empty label or text"));
        }
        out.push(Example::Class(ClassExample {
            label: label.trim().to_string(),
            tokens,
        }));
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Vec<Example>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        DataFormat::SpanJsonl => parse_span_jsonl(&text),
        DataFormat::Conll => parse_conll(&text),
        DataFormat::Tsv => parse_tsv(&text),
    }
}

/// Per-example labels of a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// `(start, end)` in packed-sequence coordinates; `(0, 0)` = no answer.
    Span(Vec<(usize, usize)>),
    Class(Vec<usize>),
    /// One row per example; `None` at cls/sep/pad.
    Tags(Vec<Vec<Option<usize>>>),
    /// Index of the correct choice per example.
    Choice(Vec<usize>),
}

/// Where a span example's passage sits in its packed row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanMeta {
    pub id: String,
    pub passage_offset: usize,
    /// Passage tokens kept after truncation.
    pub passage_len: usize,
}

impl SpanMeta {
    /// Maps a packed-sequence span back to passage token indices.
    pub fn to_passage(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let s = start.checked_sub(self.passage_offset)?;
        let e = end.checked_sub(self.passage_offset)?;
        (s <= e && e < self.passage_len).then_some((s, e))
    }
}

/// Padded rows. For multiple choice each example occupies `num_choices`
/// consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub segments: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Labels,
    pub span_meta: Vec<SpanMeta>,
    pub num_choices: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Number of examples (choice groups count once).
    pub fn examples(&self) -> usize {
        self.rows() / self.num_choices.max(1)
    }
}

struct Row {
    ids: Vec<usize>,
    segments: Vec<usize>,
}

fn pack_pair(vocab: &Vocab, first: &[String], second: &[String], l_max: usize) -> Result<(Row, usize), DataError> {
    if first.len() + 3 > l_max {
        return Err(DataError::Invalid(format!(
            "question of {} tokens does not fit max length {l_max}",
            first.len()
        )));
    }
    let keep = second.len().min(l_max - first.len() - 3);
    let mut ids = Vec::with_capacity(first.len() + keep + 3);
    ids.push(CLS);
    ids.extend(vocab.encode_tokens(first));
    ids.push(SEP);
    let offset = ids.len();
    let mut segments = vec![0; offset];
    ids.extend(vocab.encode_tokens(&second[..keep]));
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    Ok((Row { ids, segments }, keep))
}

fn pack_single(vocab: &Vocab, tokens: &[String], l_max: usize) -> Result<(Row, usize), DataError> {
    if l_max < 3 {
        return Err(DataError::Invalid(format!("max length {l_max} leaves no room for tokens")));
    }
    let keep = tokens.len().min(l_max - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend(vocab.encode_tokens(&tokens[..keep]));
    ids.push(SEP);
    let segments = vec![0; ids.len()];
    Ok((Row { ids, segments }, keep))
}

fn label_id(labels: &LabelSet, name: &str) -> Result<usize, DataError> {
    labels
        .id(name)
        .ok_or_else(|| DataError::Invalid(format!("label '{name}' is not in the label set")))
}

/// Packs examples into batches of at most `batch_size`, padding each batch to
/// its longest row. QA rows are `[cls, q…, sep, p…, sep]` with segment 0 up to
/// the first sep; passages are truncated from the tail to fit `l_max`.
pub fn batch_examples(
    examples: &[Example],
    vocab: &Vocab,
    labels: &LabelSet,
    l_max: usize,
    batch_size: usize,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be positive".into()));
    }
    examples
        .chunks(batch_size)
        .map(|chunk| build_batch(chunk, vocab, labels, l_max))
        .collect()
}

fn build_batch(chunk: &[Example], vocab: &Vocab, labels: &LabelSet, l_max: usize) -> Result<Batch, DataError> {
    let mut rows = Vec::new();
    let mut span_meta = Vec::new();
    let mut num_choices = 1;
    let labels = match &chunk[0] {
        Example::Span(_) => {
            let mut out = Vec::new();
            for ex in chunk {
                let Example::Span(e) = ex else { return Err(mixed()) };
                let (row, keep) = pack_pair(vocab, &e.question, &e.context, l_max)?;
                let offset = e.question.len() + 2;
                let label = match e.answer {
                    Some((s, t)) if t < keep => (s + offset, t + offset),
                    _ => (0, 0),
                };
                out.push(label);
                span_meta.push(SpanMeta {
                    id: e.id.clone(),
                    passage_offset: offset,
                    passage_len: keep,
                });
                rows.push(row);
            }
            Labels::Span(out)
        }
        Example::Class(_) => {
            let mut out = Vec::new();
            for ex in chunk {
                let Example::Class(e) = ex else { return Err(mixed()) };
                rows.push(pack_single(vocab, &e.tokens, l_max)?.0);
                out.push(label_id(labels, &e.label)?);
            }
            Labels::Class(out)
        }
        Example::Tagged(_) => {
            let mut out = Vec::new();
            for ex in chunk {
                let Example::Tagged(e) = ex else { return Err(mixed()) };
                let (row, keep) = pack_single(vocab, &e.tokens, l_max)?;
                let mut tags = vec![None];
                for t in &e.tags[..keep] {
                    tags.push(Some(label_id(labels, t)?));
                }
                tags.push(None);
                out.push(tags);
                rows.push(row);
            }
            Labels::Tags(out)
        }
        Example::Choice(first) => {
            num_choices = first.choices.len();
            let mut out = Vec::new();
            for ex in chunk {
                let Example::Choice(e) = ex else { return Err(mixed()) };
                if e.choices.len() != num_choices || e.answer >= num_choices {
                    return Err(DataError::Invalid(format!(
                        "example {} has inconsistent choices",
                        e.id
                    )));
                }
                for c in &e.choices {
                    rows.push(pack_pair(vocab, &e.question, c, l_max)?.0);
                }
                out.push(e.answer);
            }
            Labels::Choice(out)
        }
    };
    let len = rows.iter().map(|r| r.ids.len()).max().unwrap_or(0);
    let mut batch = Batch {
        ids: Vec::with_capacity(rows.len()),
        segments: Vec::with_capacity(rows.len()),
        mask: Vec::with_capacity(rows.len()),
        labels,
        span_meta,
        num_choices,
    };
    for mut r in rows {
        let real = r.ids.len();
        r.ids.resize(len, PAD);
        r.segments.resize(len, 0);
        let mut m = vec![true; real];
        m.resize(len, false);
        batch.ids.push(r.ids);
        batch.segments.push(r.segments);
        batch.mask.push(m);
    }
    if let Labels::Tags(rows) = &mut batch.labels {
        rows.iter_mut().for_each(|r| r.resize(len, None));
    }
    Ok(batch)
}

fn mixed() -> DataError {
    DataError::Invalid("a batch mixes examples of different tasks".into())
}

/// Distinct labels of `examples`, in sorted order.
pub fn collect_labels(examples: &[Example]) -> LabelSet {
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for e in examples {
        for l in e.labels() {
            seen.insert(l, ());
        }
    }
    LabelSet::build(seen.into_keys())
}

pub fn build_vocab(examples: &[Example], capacity: usize) -> Vocab {
    Vocab::build(examples.iter().flat_map(Example::tokens), capacity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn encode_examples() {
        let vocab = Vocab::from_words(&["the", "cat", "sat"]);
        assert_eq!(vocab.tokenize_and_encode("the cat sat"), vec![4, 5, 6]);
        assert_eq!(vocab.tokenize_and_encode("dog"), vec![UNK]);
        let full = Vocab::from_words(&["cat", ",", "sat", "."]);
        assert_eq!(
            full.tokenize_and_encode("Cat, sat."),
            full.tokenize_and_encode("cat , sat .")
        );
        assert_eq!(tokenize("Cat, sat."), words("cat , sat ."));
    }

    #[test]
    fn vocab_is_frequency_ranked_and_capped() {
        let a = words("b a a c c c");
        let v = Vocab::build([a.as_slice()], 6);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), UNK);
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn span_reader() {
        let ok = r#"{"id":"q1","question":"Who sat?","context":"The cat sat.","answer_start_token":1,"answer_end_token":1,"is_impossible":false}"#;
        let ex = parse_span_jsonl(ok).unwrap();
        assert_eq!(ex.len(), 1);
        let Example::Span(e) = &ex[0] else { panic!() };
        assert_eq!(e.answer_text(), "cat");

        let imp = r#"{"id":"q2","question":"Why?","context":"No.","answer_start_token":0,"answer_end_token":0,"is_impossible":true}"#;
        let Example::Span(e) = &parse_span_jsonl(imp).unwrap()[0] else { panic!() };
        assert_eq!(e.answer, None);

        let bad = format!(
            "{ok}\n{}",
            r#"{"id":"q3","question":"x","context":"a b c","answer_start_token":2,"answer_end_token":1}"#
        );
        let err = parse_span_jsonl(&bad).unwrap_err();
        assert!(matches!(err, DataError::Line { line: 2, .. }), "{err}");
        let out_of_range = r#"{"id":"q4","question":"x","context":"a b","answer_start_token":0,"answer_end_token":2}"#;
        assert!(parse_span_jsonl(out_of_range).is_err());
        assert!(matches!(parse_span_jsonl("{oops"), Err(DataError::Line { line: 1, .. })));
    }

    #[test]
    fn conll_reader() {
        let text = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\nGerman JJ B-NP B-MISC\n\n";
        let ex = parse_conll(text).unwrap();
        assert_eq!(ex.len(), 1);
        let Example::Tagged(e) = &ex[0] else { panic!() };
        assert_eq!(e.tokens, words("eu rejects german"));
        assert_eq!(e.tags, words("B-ORG O B-MISC"));
        assert!(matches!(parse_conll("EU NNP B-ORG"), Err(DataError::Line { line: 1, .. })));
    }

    #[test]
    fn tsv_reader() {
        let ex = parse_tsv("pos\tGreat film!\nneg\tDull.\n").unwrap();
        assert_eq!(ex.len(), 2);
        assert!(parse_tsv("no tab here").is_err());
    }

    fn span(q: &str, p: &str, ans: Option<(usize, usize)>) -> Example {
        Example::Span(SpanExample {
            id: "x".into(),
            question: words(q),
            context: words(p),
            answer: ans,
        })
    }

    #[test]
    fn qa_layout() {
        let ex = span("a b c", "d e f g", Some((1, 2)));
        let vocab = build_vocab(std::slice::from_ref(&ex), 100);
        let b = &batch_examples(&[ex], &vocab, &LabelSet::default(), 64, 4).unwrap()[0];
        assert_eq!(b.seq_len(), 10);
        assert_eq!(b.ids[0][0], CLS);
        assert_eq!(b.ids[0][4], SEP);
        assert_eq!(b.ids[0][9], SEP);
        assert_eq!(b.segments[0], vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(b.span_meta[0].passage_offset, 5);
        assert_eq!(b.labels, Labels::Span(vec![(6, 7)]));
        assert_eq!(b.span_meta[0].to_passage(6, 7), Some((1, 2)));
    }

    #[test]
    fn padding_and_mask() {
        let exs = vec![span("a", "b c", None), span("a", "b c d e", Some((3, 3)))];
        let vocab = build_vocab(&exs, 100);
        let b = &batch_examples(&exs, &vocab, &LabelSet::default(), 64, 4).unwrap()[0];
        assert_eq!(b.seq_len(), 8);
        assert_eq!(b.mask[0], vec![true, true, true, true, true, true, false, false]);
        assert_eq!(b.ids[0][6..], [PAD, PAD]);
        assert!(b.mask[1].iter().all(|&m| m));

        let same = vec![span("a", "b c", None), span("a", "d e", None)];
        let b = &batch_examples(&same, &vocab, &LabelSet::default(), 64, 4).unwrap()[0];
        assert!(b.mask.iter().flatten().all(|&m| m));
    }

    #[test]
    fn truncation_keeps_question() {
        let ex = span("q1 q2 q3", "p1 p2 p3 p4 p5 p6", Some((5, 5)));
        let vocab = build_vocab(std::slice::from_ref(&ex), 100);
        let b = &batch_examples(std::slice::from_ref(&ex), &vocab, &LabelSet::default(), 9, 1).unwrap()[0];
        assert_eq!(b.seq_len(), 9);
        assert_eq!(&b.ids[0][1..4], &vocab.encode_tokens(&words("q1 q2 q3"))[..]);
        assert_eq!(b.span_meta[0].passage_len, 3);
        // The answer was cut off, so it becomes the null span.
        assert_eq!(b.labels, Labels::Span(vec![(0, 0)]));
        assert!(batch_examples(&[ex], &vocab, &LabelSet::default(), 5, 1).is_err());
    }

    #[test]
    fn tag_and_class_batches() {
        let exs = parse_conll("EU NNP B-NP B-ORG\nrejects VBZ B-VP O\n").unwrap();
        let labels = collect_labels(&exs);
        assert_eq!(labels.len(), 2);
        let vocab = build_vocab(&exs, 50);
        let b = &batch_examples(&exs, &vocab, &labels, 16, 2).unwrap()[0];
        let org = labels.id("B-ORG").unwrap();
        let o = labels.id("O").unwrap();
        assert_eq!(b.labels, Labels::Tags(vec![vec![None, Some(org), Some(o), None]]));

        let exs = parse_tsv("pos\tgood\nneg\tbad movie\n").unwrap();
        let labels = collect_labels(&exs);
        let vocab = build_vocab(&exs, 50);
        let b = &batch_examples(&exs, &vocab, &labels, 16, 8).unwrap()[0];
        assert_eq!(b.labels, Labels::Class(vec![labels.id("pos").unwrap(), labels.id("neg").unwrap()]));
    }
}
