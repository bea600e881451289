//! Corpora: synthetic generators, file formats and tokenized datasets.
//!
//! Three tasks share one record shape. For `lm` the context is empty and the
//! target is a sentence; for `dialog` the context is the history (turns
//! joined by `<sep>`) and the target is the response; for `qag` the context
//! is a passage, the target a question and `span` the 1-based inclusive
//! word positions of its answer in the passage.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::tokenizer::{Vocab, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Lm,
    Dialog,
    Qag,
}

impl FromStr for Task {
    type Err = VoltaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(Task::Lm),
            "dialog" => Ok(Task::Dialog),
            "qag" => Ok(Task::Qag),
            _ => Err(VoltaError::Config(format!("unknown task `{s}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lm => "lm",
            Task::Dialog => "dialog",
            Task::Qag => "qag",
        })
    }
}

/// One text example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Records with the same group share a context.
    pub group: usize,
    /// Passage (qag) or history turns (dialog); empty for lm.
    pub context: Vec<String>,
    pub target: String,
    pub span: Option<(usize, usize)>,
}

impl Record {
    /// The context as one string; dialog turns are joined by ` <sep> `.
    pub fn context_text(&self) -> String {
        self.context.join(" <sep> ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub task: Task,
    pub records: Vec<Record>,
}

/// Annotation record of a qag file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QagAnnotation {
    pub context: String,
    pub question: String,
    pub s: usize,
    pub e: usize,
}

impl Corpus {
    /// Every string that should enter the vocabulary.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| {
            r.context
                .iter()
                .map(String::as_str)
                .chain(std::iter::once(r.target.as_str()))
        })
    }

    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(self.texts())
    }

    /// Number of distinct groups.
    pub fn n_groups(&self) -> usize {
        let mut g: Vec<usize> = self.records.iter().map(|r| r.group).collect();
        g.sort_unstable();
        g.dedup();
        g.len()
    }

    /// Splits by group: the last `holdout` fraction of groups (in order of
    /// first appearance) becomes the second corpus.
    pub fn split(&self, holdout: f64) -> (Corpus, Corpus) {
        let mut groups: Vec<usize> = Vec::new();
        for r in &self.records {
            if !groups.contains(&r.group) {
                groups.push(r.group);
            }
        }
        let n_test = ((groups.len() as f64) * holdout).round() as usize;
        let cut = groups.len() - n_test.min(groups.len());
        let test: Vec<usize> = groups[cut..].to_vec();
        let (a, b): (Vec<Record>, Vec<Record>) = self.records.iter().cloned().partition(|r| !test.contains(&r.group));
        (
            Corpus {
                task: self.task,
                records: a,
            },
            Corpus {
                task: self.task,
                records: b,
            },
        )
    }

    /// Reads a corpus file.
    ///
    /// * `lm`: one sentence per line.
    /// * `dialog`: one dialog per line, turns separated by tabs, the last
    ///   turn being the response.
    /// * `qag`: a JSON array of `{context, question, s, e}` records.
    pub fn read(path: &Path, task: Task) -> Result<Corpus> {
        let text = std::fs::read_to_string(path).map_err(|e| VoltaError::Io(format!("{}: {e}", path.display())))?;
        Corpus::parse(&text, task)
    }

    pub fn parse(text: &str, task: Task) -> Result<Corpus> {
        let mut records = Vec::new();
        match task {
            Task::Lm => {
                for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                    records.push(Record {
                        group: i,
                        context: vec![],
                        target: line.split_whitespace().collect::<Vec<_>>().join(" "),
                        span: None,
                    });
                }
            }
            Task::Dialog => {
                // lines sharing a history are alternative responses to it
                let mut histories: Vec<Vec<String>> = Vec::new();
                for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                    let mut turns: Vec<String> = line.split('\t').map(|t| t.trim().to_string()).collect();
                    if turns.len() < 2 {
                        return Err(VoltaError::Spec(format!("dialog line {} has no history", i + 1)));
                    }
                    let target = turns.pop().unwrap();
                    let group = match histories.iter().position(|h| *h == turns) {
                        Some(g) => g,
                        None => {
                            histories.push(turns.clone());
                            histories.len() - 1
                        }
                    };
                    records.push(Record {
                        group,
                        context: turns,
                        target,
                        span: None,
                    });
                }
            }
            Task::Qag => {
                let anns: Vec<QagAnnotation> =
                    serde_json::from_str(text).map_err(|e| VoltaError::Spec(format!("qag annotations: {e}")))?;
                let mut contexts: Vec<String> = Vec::new();
                for a in anns {
                    let m = a.context.split_whitespace().count();
                    if a.s < 1 || a.s > a.e || a.e > m {
                        return Err(VoltaError::Spec(format!(
                            "span ({}, {}) is not inside a context of {m} words",
                            a.s, a.e
                        )));
                    }
                    let group = match contexts.iter().position(|c| *c == a.context) {
                        Some(g) => g,
                        None => {
                            contexts.push(a.context.clone());
                            contexts.len() - 1
                        }
                    };
                    records.push(Record {
                        group,
                        context: vec![a.context],
                        target: a.question,
                        span: Some((a.s, a.e)),
                    });
                }
            }
        }
        Ok(Corpus { task, records })
    }

    /// Inverse of [`Corpus::parse`].
    pub fn render(&self) -> Result<String> {
        match self.task {
            Task::Lm => Ok(self.records.iter().map(|r| format!("{}\n", r.target)).collect()),
            Task::Dialog => Ok(self
                .records
                .iter()
                .map(|r| format!("{}\t{}\n", r.context.join("\t"), r.target))
                .collect()),
            Task::Qag => {
                let anns: Vec<QagAnnotation> = self
                    .records
                    .iter()
                    .map(|r| {
                        let (s, e) = r
                            .span
                            .ok_or_else(|| VoltaError::Spec("qag record without a span".into()))?;
                        Ok(QagAnnotation {
                            context: r.context_text(),
                            question: r.target.clone(),
                            s,
                            e,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(serde_json::to_string_pretty(&anns).expect("annotations serialize") + "\n")
            }
        }
    }
}

/// Parameters of a synthetic corpus. Generation is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    /// Size of the content-word pool the generator draws from.
    pub vocab_size: usize,
    /// Sentences (lm), dialogs (dialog) or passages (qag).
    pub n_contexts: usize,
    /// qag: facts, and therefore question/answer pairs, per passage.
    pub spans_per_context: usize,
    /// qag: pad passages to this many words; 0 keeps their natural length.
    pub context_len: usize,
    /// qag: longest answer in words.
    pub max_answer_len: usize,
    /// qag: number of question phrasings in use (1 to 3).
    pub question_templates: usize,
    /// dialog: history turns before the response.
    pub turns: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::Qag,
            vocab_size: 60,
            n_contexts: 200,
            spans_per_context: 4,
            context_len: 0,
            max_answer_len: 2,
            question_templates: 2,
            turns: 2,
            seed: 0,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// `n` distinct two-syllable pseudo-words in a seed-dependent order.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut syll: Vec<String> = Vec::new();
    for c in CONSONANTS {
        for v in VOWELS {
            syll.push(format!("{}{}", *c as char, *v as char));
        }
    }
    let mut all: Vec<String> = Vec::with_capacity(syll.len() * syll.len());
    for a in &syll {
        for b in &syll {
            all.push(format!("{a}{b}"));
        }
    }
    all.shuffle(rng);
    all.truncate(n);
    all
}

const QUESTION_TEMPLATES: [&[&str]; 3] = [
    &["what", "does", "S", "R", "?"],
    &["S", "R", "what", "?"],
    &["tell", "me", "what", "S", "R"],
];

/// Builds a synthetic corpus.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.n_contexts == 0 {
        return Err(VoltaError::Spec("n_contexts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.task {
        Task::Lm => make_lm(spec, &mut rng),
        Task::Dialog => make_dialog(spec, &mut rng),
        Task::Qag => make_qag(spec, &mut rng),
    }
}

fn pools(spec: &SyntheticSpec, parts: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
    let per = spec.vocab_size / parts;
    if per < 2 {
        return Err(VoltaError::Spec(format!(
            "vocab_size {} is too small for {parts} word classes",
            spec.vocab_size
        )));
    }
    let words = pseudo_words(per * parts, rng);
    Ok(words.chunks(per).map(<[String]>::to_vec).collect())
}

fn make_lm(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    // word classes: adjectives, nouns, verbs, adverbs
    let p = pools(spec, 4, rng)?;
    let (adj, noun, verb, adv) = (&p[0], &p[1], &p[2], &p[3]);
    let mut records = Vec::with_capacity(spec.n_contexts);
    for i in 0..spec.n_contexts {
        let pick = |v: &Vec<String>, rng: &mut ChaCha8Rng| v.choose(rng).unwrap().clone();
        let words: Vec<String> = match rng.random_range(0..3) {
            0 => vec![
                "the".into(),
                pick(adj, rng),
                pick(noun, rng),
                pick(verb, rng),
                "the".into(),
                pick(noun, rng),
            ],
            1 => vec!["a".into(), pick(noun, rng), pick(verb, rng), pick(adv, rng)],
            _ => vec![
                "the".into(),
                pick(noun, rng),
                "and".into(),
                "the".into(),
                pick(noun, rng),
                pick(verb, rng),
                pick(adv, rng),
            ],
        };
        records.push(Record {
            group: i,
            context: vec![],
            target: words.join(" "),
            span: None,
        });
    }
    Ok(Corpus {
        task: Task::Lm,
        records,
    })
}

fn make_dialog(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    if spec.turns == 0 {
        return Err(VoltaError::Spec("dialogs need at least one history turn".into()));
    }
    let p = pools(spec, 2, rng)?;
    let (things, places) = (&p[0], &p[1]);
    let mut records = Vec::with_capacity(spec.n_contexts);
    for i in 0..spec.n_contexts {
        let mut history = Vec::with_capacity(spec.turns);
        for _ in 0..spec.turns - 1 {
            let place = places.choose(rng).unwrap();
            history.push(format!("i was in {place} today"));
        }
        let thing = things.choose(rng).unwrap();
        history.push(format!("do you like {thing} ?"));
        let response = match rng.random_range(0..3) {
            0 => format!("yes i like {thing}"),
            1 => format!("no i hate {thing}"),
            _ => format!("{thing} is fine i guess"),
        };
        records.push(Record {
            group: i,
            context: history,
            target: response,
            span: None,
        });
    }
    Ok(Corpus {
        task: Task::Dialog,
        records,
    })
}

fn make_qag(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    let n_facts = spec.spans_per_context;
    if n_facts == 0 {
        return Err(VoltaError::Spec("spans_per_context must be positive".into()));
    }
    if spec.max_answer_len == 0 {
        return Err(VoltaError::Spec("max_answer_len must be positive".into()));
    }
    if !(1..=QUESTION_TEMPLATES.len()).contains(&spec.question_templates) {
        return Err(VoltaError::Spec(format!(
            "question_templates must be between 1 and {}",
            QUESTION_TEMPLATES.len()
        )));
    }
    // word classes: subjects, relations, answer modifiers, answer heads, filler
    let p = pools(spec, 5, rng)?;
    let (subjects, relations, mods, heads, filler) = (&p[0], &p[1], &p[2], &p[3], &p[4]);
    if subjects.len() < n_facts || relations.len() < n_facts {
        return Err(VoltaError::Spec(format!(
            "vocab_size {} cannot give {n_facts} distinct facts per passage",
            spec.vocab_size
        )));
    }
    let longest_fact = 3 + spec.max_answer_len;
    if spec.context_len > 0 && spec.context_len < n_facts * longest_fact {
        return Err(VoltaError::Spec(format!(
            "{n_facts} facts of up to {longest_fact} words do not fit a context of {} words",
            spec.context_len
        )));
    }
    let mut records = Vec::with_capacity(spec.n_contexts * n_facts);
    for group in 0..spec.n_contexts {
        let subj: Vec<&String> = subjects.choose_multiple(rng, n_facts).collect();
        let rel: Vec<&String> = relations.choose_multiple(rng, n_facts).collect();
        let mut passage: Vec<String> = Vec::new();
        let mut spans = Vec::with_capacity(n_facts);
        for f in 0..n_facts {
            passage.push(subj[f].clone());
            passage.push(rel[f].clone());
            let len = rng.random_range(1..=spec.max_answer_len);
            let s = passage.len() + 1;
            for _ in 1..len {
                passage.push(mods.choose(rng).unwrap().clone());
            }
            passage.push(heads.choose(rng).unwrap().clone());
            spans.push((s, passage.len()));
            passage.push(".".into());
        }
        while spec.context_len > 0 && passage.len() < spec.context_len {
            passage.push(filler.choose(rng).unwrap().clone());
        }
        let text = passage.join(" ");
        for f in 0..n_facts {
            let template = QUESTION_TEMPLATES[rng.random_range(0..spec.question_templates)];
            let question: Vec<&str> = template
                .iter()
                .map(|w| match *w {
                    "S" => subj[f].as_str(),
                    "R" => rel[f].as_str(),
                    w => w,
                })
                .collect();
            records.push(Record {
                group,
                context: vec![text.clone()],
                target: question.join(" "),
                span: Some(spans[f]),
            });
        }
    }
    Ok(Corpus {
        task: Task::Qag,
        records,
    })
}

/// A tokenized record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub group: usize,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    /// 1-based inclusive token span of the answer in `context`.
    pub span: Option<(usize, usize)>,
}

impl Example {
    /// Answer tokens `context[s−1..e]`, empty without a span.
    pub fn answer(&self) -> &[usize] {
        match self.span {
            Some((s, e)) => &self.context[s - 1..e],
            None => &[],
        }
    }
}

/// Tokenizes a word list, returning the ids and each word's token range.
fn encode_words(vocab: &Vocab, words: &[&str]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut ids = Vec::new();
    let mut ranges = Vec::with_capacity(words.len());
    for w in words {
        let start = ids.len();
        ids.extend(vocab.encode(w));
        ranges.push((start, ids.len()));
    }
    (ids, ranges)
}

/// Tokenizes one record; word spans become token spans.
pub fn tokenize_record(vocab: &Vocab, r: &Record) -> Result<Example> {
    let mut context = Vec::new();
    let mut span = None;
    for (i, turn) in r.context.iter().enumerate() {
        if i > 0 {
            context.push(SEP);
        }
        let words: Vec<&str> = turn.split_whitespace().collect();
        let (ids, ranges) = encode_words(vocab, &words);
        if let Some((s, e)) = r.span {
            if s < 1 || s > e || e > ranges.len() {
                return Err(VoltaError::Spec(format!("span ({s}, {e}) outside context")));
            }
            span = Some((context.len() + ranges[s - 1].0 + 1, context.len() + ranges[e - 1].1));
        }
        context.extend(ids);
    }
    Ok(Example {
        group: r.group,
        context,
        target: vocab.encode(&r.target),
        span,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocab) -> Result<Dataset> {
        let examples = corpus
            .records
            .iter()
            .map(|r| tokenize_record(vocab, r))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            task: corpus.task,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Longest sequence any pass will build, for sizing `max_seq`.
    pub fn max_sequence(&self) -> usize {
        self.examples
            .iter()
            .map(|ex| {
                let ans = ex.answer().len();
                // posterior: BOS ctx SEP target [SEP answer]; question pass: BOS ctx SEP answer SEP target
                let extra = if ex.span.is_some() { ans + 1 } else { 0 };
                ex.context.len() + ex.target.len() + extra + 3
            })
            .max()
            .unwrap_or(0)
    }

    /// Examples grouped by context, in order of first appearance.
    pub fn groups(&self) -> Vec<Vec<&Example>> {
        let mut order: Vec<usize> = Vec::new();
        let mut out: Vec<Vec<&Example>> = Vec::new();
        for ex in &self.examples {
            match order.iter().position(|g| *g == ex.group) {
                Some(i) => out[i].push(ex),
                None => {
                    order.push(ex.group);
                    out.push(vec![ex]);
                }
            }
        }
        out
    }
}
