//! Mixed-granularity QA examples, the synthetic corpus generator, and the
//! line-delimited dataset format.
//!
//! Token ids are split into two halves. The lower half holds *key* tokens,
//! which only ever appear in questions and in planted answer signatures; it
//! is further divided into role bands so that the first signature token is
//! drawn from the start band, the last from the end band and any interior
//! tokens from the middle band. The upper half holds *filler* tokens used
//! for paragraph text and question noise.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const SCHEMA_VERSION: u32 = 1;

/// Default bound on answer span length used by span enumeration and decoding.
pub const DEFAULT_MAX_SPAN_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid example {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(key: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Config {
        key,
        reason: reason.into(),
    }
}

/// Answer span: paragraph index plus inclusive token range within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FineLabel {
    #[serde(rename = "a_p")]
    pub paragraph: usize,
    #[serde(rename = "a_start")]
    pub start: usize,
    #[serde(rename = "a_end")]
    pub end: usize,
}

impl FineLabel {
    pub fn new(paragraph: usize, start: usize, end: usize) -> Self {
        Self {
            paragraph,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Paragraph-level label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoarseLabel {
    #[serde(rename = "a_p")]
    pub paragraph: usize,
}

/// The deterministic fine-to-coarse label mapping.
pub fn coarsen(label: FineLabel) -> CoarseLabel {
    CoarseLabel {
        paragraph: label.paragraph,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Fine(FineLabel),
    Coarse(CoarseLabel),
}

impl Label {
    pub fn paragraph(&self) -> usize {
        match self {
            Label::Fine(f) => f.paragraph,
            Label::Coarse(c) => c.paragraph,
        }
    }
}

/// Token offsets of each paragraph in the flattened document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: Vec<usize>,
}

impl Layout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for n in lengths {
            offsets.push(offsets.last().unwrap() + n);
        }
        Self { offsets }
    }

    pub fn num_paragraphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Flattened index range of paragraph `p`.
    pub fn range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    pub fn paragraph_len(&self, p: usize) -> usize {
        self.offsets[p + 1] - self.offsets[p]
    }

    /// Flattened position of token `t` in paragraph `p`.
    pub fn flat(&self, p: usize, t: usize) -> usize {
        self.offsets[p] + t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    paragraphs: Vec<Vec<TokenId>>,
}

impl Document {
    pub fn new(paragraphs: Vec<Vec<TokenId>>) -> Result<Self, String> {
        if paragraphs.is_empty() {
            return Err("document has no paragraphs".into());
        }
        if paragraphs.iter().any(|p| p.is_empty()) {
            return Err("document has an empty paragraph".into());
        }
        Ok(Self { paragraphs })
    }

    pub fn paragraphs(&self) -> &[Vec<TokenId>] {
        &self.paragraphs
    }

    pub fn num_paragraphs(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.paragraphs.iter().map(Vec::len).sum()
    }

    pub fn layout(&self) -> Layout {
        Layout::from_lengths(&self.paragraphs.iter().map(Vec::len).collect::<Vec<_>>())
    }

    /// All tokens in document order.
    pub fn flat_tokens(&self) -> Vec<TokenId> {
        self.paragraphs.iter().flatten().copied().collect()
    }

    pub fn is_valid_span(&self, label: &FineLabel) -> bool {
        label.paragraph < self.paragraphs.len()
            && label.start <= label.end
            && label.end < self.paragraphs[label.paragraph].len()
    }
}

/// All spans of paragraph `z` no longer than `max_span_len`, in
/// lexicographic `(start, end)` order.
pub fn candidate_set(doc: &Document, z: CoarseLabel, max_span_len: usize) -> Vec<FineLabel> {
    let n = doc.paragraphs[z.paragraph].len();
    let mut out = Vec::new();
    for start in 0..n {
        for end in start..n.min(start + max_span_len) {
            out.push(FineLabel::new(z.paragraph, start, end));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub doc_id: String,
    pub question: Vec<TokenId>,
    pub document: Document,
    pub label: Label,
    // Generator ground truth on coarse examples. Only the crate's analysis
    // and ceiling code read it.
    hidden_fine: Option<FineLabel>,
}

impl Example {
    pub fn fine(
        id: impl Into<String>,
        doc_id: impl Into<String>,
        question: Vec<TokenId>,
        document: Document,
        label: FineLabel,
    ) -> Result<Self, DataError> {
        let ex = Self {
            id: id.into(),
            doc_id: doc_id.into(),
            question,
            document,
            label: Label::Fine(label),
            hidden_fine: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn coarse(
        id: impl Into<String>,
        doc_id: impl Into<String>,
        question: Vec<TokenId>,
        document: Document,
        label: CoarseLabel,
        hidden_fine: Option<FineLabel>,
    ) -> Result<Self, DataError> {
        let ex = Self {
            id: id.into(),
            doc_id: doc_id.into(),
            question,
            document,
            label: Label::Coarse(label),
            hidden_fine,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn invalid(&self, reason: impl Into<String>) -> DataError {
        DataError::Invalid {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.question.is_empty() {
            return Err(self.invalid("empty question"));
        }
        match self.label {
            Label::Fine(f) => {
                if !self.document.is_valid_span(&f) {
                    return Err(self.invalid(format!("fine label {f:?} out of range")));
                }
                if self.hidden_fine.is_some() {
                    return Err(self.invalid("fine example carries a hidden label"));
                }
            }
            Label::Coarse(c) => {
                if c.paragraph >= self.document.num_paragraphs() {
                    return Err(self.invalid(format!("coarse label {} out of range", c.paragraph)));
                }
                if let Some(h) = self.hidden_fine {
                    if !self.document.is_valid_span(&h) {
                        return Err(self.invalid(format!("hidden label {h:?} out of range")));
                    }
                    if coarsen(h) != c {
                        return Err(self.invalid("hidden label disagrees with coarse label"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn fine_label(&self) -> Option<FineLabel> {
        match self.label {
            Label::Fine(f) => Some(f),
            Label::Coarse(_) => None,
        }
    }

    pub fn coarse_label(&self) -> CoarseLabel {
        CoarseLabel {
            paragraph: self.label.paragraph(),
        }
    }

    pub fn has_hidden_fine(&self) -> bool {
        self.hidden_fine.is_some()
    }

    pub(crate) fn hidden_fine(&self) -> Option<FineLabel> {
        self.hidden_fine
    }

    /// Copy with the fine label replaced by its coarse counterpart; the
    /// original span is kept as the hidden label.
    pub fn to_coarse(&self) -> Example {
        match self.label {
            Label::Fine(f) => Example {
                label: Label::Coarse(coarsen(f)),
                hidden_fine: Some(f),
                ..self.clone()
            },
            Label::Coarse(_) => self.clone(),
        }
    }

    /// Copy with the hidden label promoted to the visible fine label.
    pub(crate) fn promote_hidden(&self) -> Option<Example> {
        self.hidden_fine.map(|f| Example {
            label: Label::Fine(f),
            hidden_fine: None,
            ..self.clone()
        })
    }

    /// Copy keeping only the given paragraphs (in the given order), with
    /// labels remapped. `keep` must contain the labeled paragraph.
    pub fn with_paragraphs(&self, keep: &[usize]) -> Example {
        let gold = self.label.paragraph();
        let new_gold = keep
            .iter()
            .position(|&p| p == gold)
            .expect("kept paragraphs must include the labeled one");
        let paragraphs = keep.iter().map(|&p| self.document.paragraphs[p].clone()).collect();
        let remap = |f: FineLabel| FineLabel::new(new_gold, f.start, f.end);
        Example {
            id: self.id.clone(),
            doc_id: self.doc_id.clone(),
            question: self.question.clone(),
            document: Document { paragraphs },
            label: match self.label {
                Label::Fine(f) => Label::Fine(remap(f)),
                Label::Coarse(_) => Label::Coarse(CoarseLabel { paragraph: new_gold }),
            },
            hidden_fine: self.hidden_fine.map(remap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub vocab_size: usize,
    /// Ids reserved for signature (key) tokens; the rest are filler.
    /// Defaults to half the vocabulary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_vocab_size: Option<usize>,
    pub num_documents: usize,
    pub paragraphs_per_doc: usize,
    pub min_paragraph_tokens: usize,
    pub max_paragraph_tokens: usize,
    pub questions_per_doc: usize,
    pub signature_length: usize,
    pub distractor_rate: f64,
    pub noise_rate: f64,
    pub fine_frac: f64,
    pub coarse_frac: f64,
    pub dev_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            key_vocab_size: None,
            num_documents: 300,
            paragraphs_per_doc: 4,
            min_paragraph_tokens: 40,
            max_paragraph_tokens: 60,
            questions_per_doc: 4,
            signature_length: 3,
            distractor_rate: 0.5,
            noise_rate: 0.1,
            fine_frac: 0.05,
            coarse_frac: 0.2,
            dev_frac: 0.1,
            test_frac: 0.2,
            seed: 7,
        }
    }
}

/// Partition of the vocabulary into key role bands and filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
    pub roles: usize,
    pub key_count: usize,
}

impl Vocabulary {
    pub fn new(size: usize, signature_length: usize, key_count: usize) -> Self {
        Self {
            size,
            roles: signature_length.clamp(1, 3),
            key_count,
        }
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        (t as usize) < self.key_count
    }

    /// Key-token id range for a role (0 = start, last = end, 1 = interior).
    pub fn band(&self, role: usize) -> std::ops::Range<TokenId> {
        let width = self.key_count / self.roles;
        (role * width) as TokenId..((role + 1) * width) as TokenId
    }

    pub fn filler(&self) -> std::ops::Range<TokenId> {
        self.key_count as TokenId..self.size as TokenId
    }

    fn role_of_position(&self, i: usize, len: usize) -> usize {
        if i == 0 {
            0
        } else if i + 1 == len {
            self.roles - 1
        } else {
            1
        }
    }
}

impl GenConfig {
    pub fn key_count(&self) -> usize {
        self.key_vocab_size.unwrap_or(self.vocab_size / 2)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size, self.signature_length, self.key_count())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.signature_length == 0 {
            return Err(config_err("signature_length", "must be at least 1"));
        }
        let roles = self.signature_length.min(3);
        if self.vocab_size < 4 * roles {
            return Err(config_err(
                "vocab_size",
                format!("need at least {} ids for {roles} role bands plus filler", 4 * roles),
            ));
        }
        let keys = self.key_count();
        if keys < 2 * roles || keys >= self.vocab_size {
            return Err(config_err(
                "key_vocab_size",
                format!("must be at least {} and below vocab_size", 2 * roles),
            ));
        }
        if self.num_documents == 0 {
            return Err(config_err("num_documents", "must be positive"));
        }
        if self.paragraphs_per_doc == 0 {
            return Err(config_err("paragraphs_per_doc", "must be positive"));
        }
        if self.min_paragraph_tokens == 0 || self.min_paragraph_tokens > self.max_paragraph_tokens {
            return Err(config_err(
                "min_paragraph_tokens",
                "must be positive and no larger than max_paragraph_tokens",
            ));
        }
        if self.signature_length > self.min_paragraph_tokens {
            return Err(config_err(
                "signature_length",
                format!(
                    "signature of {} tokens cannot fit a {}-token paragraph",
                    self.signature_length, self.min_paragraph_tokens
                ),
            ));
        }
        if self.questions_per_doc == 0 {
            return Err(config_err("questions_per_doc", "must be positive"));
        }
        for (key, rate) in [("distractor_rate", self.distractor_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(config_err(key, "must lie in [0, 1]"));
            }
        }
        let fracs = [
            ("fine_frac", self.fine_frac),
            ("coarse_frac", self.coarse_frac),
            ("dev_frac", self.dev_frac),
            ("test_frac", self.test_frac),
        ];
        for (key, f) in fracs {
            if !(f > 0.0) {
                return Err(config_err(key, "must be positive"));
            }
        }
        if fracs.iter().map(|(_, f)| f).sum::<f64>() > 1.0 + 1e-12 {
            return Err(config_err("fine_frac", "split fractions sum above 1"));
        }
        let counts = self.split_counts();
        if counts.iter().sum::<usize>() > self.num_documents {
            return Err(config_err(
                "num_documents",
                "too few documents to give every split at least one",
            ));
        }
        Ok(())
    }

    /// Documents per split: fine, coarse, dev, test. Each split gets at least one.
    pub fn split_counts(&self) -> [usize; 4] {
        let n = self.num_documents as f64;
        [self.fine_frac, self.coarse_frac, self.dev_frac, self.test_frac]
            .map(|f| ((f * n).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub gen_config: GenConfig,
    pub fine_train: Vec<Example>,
    pub coarse_train: Vec<Example>,
    pub dev_fine: Vec<Example>,
    pub test_fine: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    FineTrain,
    CoarseTrain,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::FineTrain, Split::CoarseTrain, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::FineTrain => "fine_train",
            Split::CoarseTrain => "coarse_train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::FineTrain => &self.fine_train,
            Split::CoarseTrain => &self.coarse_train,
            Split::Dev => &self.dev_fine,
            Split::Test => &self.test_fine,
        }
    }

    /// Checks the bundle-level invariants: split labels, hidden labels on
    /// coarse data, and document-disjoint splits.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashMap::new();
        for split in Split::ALL {
            for ex in self.split(split) {
                ex.validate()?;
                let ok = match split {
                    Split::CoarseTrain => {
                        matches!(ex.label, Label::Coarse(_)) && ex.hidden_fine.is_some()
                    }
                    _ => matches!(ex.label, Label::Fine(_)),
                };
                if !ok {
                    return Err(ex.invalid(format!("wrong label kind for split {}", split.name())));
                }
                if let Some(prev) = seen.insert(ex.doc_id.clone(), split) {
                    if prev != split {
                        return Err(ex.invalid(format!(
                            "document {} appears in {} and {}",
                            ex.doc_id,
                            prev.name(),
                            split.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

struct GeneratedDoc {
    doc_id: String,
    document: Document,
    questions: Vec<(Vec<TokenId>, FineLabel)>,
}

/// Deterministic synthetic corpus. See the module docs for the vocabulary layout.
pub fn generate(config: &GenConfig) -> Result<DatasetBundle, DataError> {
    config.validate()?;
    let vocab = config.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let docs = (0..config.num_documents)
        .map(|d| generate_doc(config, &vocab, d, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let counts = config.split_counts();
    let mut cursor = 0;
    let mut take = |n: usize| {
        let ids = order[cursor..cursor + n].to_vec();
        cursor += n;
        ids
    };
    let (fine_ids, coarse_ids, dev_ids, test_ids) = (take(counts[0]), take(counts[1]), take(counts[2]), take(counts[3]));

    let fine_examples = |ids: &[usize]| -> Vec<Example> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.iter()
            .flat_map(|&d| {
                let doc = &docs[d];
                doc.questions.iter().enumerate().map(move |(q, (question, gold))| Example {
                    id: format!("{}-q{q}", doc.doc_id),
                    doc_id: doc.doc_id.clone(),
                    question: question.clone(),
                    document: doc.document.clone(),
                    label: Label::Fine(*gold),
                    hidden_fine: None,
                })
            })
            .collect()
    };
    let bundle = DatasetBundle {
        gen_config: config.clone(),
        fine_train: fine_examples(&fine_ids),
        coarse_train: fine_examples(&coarse_ids).iter().map(Example::to_coarse).collect(),
        dev_fine: fine_examples(&dev_ids),
        test_fine: fine_examples(&test_ids),
    };
    debug_assert!(bundle.validate().is_ok());
    Ok(bundle)
}

fn free_starts(occupied: &[bool], len: usize) -> Vec<usize> {
    if occupied.len() < len {
        return Vec::new();
    }
    (0..=occupied.len() - len)
        .filter(|&s| !occupied[s..s + len].iter().any(|&o| o))
        .collect()
}

fn generate_doc(
    config: &GenConfig,
    vocab: &Vocabulary,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedDoc, DataError> {
    let filler = vocab.filler();
    let m = config.paragraphs_per_doc;
    let mut paragraphs: Vec<Vec<TokenId>> = (0..m)
        .map(|_| {
            let n = rng.gen_range(config.min_paragraph_tokens..=config.max_paragraph_tokens);
            (0..n).map(|_| rng.gen_range(filler.clone())).collect()
        })
        .collect();
    let mut occupied: Vec<Vec<bool>> = paragraphs.iter().map(|p| vec![false; p.len()]).collect();
    let sig_len = config.signature_length;
    let mut questions = Vec::with_capacity(config.questions_per_doc);

    for _ in 0..config.questions_per_doc {
        let signature: Vec<TokenId> = (0..sig_len)
            .map(|i| rng.gen_range(vocab.band(vocab.role_of_position(i, sig_len))))
            .collect();
        let mut question = signature.clone();
        question.extend((0..sig_len).map(|_| rng.gen_range(filler.clone())));
        question.shuffle(rng);

        let preferred = rng.gen_range(0..m);
        let answer_p = (0..m)
            .map(|k| (preferred + k) % m)
            .find(|&p| !free_starts(&occupied[p], sig_len).is_empty())
            .ok_or_else(|| {
                config_err(
                    "questions_per_doc",
                    format!("document {d} has no room left for another signature"),
                )
            })?;
        let starts = free_starts(&occupied[answer_p], sig_len);
        let start = starts[rng.gen_range(0..starts.len())];
        paragraphs[answer_p][start..start + sig_len].copy_from_slice(&signature);
        occupied[answer_p][start..start + sig_len].iter_mut().for_each(|o| *o = true);
        let gold = FineLabel::new(answer_p, start, start + sig_len - 1);

        if sig_len >= 2 && m >= 2 && rng.gen_bool(config.distractor_rate) {
            let prefix = rng.gen_range(1..sig_len);
            let mut others: Vec<usize> = (0..m).filter(|&p| p != answer_p).collect();
            others.shuffle(rng);
            if let Some(p) = others
                .into_iter()
                .find(|&p| !free_starts(&occupied[p], prefix).is_empty())
            {
                let starts = free_starts(&occupied[p], prefix);
                let s = starts[rng.gen_range(0..starts.len())];
                paragraphs[p][s..s + prefix].copy_from_slice(&signature[..prefix]);
                occupied[p][s..s + prefix].iter_mut().for_each(|o| *o = true);
            }
        }
        if rng.gen_bool(config.noise_rate) {
            let i = rng.gen_range(0..sig_len);
            paragraphs[answer_p][start + i] = rng.gen_range(filler.clone());
        }
        questions.push((question, gold));
    }

    Ok(GeneratedDoc {
        doc_id: format!("d{d:05}"),
        document: Document { paragraphs },
        questions,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    split: String,
    gen_config: GenConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LabelKind {
    Fine,
    Coarse,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    doc_id: String,
    question: Vec<TokenId>,
    paragraphs: Vec<Vec<TokenId>>,
    label_kind: LabelKind,
    a_p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_end: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_fine: Option<FineLabel>,
}

impl From<&Example> for Record {
    fn from(ex: &Example) -> Self {
        let (label_kind, a_start, a_end) = match ex.label {
            Label::Fine(f) => (LabelKind::Fine, Some(f.start), Some(f.end)),
            Label::Coarse(_) => (LabelKind::Coarse, None, None),
        };
        Record {
            id: ex.id.clone(),
            doc_id: ex.doc_id.clone(),
            question: ex.question.clone(),
            paragraphs: ex.document.paragraphs.clone(),
            label_kind,
            a_p: ex.label.paragraph(),
            a_start,
            a_end,
            hidden_fine: ex.hidden_fine,
        }
    }
}

impl TryFrom<Record> for Example {
    type Error = String;

    fn try_from(r: Record) -> Result<Self, String> {
        let document = Document::new(r.paragraphs)?;
        let label = match (r.label_kind, r.a_start, r.a_end) {
            (LabelKind::Fine, Some(s), Some(e)) => Label::Fine(FineLabel::new(r.a_p, s, e)),
            (LabelKind::Fine, _, _) => return Err("fine record needs a_start and a_end".into()),
            (LabelKind::Coarse, None, None) => Label::Coarse(CoarseLabel { paragraph: r.a_p }),
            (LabelKind::Coarse, _, _) => return Err("coarse record must not carry a_start/a_end".into()),
        };
        let ex = Example {
            id: r.id,
            doc_id: r.doc_id,
            question: r.question,
            document,
            label,
            hidden_fine: r.hidden_fine,
        };
        ex.validate().map_err(|e| e.to_string())?;
        Ok(ex)
    }
}

/// Writes one `<split>.jsonl` file per split into `dir`, creating it if needed.
pub fn save(bundle: &DatasetBundle, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let mut out = BufWriter::new(fs::File::create(dir.join(split.file_name()))?);
        let header = Header {
            schema_version: SCHEMA_VERSION,
            split: split.name().to_string(),
            gen_config: bundle.gen_config.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for ex in bundle.split(split) {
            writeln!(out, "{}", serde_json::to_string(&Record::from(ex)).expect("record serializes"))?;
        }
        out.flush()?;
    }
    Ok(())
}

fn read_split(path: &Path, split: Split) -> Result<(GenConfig, Vec<Example>), DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| parse_err(1, "missing header line".into()))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported schema version {}", header.schema_version),
        ));
    }
    if header.split != split.name() {
        return Err(parse_err(1, format!("expected split {}, found {}", split.name(), header.split)));
    }
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        examples.push(Example::try_from(record).map_err(|e| parse_err(line_no, e))?);
    }
    Ok((header.gen_config, examples))
}

/// Reads a bundle written by [`save`].
pub fn load(dir: &Path) -> Result<DatasetBundle, DataError> {
    let mut config = None;
    let mut splits: Vec<Vec<Example>> = Vec::with_capacity(4);
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let (cfg, examples) = read_split(&path, split)?;
        match &config {
            None => config = Some(cfg),
            Some(c) if *c != cfg => {
                return Err(DataError::Parse {
                    path,
                    line: 1,
                    message: "generator config differs from the other splits".into(),
                })
            }
            Some(_) => {}
        }
        splits.push(examples);
    }
    let mut splits = splits.into_iter();
    let bundle = DatasetBundle {
        gen_config: config.expect("four splits read"),
        fine_train: splits.next().unwrap(),
        coarse_train: splits.next().unwrap(),
        dev_fine: splits.next().unwrap(),
        test_fine: splits.next().unwrap(),
    };
    bundle.validate()?;
    Ok(bundle)
}
