//! Corpus loading, vocabularies, and index encoding.
//!
//! The default on-disk layout is one file per split (`train.txt`, `dev.txt`,
//! `test.txt`). Records are separated by a blank line; each record holds one
//! `<token> <slot_tag>` line per token followed by a line with the intent
//! label alone. The alternate layout keeps three line-aligned files per split
//! directory: `seq.in` (tokens), `seq.out` (tags) and `label` (intents).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Id given to a slot tag or intent that never occurred in training data.
/// It lies outside every label range, so it can never be predicted.
pub const UNSEEN_ID: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {record} (line {line}): {message}")]
    Parse {
        path: String,
        record: usize,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Usage(format!(
                "unknown split {other:?} (expected train, dev or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `<split>.txt`, token-per-line records.
    #[default]
    Conll,
    /// `<split>/seq.in`, `<split>/seq.out`, `<split>/label`.
    SeqFiles,
}

impl FromStr for Layout {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conll" => Ok(Layout::Conll),
            "seq" => Ok(Layout::SeqFiles),
            other => Err(DatasetError::Usage(format!(
                "unknown layout {other:?} (expected conll or seq)"
            ))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Conll => "conll",
            Layout::SeqFiles => "seq",
        })
    }
}

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slot_tags: Vec<String>, intent: String) -> Result<Self, String> {
        if tokens.is_empty() {
            return Err("utterance has no tokens".into());
        }
        if tokens.len() != slot_tags.len() {
            return Err(format!("{} tokens but {} slot tags", tokens.len(), slot_tags.len()));
        }
        if let Some(bad) = slot_tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(format!("malformed slot tag {bad:?}"));
        }
        if intent.is_empty() || intent.contains(char::is_whitespace) {
            return Err(format!("malformed intent label {intent:?}"));
        }
        Ok(Self {
            tokens,
            slot_tags,
            intent,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// `O`, or `B-`/`I-` followed by a nonempty type.
pub fn is_valid_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty())
}

/// Parses the token-per-line record format. `origin` names the source in
/// error messages.
pub fn parse_records(text: &str, origin: &str) -> Result<Vec<Utterance>, DatasetError> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    for (line_no, line) in lines.chain(std::iter::once((0, ""))) {
        if !line.trim().is_empty() {
            block.push((line_no, line));
            continue;
        }
        if block.is_empty() {
            continue;
        }
        let record = out.len();
        let err = |line: usize, message: String| DatasetError::Parse {
            path: origin.to_string(),
            record,
            line,
            message,
        };
        let (intent_line, intent) = block[block.len() - 1];
        let intent_fields: Vec<&str> = intent.split_whitespace().collect();
        if intent_fields.len() != 1 {
            return Err(err(
                intent_line,
                "record must end with a line holding only the intent".into(),
            ));
        }
        if block.len() == 1 {
            return Err(err(intent_line, "empty record (no tokens)".into()));
        }
        let mut tokens = Vec::with_capacity(block.len() - 1);
        let mut tags = Vec::with_capacity(block.len() - 1);
        for &(ln, l) in &block[..block.len() - 1] {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(err(ln, format!("expected `<token> <tag>`, found {l:?}")));
            }
            tokens.push(fields[0].to_string());
            tags.push(fields[1].to_string());
        }
        let utt = Utterance::new(tokens, tags, intent_fields[0].to_string()).map_err(|m| err(block[0].0, m))?;
        out.push(utt);
        block.clear();
    }
    Ok(out)
}

/// Renders utterances in the token-per-line record format.
pub fn format_records(utts: &[Utterance]) -> String {
    let mut s = String::new();
    for (i, u) in utts.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (tok, tag) in u.tokens.iter().zip(&u.slot_tags) {
            s.push_str(tok);
            s.push(' ');
            s.push_str(tag);
            s.push('\n');
        }
        s.push_str(&u.intent);
        s.push('\n');
    }
    s
}

/// Parses the three line-aligned files of the alternate layout.
pub fn parse_seq_files(
    seq_in: &str,
    seq_out: &str,
    labels: &str,
    origin: &str,
) -> Result<Vec<Utterance>, DatasetError> {
    let ins: Vec<&str> = seq_in.lines().collect();
    let outs: Vec<&str> = seq_out.lines().collect();
    let labs: Vec<&str> = labels.lines().collect();
    if ins.len() != outs.len() || ins.len() != labs.len() {
        return Err(DatasetError::Parse {
            path: origin.to_string(),
            record: ins.len().min(outs.len()).min(labs.len()),
            line: ins.len().min(outs.len()).min(labs.len()) + 1,
            message: format!(
                "line counts differ: seq.in {}, seq.out {}, label {}",
                ins.len(),
                outs.len(),
                labs.len()
            ),
        });
    }
    ins.iter()
        .zip(&outs)
        .zip(&labs)
        .enumerate()
        .map(|(i, ((a, b), c))| {
            let tokens: Vec<String> = a.split_whitespace().map(str::to_string).collect();
            let tags: Vec<String> = b.split_whitespace().map(str::to_string).collect();
            Utterance::new(tokens, tags, c.trim().to_string()).map_err(|message| DatasetError::Parse {
                path: origin.to_string(),
                record: i,
                line: i + 1,
                message,
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads one split from `dir`, preserving record order.
pub fn load_split(dir: &Path, split: Split, layout: Layout) -> Result<Vec<Utterance>, DatasetError> {
    match layout {
        Layout::Conll => {
            let path = dir.join(format!("{split}.txt"));
            parse_records(&read(&path)?, &path.display().to_string())
        }
        Layout::SeqFiles => {
            let base = dir.join(split.name());
            let seq_in = read(&base.join("seq.in"))?;
            let seq_out = read(&base.join("seq.out"))?;
            let label = read(&base.join("label"))?;
            parse_seq_files(&seq_in, &seq_out, &label, &base.display().to_string())
        }
    }
}

/// Whether an index is being produced for training (unknown symbols are a
/// bug) or for evaluation (unknown symbols are expected).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Eval,
}

/// An ordered, bijective string table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn from_items(items: Vec<String>) -> Result<Self, String> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, s) in items.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(format!("duplicate entry {s:?}"));
            }
        }
        Ok(Self { items, index })
    }

    fn intern(&mut self, s: &str) {
        if !self.index.contains_key(s) {
            self.index.insert(s.to_string(), self.items.len());
            self.items.push(s.to_string());
        }
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Token, slot-tag and intent tables built from the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub tokens: Table,
    pub slots: Table,
    pub intents: Table,
    pub lowercase: bool,
}

impl Vocab {
    /// Token table is `PAD`, `UNK`, then training tokens in first-occurrence
    /// order; slot and intent tables list labels in first-occurrence order.
    pub fn build(train: &[Utterance], lowercase: bool) -> Result<Self, DatasetError> {
        if train.is_empty() {
            return Err(DatasetError::Usage(
                "cannot build a vocabulary from no utterances".into(),
            ));
        }
        let mut tokens = Table::default();
        tokens.intern(PAD);
        tokens.intern(UNK);
        let mut slots = Table::default();
        let mut intents = Table::default();
        for u in train {
            for t in &u.tokens {
                tokens.intern(&normalize(t, lowercase));
            }
            for s in &u.slot_tags {
                slots.intern(s);
            }
            intents.intern(&u.intent);
        }
        Ok(Self {
            tokens,
            slots,
            intents,
            lowercase,
        })
    }

    pub fn from_tables(tokens: Table, slots: Table, intents: Table, lowercase: bool) -> Result<Self, DatasetError> {
        if tokens.name(PAD_ID) != Some(PAD) || tokens.name(UNK_ID) != Some(UNK) {
            return Err(DatasetError::Usage("token table must start with <pad>, <unk>".into()));
        }
        Ok(Self {
            tokens,
            slots,
            intents,
            lowercase,
        })
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.tokens.get(&normalize(token, self.lowercase))
    }

    pub fn encode(&self, utt: &Utterance, mode: EncodeMode) -> Result<IndexedUtterance, DatasetError> {
        let miss =
            |what: &str, s: &str| DatasetError::Internal(format!("{what} {s:?} missing from the training vocabulary"));
        let token_ids = utt
            .tokens
            .iter()
            .map(|t| match (self.token_id(t), mode) {
                (Some(id), _) => Ok(id),
                (None, EncodeMode::Eval) => Ok(UNK_ID),
                (None, EncodeMode::Train) => Err(miss("token", t)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let slot_tag_ids = utt
            .slot_tags
            .iter()
            .map(|s| match (self.slots.get(s), mode) {
                (Some(id), _) => Ok(id),
                (None, EncodeMode::Eval) => Ok(UNSEEN_ID),
                (None, EncodeMode::Train) => Err(miss("slot tag", s)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let intent_id = match (self.intents.get(&utt.intent), mode) {
            (Some(id), _) => id,
            (None, EncodeMode::Eval) => UNSEEN_ID,
            (None, EncodeMode::Train) => return Err(miss("intent", &utt.intent)),
        };
        Ok(IndexedUtterance {
            token_ids,
            slot_tag_ids,
            intent_id,
        })
    }

    /// Token ids for raw input text, unknown words mapping to `UNK`.
    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t).unwrap_or(UNK_ID)).collect()
    }

    /// Inverse of `encode` for labels; unseen ids render as `None`.
    pub fn decode(&self, idx: &IndexedUtterance) -> (Vec<Option<&str>>, Vec<Option<&str>>, Option<&str>) {
        (
            idx.token_ids.iter().map(|&i| self.tokens.name(i)).collect(),
            idx.slot_tag_ids.iter().map(|&i| self.slots.name(i)).collect(),
            self.intents.name(idx.intent_id),
        )
    }
}

fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedUtterance {
    pub token_ids: Vec<usize>,
    pub slot_tag_ids: Vec<usize>,
    pub intent_id: usize,
}

impl IndexedUtterance {
    /// True if any gold label was unseen in training.
    pub fn has_unseen_labels(&self) -> bool {
        self.intent_id == UNSEEN_ID || self.slot_tag_ids.contains(&UNSEEN_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1: &str = "play O\ntechno B-genre\non O\nlastfm B-service\nPlayMusic\n";

    #[test]
    fn parses_the_running_example() {
        let utts = parse_records(TABLE1, "mem").unwrap();
        assert_eq!(utts.len(), 1);
        let u = &utts[0];
        assert_eq!(u.len(), 4);
        assert_eq!(u.tokens, ["play", "techno", "on", "lastfm"]);
        assert_eq!(u.slot_tags, ["O", "B-genre", "O", "B-service"]);
        assert_eq!(u.intent, "PlayMusic");
    }

    #[test]
    fn blank_lines_separate_records() {
        let text = format!("{TABLE1}\n{TABLE1}\n\n");
        assert_eq!(parse_records(&text, "mem").unwrap().len(), 2);
    }

    #[test]
    fn missing_tag_is_a_parse_error_naming_the_record() {
        let text = format!("{TABLE1}\nplay O\ntechno\nPlayMusic\n");
        match parse_records(&text, "mem").unwrap_err() {
            DatasetError::Parse { record, line, .. } => {
                assert_eq!(record, 1);
                assert_eq!(line, 8);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn record_without_tokens_is_rejected() {
        let err = parse_records("PlayMusic\n", "mem").unwrap_err();
        assert!(err.to_string().contains("empty record"), "{err}");
    }

    #[test]
    fn malformed_tags_are_rejected() {
        for bad in ["B-", "X-genre", "I"] {
            let text = format!("play {bad}\nPlayMusic\n");
            assert!(parse_records(&text, "mem").is_err(), "{bad}");
        }
    }

    #[test]
    fn seq_files_short_tag_line_names_record() {
        let err = parse_seq_files("a b\nc d e\n", "O O\nO O\n", "x\ny\n", "mem").unwrap_err();
        match err {
            DatasetError::Parse { record, .. } => assert_eq!(record, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn format_then_parse_is_identity() {
        let utts = parse_records(&format!("{TABLE1}\n{TABLE1}"), "mem").unwrap();
        assert_eq!(parse_records(&format_records(&utts), "mem").unwrap(), utts);
    }

    #[test]
    fn vocab_dedups_and_reserves_pad_unk() {
        let u = parse_records(TABLE1, "mem").unwrap();
        let twice = [u[0].clone(), u[0].clone()];
        let a = Vocab::build(&u, true).unwrap();
        let b = Vocab::build(&twice, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.name(PAD_ID), Some(PAD));
        assert_eq!(a.tokens.name(UNK_ID), Some(UNK));
        assert_eq!(a.tokens.len(), 6);
        assert_eq!(a.slots.items(), ["O", "B-genre", "B-service"]);
        assert!(Vocab::build(&[], true).is_err());
    }

    #[test]
    fn eval_mode_maps_unknowns() {
        let u = parse_records(TABLE1, "mem").unwrap();
        let v = Vocab::build(&u, true).unwrap();
        let other = Utterance::new(
            vec!["Play".into(), "jazz".into()],
            vec!["O".into(), "B-style".into()],
            "Other".into(),
        )
        .unwrap();
        let idx = v.encode(&other, EncodeMode::Eval).unwrap();
        assert_eq!(idx.token_ids, vec![2, UNK_ID]);
        assert_eq!(idx.slot_tag_ids, vec![0, UNSEEN_ID]);
        assert_eq!(idx.intent_id, UNSEEN_ID);
        assert!(idx.has_unseen_labels());
        assert!(matches!(
            v.encode(&other, EncodeMode::Train),
            Err(DatasetError::Internal(_))
        ));
    }

    #[test]
    fn case_folding_can_be_disabled() {
        let u = parse_records(TABLE1, "mem").unwrap();
        let v = Vocab::build(&u, false).unwrap();
        assert_eq!(v.token_id("Play"), None);
        assert_eq!(v.token_id("play"), Some(2));
    }
}
