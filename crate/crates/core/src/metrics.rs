//! Intent accuracy, exact-span slot F1 and sentence accuracy.

use std::collections::BTreeSet;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{0}")]
    Usage(String),
}

/// Labeled token range, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotSpan {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Extracts maximal `B-x I-x*` runs. An `I-x` that does not continue a span
/// of type `x` opens a new one.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> Vec<SlotSpan> {
    let mut spans = Vec::new();
    let mut open: Option<SlotSpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (begin, kind) = match tag.split_once('-') {
            Some(("B", k)) => (true, k),
            Some(("I", k)) => (false, k),
            _ => {
                spans.extend(open.take());
                continue;
            }
        };
        match &mut open {
            Some(s) if !begin && s.kind == kind => s.end = i,
            _ => {
                spans.extend(open.take());
                open = Some(SlotSpan {
                    kind: kind.to_string(),
                    start: i,
                    end: i,
                });
            }
        }
    }
    spans.extend(open);
    spans
}

/// Renders spans as a well-formed BIO sequence of length `len`.
pub fn spans_to_bio(spans: &[SlotSpan], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        tags[s.start] = format!("B-{}", s.kind);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = format!("I-{}", s.kind);
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl SpanCounts {
    /// `(precision, recall, f1)`, each 0 when its denominator is 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.matched, self.predicted);
        let r = ratio(self.matched, self.gold);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }
}

fn check_aligned<A, B>(golds: &[A], preds: &[B], what: &str) -> Result<(), MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::Usage(format!(
            "{what}: {} gold items but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    Ok(())
}

pub fn span_counts<S: AsRef<str>>(golds: &[Vec<S>], preds: &[Vec<S>]) -> Result<SpanCounts, MetricsError> {
    check_aligned(golds, preds, "slot tags")?;
    let mut c = SpanCounts::default();
    for (i, (g, p)) in golds.iter().zip(preds).enumerate() {
        if g.len() != p.len() {
            return Err(MetricsError::Usage(format!(
                "utterance {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs: BTreeSet<SlotSpan> = bio_to_spans(g).into_iter().collect();
        let ps: BTreeSet<SlotSpan> = bio_to_spans(p).into_iter().collect();
        c.gold += gs.len();
        c.predicted += ps.len();
        c.matched += gs.intersection(&ps).count();
    }
    Ok(c)
}

/// Micro-averaged exact-span `(precision, recall, f1)`.
pub fn slot_f1<S: AsRef<str>>(golds: &[Vec<S>], preds: &[Vec<S>]) -> Result<(f64, f64, f64), MetricsError> {
    Ok(span_counts(golds, preds)?.prf())
}

pub fn intent_accuracy<T: PartialEq>(golds: &[T], preds: &[T]) -> Result<f64, MetricsError> {
    check_aligned(golds, preds, "intents")?;
    if golds.is_empty() {
        return Err(MetricsError::Usage("intent accuracy of an empty set".into()));
    }
    let hits = golds.iter().zip(preds).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Fraction of utterances whose intent and every slot tag are correct.
pub fn sentence_accuracy<T: PartialEq, S: AsRef<str>>(
    gold_intents: &[T],
    pred_intents: &[T],
    gold_tags: &[Vec<S>],
    pred_tags: &[Vec<S>],
) -> Result<f64, MetricsError> {
    check_aligned(gold_intents, pred_intents, "intents")?;
    check_aligned(gold_intents, gold_tags, "gold intents vs gold tags")?;
    check_aligned(gold_tags, pred_tags, "slot tags")?;
    if gold_intents.is_empty() {
        return Err(MetricsError::Usage("sentence accuracy of an empty set".into()));
    }
    let mut hits = 0;
    for i in 0..gold_intents.len() {
        let (g, p) = (&gold_tags[i], &pred_tags[i]);
        if g.len() != p.len() {
            return Err(MetricsError::Usage(format!("utterance {i}: tag count mismatch")));
        }
        let tags_ok = g.iter().zip(p).all(|(a, b)| a.as_ref() == b.as_ref());
        if tags_ok && gold_intents[i] == pred_intents[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold_intents.len() as f64)
}

/// Labels of one utterance, gold or predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub intent: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub sentence_accuracy: f64,
    pub utterances: usize,
    pub spans: SpanCounts,
}

/// Keys of the machine-readable report, in output order.
pub const REPORT_KEYS: [&str; 5] = ["intent_acc", "slot_p", "slot_r", "slot_f1", "sentence_acc"];

impl EvalReport {
    pub fn compute(golds: &[Labels], preds: &[Labels]) -> Result<Self, MetricsError> {
        check_aligned(golds, preds, "utterances")?;
        let gi: Vec<&str> = golds.iter().map(|l| l.intent.as_str()).collect();
        let pi: Vec<&str> = preds.iter().map(|l| l.intent.as_str()).collect();
        let gt: Vec<Vec<&str>> = golds
            .iter()
            .map(|l| l.tags.iter().map(String::as_str).collect())
            .collect();
        let pt: Vec<Vec<&str>> = preds
            .iter()
            .map(|l| l.tags.iter().map(String::as_str).collect())
            .collect();
        let spans = span_counts(&gt, &pt)?;
        let (p, r, f) = spans.prf();
        Ok(Self {
            intent_accuracy: intent_accuracy(&gi, &pi)?,
            slot_precision: p,
            slot_recall: r,
            slot_f1: f,
            sentence_accuracy: sentence_accuracy(&gi, &pi, &gt, &pt)?,
            utterances: golds.len(),
            spans,
        })
    }

    fn values(&self) -> [f64; 5] {
        [
            self.intent_accuracy,
            self.slot_precision,
            self.slot_recall,
            self.slot_f1,
            self.sentence_accuracy,
        ]
    }

    /// `key=value` lines with 4 decimals.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k}={v:.4}");
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "utterances {}  intent acc {:.2}%  slot P/R/F1 {:.2}/{:.2}/{:.2}  sentence acc {:.2}%  \
             (spans: gold {}, predicted {}, matched {})",
            self.utterances,
            100.0 * self.intent_accuracy,
            100.0 * self.slot_precision,
            100.0 * self.slot_recall,
            100.0 * self.slot_f1,
            100.0 * self.sentence_accuracy,
            self.spans.gold,
            self.spans.predicted,
            self.spans.matched,
        )
    }
}

/// Parses `key=value` report text back into `(key, value)` pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, f64)>, MetricsError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| MetricsError::Usage(format!("malformed report line {l:?}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| MetricsError::Usage(format!("malformed value in {l:?}")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
