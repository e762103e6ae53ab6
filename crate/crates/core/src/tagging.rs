//! BIOE tag vocabulary and span conversions.
//!
//! The label order `[B, I, O, E]` is fixed: it is the row/column order of
//! every 4-label emission and transition matrix in the crate. Index
//! sequences are 0-based (`B = 0`, `I = 1`, `O = 2`, `E = 3`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    B,
    I,
    O,
    E,
}

impl Tag {
    pub const VOCAB: [Tag; 4] = [Tag::B, Tag::I, Tag::O, Tag::E];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Tag::B => 0,
            Tag::I => 1,
            Tag::O => 2,
            Tag::E => 3,
        }
    }

    pub fn from_index(index: usize) -> Result<Tag> {
        Tag::VOCAB
            .get(index)
            .copied()
            .ok_or(Error::TagIndex { index, labels: 4 })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::O => "O",
            Tag::E => "E",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Tag::B),
            "I" => Ok(Tag::I),
            "O" => Ok(Tag::O),
            "E" => Ok(Tag::E),
            other => Err(Error::Data(format!("unknown tag `{other}`"))),
        }
    }
}

/// A BIOE tag sequence aligned with a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSeq(Vec<Tag>);

impl TagSeq {
    pub fn new(tags: Vec<Tag>) -> Self {
        Self(tags)
    }

    pub fn all_outside(n: usize) -> Self {
        Self(vec![Tag::O; n])
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        indices
            .iter()
            .map(|&i| Tag::from_index(i))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    /// Parses whitespace-separated tags, e.g. `"B O B E"`.
    pub fn parse(s: &str) -> Result<Self> {
        s.split_whitespace()
            .map(Tag::from_str)
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn tags(&self) -> &[Tag] {
        &self.0
    }

    /// The index sequence `Z`.
    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TagSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Inclusive token span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Encodes non-overlapping spans: a single token becomes `B`, longer spans
/// `B I* E`; everything else is `O`.
pub fn spans_to_tags(spans: &[Span], n: usize) -> Result<TagSeq> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start > s.end || s.end >= n {
            return Err(Error::InvalidSpans(format!(
                "span ({}, {}) outside a sequence of length {n}",
                s.start, s.end
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(Error::InvalidSpans(format!(
                "spans ({}, {}) and ({}, {}) overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let mut tags = vec![Tag::O; n];
    for s in sorted {
        tags[s.start] = Tag::B;
        if s.end > s.start {
            for t in &mut tags[s.start + 1..s.end] {
                *t = Tag::I;
            }
            tags[s.end] = Tag::E;
        }
    }
    Ok(TagSeq(tags))
}

/// Lenient decoding of a possibly invalid sequence.
///
/// A span opens at each `B` and extends through following `I`s; an `E`
/// closes it inclusively. A span still open when `O`, `B` or the end of the
/// sequence arrives closes at the previous token. `I`/`E` with nothing open
/// are ignored.
pub fn tags_to_spans(tags: &TagSeq) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.0.iter().enumerate() {
        match t {
            Tag::B => {
                if let Some(s) = open {
                    spans.push(Span::new(s, i - 1));
                }
                open = Some(i);
            }
            Tag::I => {}
            Tag::E => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
            }
            Tag::O => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(Span::new(s, tags.len() - 1));
    }
    spans
}

/// True iff every `I`/`E` continues a `B`/`I`, and no span ends on an `I`.
pub fn is_valid(tags: &TagSeq) -> bool {
    let mut prev: Option<Tag> = None;
    for &t in &tags.0 {
        let continues = matches!(prev, Some(Tag::B) | Some(Tag::I));
        if matches!(t, Tag::I | Tag::E) && !continues {
            return false;
        }
        if prev == Some(Tag::I) && !matches!(t, Tag::I | Tag::E) {
            return false;
        }
        prev = Some(t);
    }
    prev != Some(Tag::I)
}

/// One `B/I/E` triple per attribute plus a shared `O`: `3N + 1` labels.
///
/// Label `3a + 0/1/2` is `B/I/E` of attribute `a`; the last label is `O`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedTagSet {
    attributes: Vec<String>,
}

impl ExpandedTagSet {
    pub fn new(attributes: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config(
                "expanded tag set needs at least one attribute".into(),
            ));
        }
        Ok(Self { attributes })
    }

    pub fn num_labels(&self) -> usize {
        3 * self.attributes.len() + 1
    }

    pub fn outside(&self) -> usize {
        3 * self.attributes.len()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.num_labels()).map(|i| self.label(i)).collect()
    }

    pub fn label(&self, index: usize) -> String {
        if index == self.outside() {
            return "O".to_string();
        }
        let tag = ["B", "I", "E"][index % 3];
        format!("{tag}-{}", self.attributes[index / 3])
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        if label == "O" {
            return Ok(self.outside());
        }
        let (tag, attr) = label
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("malformed expanded tag `{label}`")))?;
        let a = self
            .attributes
            .iter()
            .position(|x| x == attr)
            .ok_or_else(|| Error::UnknownAttribute(attr.to_string()))?;
        let offset = match tag {
            "B" => 0,
            "I" => 1,
            "E" => 2,
            _ => return Err(Error::Data(format!("malformed expanded tag `{label}`"))),
        };
        Ok(3 * a + offset)
    }

    pub fn parse(&self, s: &str) -> Result<Vec<usize>> {
        s.split_whitespace().map(|l| self.index_of(l)).collect()
    }

    /// Merges per-attribute sequences of equal length into one expanded
    /// sequence. Spans are taken in the given order; a span overlapping an
    /// already placed one is dropped and counted.
    pub fn merge(
        &self,
        n: usize,
        per_attribute: &[(usize, &TagSeq)],
    ) -> Result<(Vec<usize>, usize)> {
        let mut out = vec![self.outside(); n];
        let mut placed: Vec<Span> = Vec::new();
        let mut dropped = 0;
        for &(a, seq) in per_attribute {
            if a >= self.attributes.len() {
                return Err(Error::UnknownAttribute(format!("#{a}")));
            }
            if seq.len() != n {
                return Err(Error::shape("merge", &[n], &[seq.len()]));
            }
            for span in tags_to_spans(seq) {
                if placed.iter().any(|p| p.overlaps(&span)) {
                    dropped += 1;
                    continue;
                }
                out[span.start] = 3 * a;
                if span.end > span.start {
                    for slot in &mut out[span.start + 1..span.end] {
                        *slot = 3 * a + 1;
                    }
                    out[span.end] = 3 * a + 2;
                }
                placed.push(span);
            }
        }
        Ok((out, dropped))
    }

    /// Projects an expanded sequence onto the BIOE sequence of one attribute.
    pub fn project(&self, labels: &[usize], attribute: usize) -> TagSeq {
        TagSeq(
            labels
                .iter()
                .map(|&l| {
                    if l != self.outside() && l / 3 == attribute {
                        [Tag::B, Tag::I, Tag::E][l % 3]
                    } else {
                        Tag::O
                    }
                })
                .collect(),
        )
    }

    /// Decodes every attribute's spans from an expanded sequence.
    pub fn decode(&self, labels: &[usize]) -> Vec<(String, Span)> {
        let mut out = Vec::new();
        for (a, name) in self.attributes.iter().enumerate() {
            for span in tags_to_spans(&self.project(labels, a)) {
                out.push((name.clone(), span));
            }
        }
        out.sort_by_key(|(_, s)| *s);
        out
    }
}
