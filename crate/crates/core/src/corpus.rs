//! Product ingestion, tokenization and distant-supervision labeling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Mode;
use crate::io::{read_json, read_jsonl_lenient, LineError};
use crate::tagging::{spans_to_tags, tags_to_spans, Span, TagSeq};

/// One product profile, as read from the dataset JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub bullets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(rename = "attributes", default)]
    pub gold_values: BTreeMap<String, BTreeSet<String>>,
}

/// A token with character (not byte) offsets into its source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceField {
    Title,
    TitlePlusBullets,
}

impl std::str::FromStr for SourceField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" => Ok(SourceField::Title),
            "title_plus_bullets" | "title+bullets" => Ok(SourceField::TitlePlusBullets),
            other => Err(Error::Config(format!(
                "unknown setting `{other}` (expected title or title_plus_bullets)"
            ))),
        }
    }
}

/// A `(text, attribute, tags)` training or evaluation triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub attribute: String,
    pub source_field: SourceField,
    pub text: String,
    pub tokens: Vec<Token>,
    pub tags: TagSeq,
}

impl LabeledExample {
    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Value strings of the tagged spans (tokens joined by single spaces).
    pub fn values(&self) -> BTreeSet<String> {
        tags_to_spans(&self.tags)
            .into_iter()
            .map(|s| span_text(&self.tokens, s))
            .collect()
    }
}

pub fn span_text(tokens: &[Token], span: Span) -> String {
    tokens[span.start..=span.end]
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
}

/// Ordered attribute vocabulary with display phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocab {
    ids: Vec<String>,
    phrases: Vec<String>,
}

impl AttributeVocab {
    pub fn new(entries: Vec<AttributeEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut phrases = Vec::with_capacity(entries.len());
        for e in entries {
            if e.id.is_empty() {
                return Err(Error::Data("attribute id must be non-empty".into()));
            }
            if !seen.insert(e.id.clone()) {
                return Err(Error::Data(format!("duplicate attribute id `{}`", e.id)));
            }
            let phrase = e.phrase.unwrap_or_else(|| attribute_phrase(&e.id));
            if phrase.trim().is_empty() {
                return Err(Error::Data(format!(
                    "attribute `{}` has an empty phrase",
                    e.id
                )));
            }
            ids.push(e.id);
            phrases.push(phrase);
        }
        Ok(Self { ids, phrases })
    }

    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        Self::new(
            ids.iter()
                .map(|id| AttributeEntry {
                    id: id.as_ref().to_string(),
                    phrase: None,
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_json(path)?)
    }

    pub fn entries(&self) -> Vec<AttributeEntry> {
        self.ids
            .iter()
            .zip(&self.phrases)
            .map(|(id, p)| AttributeEntry {
                id: id.clone(),
                phrase: Some(p.clone()),
            })
            .collect()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn phrase(&self, id: &str) -> Option<&str> {
        self.index_of(id).map(|i| self.phrases[i].as_str())
    }

    /// Keeps only the listed attributes, in vocabulary order.
    pub fn restrict(&self, keep: &[String]) -> Result<Self> {
        for k in keep {
            if self.index_of(k).is_none() {
                return Err(Error::UnknownAttribute(k.clone()));
            }
        }
        let entries = self
            .entries()
            .into_iter()
            .filter(|e| keep.contains(&e.id))
            .collect();
        Self::new(entries)
    }
}

/// Phrase form of an attribute id: camel-case boundaries become spaces.
pub fn attribute_phrase(id: &str) -> String {
    let chars: Vec<char> = id.chars().collect();
    let mut out = String::with_capacity(id.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if i > 0 && c.is_uppercase() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            let boundary =
                prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower);
            if boundary && prev != ' ' {
                out.push(' ');
            }
        }
        out.push(c);
    }
    out
}

/// Splits on whitespace and detaches leading/trailing ASCII punctuation,
/// one token per punctuation character.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        push_chunk(&chars, start, i, &mut tokens);
    }
    tokens
}

fn push_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let single = |pos: usize| Token {
        text: chars[pos].to_string(),
        char_start: pos,
        char_end: pos + 1,
    };
    let lead = chars[start..end]
        .iter()
        .take_while(|c| c.is_ascii_punctuation())
        .count();
    if lead == end - start {
        out.extend((start..end).map(single));
        return;
    }
    let trail = chars[start..end]
        .iter()
        .rev()
        .take_while(|c| c.is_ascii_punctuation())
        .count();
    out.extend((start..start + lead).map(single));
    let (core_start, core_end) = (start + lead, end - trail);
    out.push(Token {
        text: chars[core_start..core_end].iter().collect(),
        char_start: core_start,
        char_end: core_end,
    });
    out.extend((core_end..end).map(single));
}

/// Substring of `text` by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

/// Result of labeling one token sequence with a set of values.
#[derive(Debug, Clone, PartialEq)]
pub struct DistantLabels {
    pub tags: TagSeq,
    pub matched: BTreeSet<String>,
    pub unmatched: BTreeSet<String>,
}

/// Marks occurrences of `values` in `tokens`. Matching is case-insensitive
/// and token-aligned; longer matches win, then earlier ones, and a match may
/// not overlap one already accepted.
pub fn distant_label_detailed<S: AsRef<str>>(tokens: &[Token], values: &[S]) -> DistantLabels {
    let lowered: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    // (length, start, value)
    let mut candidates: Vec<(usize, usize, &str)> = Vec::new();
    for v in values {
        let v = v.as_ref();
        let pattern: Vec<String> = tokenize(v)
            .into_iter()
            .map(|t| t.text.to_lowercase())
            .collect();
        if pattern.is_empty() || pattern.len() > lowered.len() {
            continue;
        }
        for s in 0..=lowered.len() - pattern.len() {
            if lowered[s..s + pattern.len()] == pattern[..] {
                candidates.push((pattern.len(), s, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut accepted: Vec<Span> = Vec::new();
    let mut matched = BTreeSet::new();
    for (len, start, v) in candidates {
        let span = Span::new(start, start + len - 1);
        if accepted.iter().any(|a| a.overlaps(&span)) {
            continue;
        }
        accepted.push(span);
        matched.insert(v.to_string());
    }
    let unmatched = values
        .iter()
        .map(|v| v.as_ref().to_string())
        .filter(|v| !matched.contains(v))
        .collect();
    let tags =
        spans_to_tags(&accepted, tokens.len()).expect("accepted spans are disjoint and in range");
    DistantLabels {
        tags,
        matched,
        unmatched,
    }
}

pub fn distant_label<S: AsRef<str>>(tokens: &[Token], values: &[S]) -> TagSeq {
    distant_label_detailed(tokens, values).tags
}

/// Text a product contributes under a setting. Fields are joined with a
/// standalone `.` token.
pub fn source_text(product: &Product, setting: SourceField) -> String {
    match setting {
        SourceField::Title => product.title.clone(),
        SourceField::TitlePlusBullets => {
            let mut parts = vec![product.title.as_str()];
            parts.extend(product.bullets.iter().map(String::as_str));
            parts.join(" . ")
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeCoverage {
    /// `(product, attribute)` pairs carrying at least one gold value.
    pub pairs: usize,
    pub examples: usize,
    /// Pairs dropped because no value occurred in the text.
    pub dropped_pairs: usize,
    pub unmatched_values: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub products: usize,
    pub pairs: usize,
    pub examples: usize,
    pub negatives: usize,
    pub dropped_pairs: usize,
    pub unmatched_values: usize,
    pub per_attribute: BTreeMap<String, AttributeCoverage>,
    pub unknown_attributes: BTreeMap<String, usize>,
    pub duplicate_ids: Vec<String>,
    pub malformed_lines: Vec<LineError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusOptions {
    /// Also emit all-`O` examples for pairs whose values never matched, and
    /// for vocabulary attributes the product has no values for.
    pub include_negatives: bool,
    pub mode: Option<Mode>,
}

struct ProductOutcome {
    examples: Vec<LabeledExample>,
    per_attribute: Vec<(String, AttributeCoverage)>,
    negatives: usize,
    unknown: Vec<String>,
}

fn label_product(
    product: &Product,
    vocab: &AttributeVocab,
    setting: SourceField,
    negatives: bool,
) -> ProductOutcome {
    let text = source_text(product, setting);
    let tokens = tokenize(&text);
    let mut out = ProductOutcome {
        examples: Vec::new(),
        per_attribute: Vec::new(),
        negatives: 0,
        unknown: product
            .gold_values
            .keys()
            .filter(|k| vocab.index_of(k).is_none())
            .cloned()
            .collect(),
    };
    for attr in vocab.ids() {
        let values: Vec<&String> = product
            .gold_values
            .get(attr)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        let mut cov = AttributeCoverage::default();
        let labels = distant_label_detailed(&tokens, &values);
        let has_values = !values.is_empty();
        if has_values {
            cov.pairs = 1;
            cov.unmatched_values = labels.unmatched.len();
        }
        let emit = if !labels.matched.is_empty() {
            cov.examples = 1;
            true
        } else {
            if has_values {
                cov.dropped_pairs = 1;
            }
            negatives && !tokens.is_empty()
        };
        if emit {
            if labels.matched.is_empty() {
                out.negatives += 1;
            }
            out.examples.push(LabeledExample {
                id: product.id.clone(),
                attribute: attr.clone(),
                source_field: setting,
                text: text.clone(),
                tokens: tokens.clone(),
                tags: labels.tags,
            });
        }
        if has_values || emit {
            out.per_attribute.push((attr.clone(), cov));
        }
    }
    out
}

/// Labels every `(product, attribute)` pair and returns the examples sorted
/// by `(product id, attribute id)` with a coverage report.
pub fn build_corpus(
    products: &[Product],
    vocab: &AttributeVocab,
    setting: SourceField,
    options: CorpusOptions,
) -> (Vec<LabeledExample>, CoverageReport) {
    let mut report = CoverageReport::default();
    let mut seen = HashSet::new();
    let unique: Vec<&Product> = products
        .iter()
        .filter(|p| {
            let fresh = seen.insert(p.id.clone());
            if !fresh {
                report.duplicate_ids.push(p.id.clone());
            }
            fresh
        })
        .collect();
    report.products = unique.len();

    let mode = options.mode.unwrap_or_default();
    let outcomes = mode.map(&unique, |p| {
        label_product(p, vocab, setting, options.include_negatives)
    });

    let mut examples = Vec::new();
    for o in outcomes {
        for (attr, cov) in o.per_attribute {
            let entry = report.per_attribute.entry(attr).or_default();
            entry.pairs += cov.pairs;
            entry.examples += cov.examples;
            entry.dropped_pairs += cov.dropped_pairs;
            entry.unmatched_values += cov.unmatched_values;
        }
        for u in o.unknown {
            *report.unknown_attributes.entry(u).or_default() += 1;
        }
        report.negatives += o.negatives;
        examples.extend(o.examples);
    }
    examples.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.attribute.cmp(&b.attribute)));
    report.examples = examples.len();
    for c in report.per_attribute.values() {
        report.pairs += c.pairs;
        report.dropped_pairs += c.dropped_pairs;
        report.unmatched_values += c.unmatched_values;
    }
    (examples, report)
}

/// Reads a products JSONL file; malformed lines are collected, not fatal.
pub fn read_products(path: &Path) -> Result<(Vec<Product>, Vec<LineError>)> {
    read_jsonl_lenient(path)
}

/// Product-id assignment to train/dev/test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub dev: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        let mut seen = HashSet::new();
        for id in m.train.iter().chain(&m.dev).chain(&m.test) {
            if !seen.insert(id) {
                return Err(Error::Data(format!(
                    "product `{id}` assigned to more than one split"
                )));
            }
        }
        Ok(m)
    }

    /// Seeded shuffle of product ids into train and dev by `dev_fraction`.
    pub fn random(product_ids: &[String], dev_fraction: f64, seed: u64) -> Self {
        let mut ids: Vec<String> = product_ids.to_vec();
        ids.sort();
        ids.dedup();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_dev = ((ids.len() as f64) * dev_fraction).round() as usize;
        let dev = ids.split_off(ids.len() - n_dev.min(ids.len()));
        let mut train = ids;
        let mut dev = dev;
        train.sort();
        dev.sort();
        Self {
            train,
            dev,
            test: Vec::new(),
        }
    }

    /// Partitions examples by product id; examples of unlisted products are dropped.
    pub fn apply(&self, examples: Vec<LabeledExample>) -> Splits {
        let train: HashSet<&String> = self.train.iter().collect();
        let dev: HashSet<&String> = self.dev.iter().collect();
        let test: HashSet<&String> = self.test.iter().collect();
        let mut out = Splits::default();
        for ex in examples {
            if train.contains(&ex.id) {
                out.train.push(ex);
            } else if dev.contains(&ex.id) {
                out.dev.push(ex);
            } else if test.contains(&ex.id) {
                out.test.push(ex);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_detaches_punctuation_with_offsets() {
        let toks = tokenize("Dry, Sensitive skin");
        assert_eq!(texts(&toks), ["Dry", ",", "Sensitive", "skin"]);
        let offsets: Vec<(usize, usize)> =
            toks.iter().map(|t| (t.char_start, t.char_end)).collect();
        assert_eq!(offsets, [(0, 3), (3, 4), (5, 14), (15, 19)]);
    }

    #[test]
    fn tokenize_edge_cases() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   ").is_empty());
        assert_eq!(
            texts(&tokenize("mango ice cream")),
            ["mango", "ice", "cream"]
        );
        assert_eq!(texts(&tokenize("(Dry)")), ["(", "Dry", ")"]);
        assert_eq!(texts(&tokenize("a / b")), ["a", "/", "b"]);
        assert_eq!(texts(&tokenize("...")), [".", ".", "."]);
        assert_eq!(texts(&tokenize("mango's")), ["mango's"]);
    }

    #[test]
    fn tokenize_offsets_are_characters() {
        let text = "crème brûlée, 2oz";
        for t in tokenize(text) {
            assert_eq!(char_slice(text, t.char_start, t.char_end), t.text);
        }
    }

    fn scent_tokens() -> Vec<Token> {
        tokenize("orchid / cherry pie / mango ice cream scent")
    }

    #[test]
    fn distant_label_scent_row() {
        let tags = distant_label(
            &scent_tokens(),
            &["orchid", "cherry pie", "mango ice cream"],
        );
        assert_eq!(tags, TagSeq::parse("B O B E O B I E O").unwrap());
    }

    #[test]
    fn distant_label_prefers_longest_match() {
        let labels = distant_label_detailed(&scent_tokens(), &["ice", "mango ice cream"]);
        assert_eq!(labels.tags, TagSeq::parse("O O O O O B I E O").unwrap());
        assert_eq!(labels.unmatched.into_iter().collect::<Vec<_>>(), ["ice"]);
    }

    #[test]
    fn distant_label_without_values_is_all_outside() {
        let tags = distant_label::<&str>(&scent_tokens(), &[]);
        assert_eq!(tags, TagSeq::all_outside(9));
    }

    #[test]
    fn distant_label_is_case_insensitive_and_token_aligned() {
        let toks = tokenize("ORCHID orchids Orchid");
        let tags = distant_label(&toks, &["orchid"]);
        assert_eq!(tags, TagSeq::parse("B O B").unwrap());
    }

    #[test]
    fn distant_label_equal_length_prefers_leftmost() {
        let toks = tokenize("a b c");
        let tags = distant_label(&toks, &["b c", "a b"]);
        assert_eq!(tags, TagSeq::parse("B E O").unwrap());
    }

    #[test]
    fn phrases_split_camel_case() {
        assert_eq!(attribute_phrase("SkinType"), "Skin Type");
        assert_eq!(attribute_phrase("Color"), "Color");
        assert_eq!(attribute_phrase("CaffeineContent"), "Caffeine Content");
        assert_eq!(attribute_phrase("Skin Type"), "Skin Type");
        assert_eq!(attribute_phrase("HTMLParser"), "HTML Parser");
    }

    #[test]
    fn vocab_rejects_duplicates_and_defaults_phrases() {
        let v = AttributeVocab::from_ids(&["SkinType", "Scent"]).unwrap();
        assert_eq!(v.phrase("SkinType"), Some("Skin Type"));
        assert!(AttributeVocab::from_ids(&["A", "A"]).is_err());
        let bad = AttributeVocab::new(vec![AttributeEntry {
            id: "A".into(),
            phrase: Some("  ".into()),
        }]);
        assert!(bad.is_err());
    }

    fn product(id: &str, title: &str, attrs: &[(&str, &[&str])]) -> Product {
        Product {
            id: id.into(),
            title: title.into(),
            bullets: vec![],
            description: None,
            gold_values: attrs
                .iter()
                .map(|(a, vs)| (a.to_string(), vs.iter().map(|v| v.to_string()).collect()))
                .collect(),
        }
    }

    #[test]
    fn build_corpus_emits_one_example_per_matched_pair() {
        let vocab = AttributeVocab::from_ids(&["Scent", "SkinType"]).unwrap();
        let p = product(
            "p1",
            "lavender body wash for dry skin",
            &[("Scent", &["lavender"]), ("SkinType", &["dry"])],
        );
        let (examples, report) =
            build_corpus(&[p], &vocab, SourceField::Title, CorpusOptions::default());
        assert_eq!(examples.len(), 2);
        assert_eq!(report.examples, 2);
        assert_eq!(report.dropped_pairs, 0);
    }

    #[test]
    fn build_corpus_drops_unmatched_pairs() {
        let vocab = AttributeVocab::from_ids(&["Scent"]).unwrap();
        let p = product("p1", "plain body wash", &[("Scent", &["lavender"])]);
        let (examples, report) = build_corpus(
            std::slice::from_ref(&p),
            &vocab,
            SourceField::Title,
            CorpusOptions::default(),
        );
        assert!(examples.is_empty());
        assert_eq!(report.dropped_pairs, 1);
        assert_eq!(report.per_attribute["Scent"].dropped_pairs, 1);

        let opts = CorpusOptions {
            include_negatives: true,
            mode: None,
        };
        let (examples, report) = build_corpus(&[p], &vocab, SourceField::Title, opts);
        assert_eq!(examples.len(), 1);
        assert_eq!(report.negatives, 1);
        assert_eq!(examples[0].tags, TagSeq::all_outside(3));
    }

    #[test]
    fn build_corpus_recovers_skin_type_values() {
        let vocab = AttributeVocab::from_ids(&["SkinType", "Color"]).unwrap();
        let p = product(
            "cream",
            "Hydrating Face Moisturizer for Dry, Sensitive Skin, Fragrance Free",
            &[("SkinType", &["Dry", "Sensitive"])],
        );
        let (examples, _) =
            build_corpus(&[p], &vocab, SourceField::Title, CorpusOptions::default());
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].attribute, "SkinType");
        let values: Vec<String> = examples[0].values().into_iter().collect();
        assert_eq!(values, ["Dry", "Sensitive"]);
    }

    #[test]
    fn title_plus_bullets_inserts_separator_token() {
        let vocab = AttributeVocab::from_ids(&["Scent"]).unwrap();
        let mut p = product(
            "p",
            "body wash mango",
            &[("Scent", &["mango ice", "vanilla"])],
        );
        p.bullets = vec!["ice cold feel".into(), "vanilla notes".into()];
        let (examples, _) = build_corpus(
            &[p],
            &vocab,
            SourceField::TitlePlusBullets,
            CorpusOptions::default(),
        );
        let ex = &examples[0];
        assert_eq!(
            ex.token_texts(),
            ["body", "wash", "mango", ".", "ice", "cold", "feel", ".", "vanilla", "notes"]
        );
        // "mango ice" would only match across the field boundary
        assert_eq!(ex.values().into_iter().collect::<Vec<_>>(), ["vanilla"]);
    }

    #[test]
    fn build_corpus_is_sorted_and_deterministic() {
        let vocab = AttributeVocab::from_ids(&["B", "A"]).unwrap();
        let ps = vec![
            product("z", "x y", &[("A", &["x"]), ("B", &["y"])]),
            product("a", "x y", &[("B", &["y"]), ("A", &["x"])]),
            product("a", "dup", &[]),
        ];
        let seq = CorpusOptions {
            include_negatives: false,
            mode: Some(Mode::Sequential),
        };
        let par = CorpusOptions {
            include_negatives: false,
            mode: Some(Mode::Parallel),
        };
        let (e1, r1) = build_corpus(&ps, &vocab, SourceField::Title, seq);
        let (e2, r2) = build_corpus(&ps, &vocab, SourceField::Title, par);
        assert_eq!(e1, e2);
        assert_eq!(r1, r2);
        let keys: Vec<(&str, &str)> = e1
            .iter()
            .map(|e| (e.id.as_str(), e.attribute.as_str()))
            .collect();
        assert_eq!(keys, [("a", "A"), ("a", "B"), ("z", "A"), ("z", "B")]);
        assert_eq!(r1.duplicate_ids, ["a"]);
    }

    #[test]
    fn random_split_is_seeded() {
        let ids: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let a = SplitManifest::random(&ids, 0.1, 3);
        let b = SplitManifest::random(&ids, 0.1, 3);
        assert_eq!(a, b);
        assert_eq!(a.dev.len(), 2);
        assert_eq!(a.train.len(), 18);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn token_offsets_round_trip(text in "[a-zA-Z0-9,./()!é ]{0,40}") {
            let toks = tokenize(&text);
            let mut last_end = 0;
            for t in &toks {
                prop_assert!(t.char_start < t.char_end);
                prop_assert!(t.char_start >= last_end);
                prop_assert_eq!(char_slice(&text, t.char_start, t.char_end), t.text.clone());
                last_end = t.char_end;
            }
            let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
            let squashed: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined, squashed);
        }

        #[test]
        fn distant_labels_decode_to_matched_values(
            words in prop::collection::vec("[a-c]{1,2}", 1..10),
            picks in prop::collection::vec((0usize..10, 1usize..4), 0..4),
        ) {
            let text = words.join(" ");
            let toks = tokenize(&text);
            let values: Vec<String> = picks
                .iter()
                .filter(|(s, _)| *s < words.len())
                .map(|&(s, l)| words[s..(s + l).min(words.len())].join(" ").to_uppercase())
                .collect();
            let labels = distant_label_detailed(&toks, &values);
            let spans = tags_to_spans(&labels.tags);
            let lowered: BTreeSet<String> = values.iter().map(|v| v.to_lowercase()).collect();
            for s in spans {
                prop_assert!(lowered.contains(&span_text(&toks, s).to_lowercase()));
            }
            prop_assert!(crate::tagging::is_valid(&labels.tags));
        }
    }
}
