//! Fixed attribute embeddings derived from the training data.
//!
//! Each attribute vector is `concat(name, value)`: the embedding of the
//! attribute's phrase and the mean embedding of its labeled values. The
//! static-vector route is computed here; contextualized vectors are
//! produced externally and pooled on ingest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{span_text, tokenize, AttributeVocab, LabeledExample};
use crate::encoder::StaticVectors;
use crate::error::{Error, Result};
use crate::io::{read_jsonl_lenient, write_jsonl};
use crate::tagging::tags_to_spans;

/// One labeled value occurrence used for pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeInstance {
    pub phrase: String,
    pub value: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Uncontextualized,
    Contextualized,
    Random,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Uncontextualized => "uncontextualized",
            Provenance::Contextualized => "contextualized",
            Provenance::Random => "random",
        })
    }
}

/// One instance per labeled value span in each example of `attribute`.
pub fn collect_instances(
    examples: &[LabeledExample],
    vocab: &AttributeVocab,
    attribute: &str,
) -> Result<Vec<AttributeInstance>> {
    let phrase = vocab
        .phrase(attribute)
        .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?;
    let mut out = Vec::new();
    for ex in examples.iter().filter(|e| e.attribute == attribute) {
        let tokens: Vec<String> = ex.tokens.iter().map(|t| t.text.clone()).collect();
        for span in tags_to_spans(&ex.tags) {
            out.push(AttributeInstance {
                phrase: phrase.to_string(),
                value: span_text(&ex.tokens, span),
                tokens: tokens.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean static vector of the phrase's tokens; unknown tokens are skipped and
/// an all-unknown phrase gives the zero vector.
pub fn static_phrase_embedding(phrase: &str, vectors: &StaticVectors) -> Vec<f64> {
    let mut sum = vec![0.0; vectors.dim()];
    let mut found = 0usize;
    for tok in tokenize(phrase) {
        if let Some(v) = vectors.lookup(&tok.text) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            found += 1;
        }
    }
    if found > 0 {
        sum.iter_mut().for_each(|s| *s /= found as f64);
    }
    sum
}

/// Elementwise mean, summed in a canonical order so the result does not
/// depend on the order of `rows`.
fn pooled_mean(mut rows: Vec<&[f64]>, dim: usize) -> Vec<f64> {
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut sum = vec![0.0; dim];
    for r in &rows {
        sum.iter_mut().zip(r.iter()).for_each(|(s, x)| *s += x);
    }
    if !rows.is_empty() {
        sum.iter_mut().for_each(|s| *s /= rows.len() as f64);
    }
    sum
}

/// `concat(name, mean value)` from static vectors; `2 * dim` long. With no
/// instances the value half is zero.
pub fn uncontextualized_embedding(
    phrase: &str,
    instances: &[AttributeInstance],
    vectors: &StaticVectors,
) -> Vec<f64> {
    let dim = vectors.dim();
    let mut out = static_phrase_embedding(phrase, vectors);
    let values: Vec<Vec<f64>> = instances
        .iter()
        .map(|i| static_phrase_embedding(&i.value, vectors))
        .collect();
    out.extend(pooled_mean(values.iter().map(Vec::as_slice).collect(), dim));
    out
}

/// Attribute id to vector map of uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeEmbeddingTable {
    d_r: usize,
    provenance: Provenance,
    frozen: bool,
    entries: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableRow {
    attribute: String,
    vec: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl AttributeEmbeddingTable {
    pub fn new(
        provenance: Provenance,
        frozen: bool,
        entries: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let d_r = entries
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Data("attribute embedding table is empty".into()))?;
        if d_r == 0 {
            return Err(Error::Data(
                "attribute embeddings must have d_r >= 1".into(),
            ));
        }
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.len() != d_r) {
            return Err(Error::Data(format!(
                "attribute `{id}` has dimension {}, expected {d_r}",
                v.len()
            )));
        }
        Ok(AttributeEmbeddingTable {
            d_r,
            provenance,
            frozen,
            entries,
        })
    }

    pub fn d_r(&self) -> usize {
        self.d_r
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, attribute: &str) -> Option<&[f64]> {
        self.entries.get(attribute).map(Vec::as_slice)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rows in vocabulary order as an `[N, d_r]` matrix.
    pub fn to_tensor(&self, vocab: &AttributeVocab) -> Result<Tensor> {
        let mut data = Vec::with_capacity(vocab.len() * self.d_r);
        for id in vocab.ids() {
            let row = self
                .get(id)
                .ok_or_else(|| Error::UnknownAttribute(id.clone()))?;
            data.extend_from_slice(row);
        }
        Tensor::matrix(vocab.len(), self.d_r, data)
    }

    /// Writes JSONL rows `{"attribute", "vec", "provenance"}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<TableRow> = self
            .entries
            .iter()
            .map(|(a, v)| TableRow {
                attribute: a.clone(),
                vec: v.clone(),
                provenance: Some(self.provenance),
            })
            .collect();
        write_jsonl(path, &rows)
    }

    /// Reads a pooled table. Rows without a provenance field are taken as
    /// contextualized (the usual source of pre-pooled files). The table is
    /// frozen unless it is random.
    pub fn load(path: &Path) -> Result<Self> {
        let (rows, errors) = read_jsonl_lenient::<TableRow>(path)?;
        if let Some(e) = errors.first() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: e.line,
                message: e.message.clone(),
            });
        }
        let mut provenance = None;
        let mut entries = BTreeMap::new();
        for row in rows {
            let p = row.provenance.unwrap_or(Provenance::Contextualized);
            match provenance {
                None => provenance = Some(p),
                Some(q) if q != p => {
                    return Err(Error::Data(format!(
                        "{}: mixes {q} and {p} embeddings",
                        path.display()
                    )))
                }
                _ => {}
            }
            if entries.insert(row.attribute.clone(), row.vec).is_some() {
                return Err(Error::Data(format!(
                    "{}: attribute `{}` listed twice",
                    path.display(),
                    row.attribute
                )));
            }
        }
        let provenance = provenance.unwrap_or(Provenance::Contextualized);
        Self::new(provenance, provenance != Provenance::Random, entries)
    }
}

/// Static-vector embeddings for every attribute in `vocab`, frozen. Returns
/// the table and the attributes that had no labeled values (name-only).
pub fn build_uncontextualized(
    examples: &[LabeledExample],
    vocab: &AttributeVocab,
    vectors: &StaticVectors,
) -> Result<(AttributeEmbeddingTable, Vec<String>)> {
    let mut entries = BTreeMap::new();
    let mut flagged = Vec::new();
    for id in vocab.ids() {
        let instances = collect_instances(examples, vocab, id)?;
        if instances.is_empty() {
            log::warn!("attribute `{id}` has no labeled values; using its name only");
            flagged.push(id.clone());
        }
        let phrase = vocab.phrase(id).expect("id from vocab");
        entries.insert(
            id.clone(),
            uncontextualized_embedding(phrase, &instances, vectors),
        );
    }
    Ok((
        AttributeEmbeddingTable::new(Provenance::Uncontextualized, true, entries)?,
        flagged,
    ))
}

/// One externally produced contextualized instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualizedRow {
    pub attribute: String,
    pub name_vec: Vec<f64>,
    pub value_vec: Vec<f64>,
}

/// Pools rows per attribute into `concat(mean name, mean value)`.
/// `rows` pairs each instance with its 1-based line number for error messages.
pub fn pool_contextualized(rows: &[(usize, ContextualizedRow)]) -> Result<AttributeEmbeddingTable> {
    let dim = rows
        .first()
        .map(|(_, r)| r.name_vec.len())
        .ok_or_else(|| Error::Data("no contextualized instances".into()))?;
    let mut grouped: BTreeMap<&str, Vec<&ContextualizedRow>> = BTreeMap::new();
    for (line, row) in rows {
        if row.name_vec.len() != dim || row.value_vec.len() != dim || dim == 0 {
            return Err(Error::Data(format!(
                "row {line} (attribute `{}`): name_vec has {} values and value_vec has {}, expected {dim}",
                row.attribute,
                row.name_vec.len(),
                row.value_vec.len()
            )));
        }
        grouped.entry(row.attribute.as_str()).or_default().push(row);
    }
    let entries = grouped
        .into_iter()
        .map(|(id, group)| {
            let mut v = pooled_mean(group.iter().map(|r| r.name_vec.as_slice()).collect(), dim);
            v.extend(pooled_mean(
                group.iter().map(|r| r.value_vec.as_slice()).collect(),
                dim,
            ));
            (id.to_string(), v)
        })
        .collect();
    AttributeEmbeddingTable::new(Provenance::Contextualized, true, entries)
}

/// Reads and pools a contextualized instance file.
pub fn ingest_contextualized(path: &Path) -> Result<AttributeEmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ContextualizedRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    pool_contextualized(&rows)
}

/// Trainable table with entries drawn iid from uniform(-0.1, 0.1).
pub fn random_table(
    vocab: &AttributeVocab,
    d_r: usize,
    seed: u64,
) -> Result<AttributeEmbeddingTable> {
    if d_r == 0 {
        return Err(Error::Config("d_r must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = vocab
        .ids()
        .iter()
        .map(|id| {
            (
                id.clone(),
                Tensor::uniform(&[d_r], 0.1, &mut rng).into_data(),
            )
        })
        .collect();
    AttributeEmbeddingTable::new(Provenance::Random, false, entries)
}
