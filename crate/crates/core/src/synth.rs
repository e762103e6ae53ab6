//! Templated synthetic product corpora with controllable per-attribute counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribute_embeddings::{build_uncontextualized, AttributeEmbeddingTable};
use crate::corpus::{
    build_corpus, tokenize, AttributeEntry, AttributeVocab, CorpusOptions, Product, SourceField,
    SplitManifest, Splits,
};
use crate::encoder::{StaticVectors, WordVocab};
use crate::error::{Error, Result};
use crate::io::{write_json, write_jsonl};

pub const PRESETS: [&str; 2] = ["overfit", "sharing"];

/// Templates use `{value}` for an attribute value (each occurrence gets a
/// distinct value) and `{brand}` for a filler brand name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAttribute {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    pub values: Vec<String>,
    pub templates: Vec<String>,
    pub train: usize,
    #[serde(default)]
    pub dev: usize,
    #[serde(default)]
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub vector_dim: usize,
    pub brands: Vec<String>,
    pub attributes: Vec<SynthAttribute>,
}

fn default_dim() -> usize {
    50
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn brands() -> Vec<String> {
    strings(&[
        "Acme",
        "Northwind",
        "Lumen",
        "Bramble",
        "Keystone",
        "Marlow",
        "Zephyr",
        "Orchard",
    ])
}

impl SynthSpec {
    /// `overfit`: two attributes with 50 training products each.
    /// `sharing`: one low-resource attribute (20 products) and three
    /// high-resource ones (500 each) drawing on the same value vocabulary.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "overfit" => Ok(SynthSpec {
                seed,
                vector_dim: default_dim(),
                brands: brands(),
                attributes: vec![
                    SynthAttribute {
                        id: "Scent".into(),
                        phrase: None,
                        values: strings(&[
                            "vanilla",
                            "lavender",
                            "orchid",
                            "cherry pie",
                            "mango ice cream",
                            "sea salt",
                            "coconut",
                            "green tea",
                        ]),
                        templates: strings(&[
                            "{value} scented body wash",
                            "{value} hand soap",
                            "{value} shower gel",
                        ]),
                        train: 50,
                        dev: 20,
                        test: 20,
                    },
                    SynthAttribute {
                        id: "Item Form".into(),
                        phrase: None,
                        values: strings(&[
                            "cream", "gel", "lotion", "stick", "spray", "powder", "bar",
                        ]),
                        templates: strings(&[
                            "moisturizing face {value}",
                            "unscented {value} for dry skin",
                            "travel size {value}",
                        ]),
                        train: 50,
                        dev: 20,
                        test: 20,
                    },
                ],
            }),
            "sharing" => {
                let colors = strings(&[
                    "red",
                    "blue",
                    "green",
                    "black",
                    "white",
                    "ivory",
                    "navy blue",
                    "light gray",
                    "olive",
                    "maroon",
                    "teal",
                    "coral",
                    "beige",
                    "charcoal",
                    "burgundy",
                    "mint green",
                    "sky blue",
                    "rose gold",
                    "tan",
                    "mustard",
                    "lavender",
                    "crimson",
                    "silver",
                    "bronze",
                ]);
                let attr = |id: &str, templates: &[&str], train, dev, test| SynthAttribute {
                    id: id.into(),
                    phrase: None,
                    values: colors.clone(),
                    templates: strings(templates),
                    train,
                    dev,
                    test,
                };
                Ok(SynthSpec {
                    seed,
                    vector_dim: default_dim(),
                    brands: brands(),
                    attributes: vec![
                        attr(
                            "Color",
                            &[
                                "{brand} {value} leather handbag",
                                "{value} tote bag by {brand}",
                            ],
                            20,
                            20,
                            100,
                        ),
                        attr(
                            "Trim Color",
                            &[
                                "{brand} jacket with {value} trim",
                                "wool coat {value} trim {brand}",
                            ],
                            500,
                            40,
                            40,
                        ),
                        attr(
                            "Strap Color",
                            &[
                                "{brand} watch with {value} strap",
                                "sport watch {value} band by {brand}",
                            ],
                            500,
                            40,
                            40,
                        ),
                        attr(
                            "Lining Color",
                            &[
                                "{brand} boots with {value} lining",
                                "rain boots lined in {value} {brand}",
                            ],
                            500,
                            40,
                            40,
                        ),
                    ],
                })
            }
            other => Err(Error::Config(format!(
                "unknown synth preset `{other}` (choices: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.brands.is_empty() || self.vector_dim == 0 {
            return Err(Error::Config(
                "synth spec needs brands and a positive vector_dim".into(),
            ));
        }
        let mut ids = BTreeSet::new();
        for a in &self.attributes {
            if !ids.insert(a.id.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate synth attribute `{}`",
                    a.id
                )));
            }
            if a.templates.is_empty() {
                return Err(Error::Config(format!(
                    "attribute `{}` has no templates",
                    a.id
                )));
            }
            for t in &a.templates {
                let slots = t.matches("{value}").count();
                if slots == 0 || slots > a.values.len() {
                    return Err(Error::Config(format!(
                        "template `{t}` of `{}` needs between 1 and {} value slots",
                        a.id,
                        a.values.len()
                    )));
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::Config("synth spec has no attributes".into()));
        }
        Ok(())
    }
}

/// A generated corpus in the on-disk shapes the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub products: Vec<Product>,
    pub attributes: Vec<AttributeEntry>,
    pub splits: SplitManifest,
    pub vectors: StaticVectors,
}

fn fill(
    template: &str,
    values: &[String],
    brands: &[String],
    rng: &mut ChaCha8Rng,
) -> (String, BTreeSet<String>) {
    let slots = template.matches("{value}").count();
    let chosen: Vec<&String> = values.choose_multiple(rng, slots).collect();
    let brand = brands.choose(rng).expect("validated non-empty");
    let mut text = template.replace("{brand}", brand);
    for v in &chosen {
        text = text.replacen("{value}", v, 1);
    }
    (text, chosen.into_iter().cloned().collect())
}

/// Deterministic pseudo-random vector for a word, independent of the corpus.
pub fn word_vector(word: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(word.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut products = Vec::new();
    let mut splits = SplitManifest::default();
    for (a, attr) in spec.attributes.iter().enumerate() {
        for (split, count) in [
            ("train", attr.train),
            ("dev", attr.dev),
            ("test", attr.test),
        ] {
            for i in 0..count {
                let template = attr
                    .templates
                    .choose(&mut rng)
                    .expect("validated non-empty");
                let (title, values) = fill(template, &attr.values, &spec.brands, &mut rng);
                let id = format!("a{a}-{split}-{i:04}");
                match split {
                    "train" => splits.train.push(id.clone()),
                    "dev" => splits.dev.push(id.clone()),
                    _ => splits.test.push(id.clone()),
                }
                products.push(Product {
                    id,
                    title,
                    bullets: Vec::new(),
                    description: None,
                    gold_values: BTreeMap::from([(attr.id.clone(), values)]),
                });
            }
        }
    }

    let attributes: Vec<AttributeEntry> = spec
        .attributes
        .iter()
        .map(|a| AttributeEntry {
            id: a.id.clone(),
            phrase: a.phrase.clone(),
        })
        .collect();
    let mut words = BTreeSet::new();
    for p in &products {
        for t in tokenize(&p.title) {
            words.insert(t.text.to_lowercase());
        }
    }
    for a in &spec.attributes {
        let phrase = a
            .phrase
            .clone()
            .unwrap_or_else(|| crate::corpus::attribute_phrase(&a.id));
        for t in tokenize(&phrase) {
            words.insert(t.text.to_lowercase());
        }
    }
    // Value words sit near a per-attribute centre, as related words do in
    // real static vectors.
    let mut centres: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for a in &spec.attributes {
        let centre = word_vector(&format!("#values:{}", a.id), spec.vector_dim);
        for v in &a.values {
            for t in tokenize(v) {
                centres
                    .entry(t.text.to_lowercase())
                    .or_default()
                    .push(centre.clone());
            }
        }
    }
    let mut vectors = StaticVectors::new(spec.vector_dim);
    for w in &words {
        let mut v = word_vector(w, spec.vector_dim);
        if let Some(cs) = centres.get(w) {
            for (i, x) in v.iter_mut().enumerate() {
                let centre = cs.iter().map(|c| c[i]).sum::<f64>() / cs.len() as f64;
                *x = 0.5 * *x + centre;
            }
        }
        vectors.insert(w, &v)?;
    }
    Ok(SynthCorpus {
        products,
        attributes,
        splits,
        vectors,
    })
}

/// A labeled, split corpus with its vocabularies and a frozen attribute table.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub attributes: AttributeVocab,
    pub words: WordVocab,
    pub splits: Splits,
    pub table: AttributeEmbeddingTable,
    pub vectors: StaticVectors,
}

impl SynthCorpus {
    /// Labels the titles, splits them and builds the vocabularies and the
    /// uncontextualized attribute table from the training split.
    pub fn prepare(&self) -> Result<Prepared> {
        let attributes = AttributeVocab::new(self.attributes.clone())?;
        let (examples, _) = build_corpus(
            &self.products,
            &attributes,
            SourceField::Title,
            CorpusOptions::default(),
        );
        let splits = self.splits.apply(examples);
        let tokens = |xs: &'_ [crate::corpus::LabeledExample]| -> Vec<String> {
            xs.iter()
                .flat_map(|e| e.tokens.iter().map(|t| t.text.clone()))
                .collect()
        };
        let train_tokens = tokens(&splits.train);
        let other_tokens = [tokens(&splits.dev), tokens(&splits.test)].concat();
        let words = WordVocab::build(
            train_tokens.iter().map(String::as_str),
            other_tokens.iter().map(String::as_str),
            Some(&self.vectors),
        );
        let (table, _) = build_uncontextualized(&splits.train, &attributes, &self.vectors)?;
        Ok(Prepared {
            attributes,
            words,
            splits,
            table,
            vectors: self.vectors.clone(),
        })
    }

    /// Writes `products.jsonl`, `attributes.json`, `splits.json` and
    /// `vectors.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_jsonl(&dir.join("products.jsonl"), &self.products)?;
        write_json(&dir.join("attributes.json"), &self.attributes)?;
        write_json(&dir.join("splits.json"), &self.splits)?;
        self.vectors.save(&dir.join("vectors.txt"))
    }
}
