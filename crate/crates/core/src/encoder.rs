//! Word embeddings and the bidirectional LSTM encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Token to row map. Row 0 is `<pad>`, row 1 is `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    /// Builds a vocabulary from the given words (duplicates ignored, order kept).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = WordVocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD.to_string(), UNK.to_string()]
            .into_iter()
            .chain(words.into_iter().map(Into::into))
        {
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.words.len());
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// Every training token, plus the other tokens that have a static vector.
    /// Tokens are sorted so the row order does not depend on input order.
    pub fn build<'a>(
        train_tokens: impl IntoIterator<Item = &'a str>,
        other_tokens: impl IntoIterator<Item = &'a str>,
        vectors: Option<&StaticVectors>,
    ) -> Self {
        let mut words: Vec<&str> = train_tokens.into_iter().collect();
        if let Some(v) = vectors {
            words.extend(other_tokens.into_iter().filter(|t| v.lookup(t).is_some()));
        }
        words.sort_unstable();
        words.dedup();
        WordVocab::new(words)
    }

    /// Restores a saved vocabulary, which must start with the reserved rows.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Data(format!(
                "word vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let n = words.len();
        let vocab = WordVocab::new(words);
        if vocab.len() != n {
            return Err(Error::Data("word vocabulary has duplicate entries".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    /// Exact match, then lowercase, then `<unk>`.
    pub fn lookup(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(self.unk())
    }

    pub fn lookup_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    /// SHA-256 over the newline-joined words.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.words.iter().map(String::as_str))
    }
}

pub(crate) fn fingerprint<'a>(items: impl Iterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for item in items {
        h.update(item.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Static word vectors in GloVe text format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StaticVectors {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl StaticVectors {
    pub fn new(dim: usize) -> Self {
        StaticVectors {
            dim,
            ..Default::default()
        }
    }

    /// Adds or replaces a vector.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "vector for {word:?} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        match self.index.get(word) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(word.to_string(), self.index.len());
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors: Option<StaticVectors> = None;
        let mut values = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            values.clear();
            for p in parts {
                values.push(
                    p.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad number {p:?}: {e}")))?,
                );
            }
            if values.is_empty() {
                return Err(parse_err(format!("no values for {word:?}")));
            }
            let v = vectors.get_or_insert_with(|| StaticVectors::new(values.len()));
            if values.len() != v.dim {
                return Err(parse_err(format!(
                    "expected {} values, found {}",
                    v.dim,
                    values.len()
                )));
            }
            v.insert(word, &values)?;
        }
        vectors.ok_or_else(|| Error::Data(format!("{}: no vectors", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut words: Vec<(&String, &usize)> = self.index.iter().collect();
        words.sort_by_key(|&(_, &i)| i);
        for (word, &i) in words {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            let nums: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(w, "{word} {}", nums.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Exact match, then lowercase.
    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.get(word).or_else(|| self.get(&word.to_lowercase()))
    }
}

/// Initial word table: static vectors where available, uniform(-0.1, 0.1)
/// elsewhere, and a zero `<pad>` row.
pub fn init_word_table<R: Rng + ?Sized>(
    vocab: &WordVocab,
    d_word: usize,
    vectors: Option<&StaticVectors>,
    rng: &mut R,
) -> Result<Tensor> {
    if let Some(v) = vectors {
        if v.dim() != d_word {
            return Err(Error::Config(format!(
                "word vectors have dimension {}, but d_word is {d_word}",
                v.dim()
            )));
        }
    }
    let mut table = Tensor::zeros(&[vocab.len(), d_word]);
    for (i, word) in vocab.words().iter().enumerate() {
        // draw for every row so the stream does not depend on which words have vectors
        let random: Vec<f64> = (0..d_word).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let row = &mut table.data_mut()[i * d_word..(i + 1) * d_word];
        if i == vocab.pad() {
            continue;
        }
        match vectors.and_then(|v| v.lookup(word)) {
            Some(pre) => row.copy_from_slice(pre),
            None => row.copy_from_slice(&random),
        }
    }
    Ok(table)
}

/// Gate order used throughout: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// One LSTM direction: per gate a `[hidden, input + hidden]` weight applied
/// to `[x; h]` and a `[hidden]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub weights: [Tensor; 4],
    pub biases: [Tensor; 4],
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            weights: std::array::from_fn(|_| Tensor::zeros(&[hidden, input + hidden])),
            biases: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        LstmCell {
            weights: std::array::from_fn(|_| {
                Tensor::uniform(&[hidden, input + hidden], scale, rng)
            }),
            biases: std::array::from_fn(|_| Tensor::uniform(&[hidden], scale, rng)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.biases[0].len()
    }

    pub fn input(&self) -> usize {
        self.weights[0].shape()[1] - self.hidden()
    }

    /// Registers the cell's tensors as constants (no gradient).
    pub fn bind_const<'p>(&'p self, g: &mut Graph<'p>) -> CellVars {
        CellVars {
            weights: std::array::from_fn(|k| g.constant_ref(&self.weights[k])),
            biases: std::array::from_fn(|k| g.constant_ref(&self.biases[k])),
        }
    }
}

/// Graph handles for one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

/// One recurrence step; returns `(h', c')`.
pub fn lstm_step_graph(
    g: &mut Graph<'_>,
    cell: &CellVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xh = g.concat(&[x, h])?;
    let mut pre = [xh; 4];
    for (k, slot) in pre.iter_mut().enumerate() {
        let wx = g.matmul(cell.weights[k], xh)?;
        *slot = g.add(wx, cell.biases[k])?;
    }
    let i = g.sigmoid(pre[0]);
    let f = g.sigmoid(pre[1]);
    let o = g.sigmoid(pre[2]);
    let cand = g.tanh(pre[3]);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

fn run_direction(
    g: &mut Graph<'_>,
    cell: &CellVars,
    xs: &[Var],
    hidden: usize,
) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(&[hidden]));
    let mut c = g.constant(Tensor::zeros(&[hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_step_graph(g, cell, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Bidirectional LSTM over token vectors. Each output is the forward state
/// followed by the backward state at that position.
pub fn bilstm_graph(
    g: &mut Graph<'_>,
    forward: &CellVars,
    backward: &CellVars,
    xs: &[Var],
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Data("cannot encode an empty token sequence".into()));
    }
    let hidden = g.value(forward.biases[0]).len();
    let back_hidden = g.value(backward.biases[0]).len();
    let fwd = run_direction(g, forward, xs, hidden)?;
    let reversed: Vec<Var> = xs.iter().rev().copied().collect();
    let mut bwd = run_direction(g, backward, &reversed, back_hidden)?;
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect()
}

/// Single LSTM step on plain tensors.
pub fn lstm_step(cell: &LstmCell, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = cell.bind_const(&mut g);
    let (x, h, c) = (g.constant_ref(x), g.constant_ref(h), g.constant_ref(c));
    let (h2, c2) = lstm_step_graph(&mut g, &vars, x, h, c)?;
    Ok((g.value(h2).clone(), g.value(c2).clone()))
}

/// Encodes an `[n, d_in]` matrix into `[n, d_h]`.
pub fn bilstm(forward: &LstmCell, backward: &LstmCell, xs: &Tensor) -> Result<Tensor> {
    if xs.rank() != 2 || xs.shape()[1] != forward.input() || xs.shape()[1] != backward.input() {
        return Err(Error::shape("bilstm", xs.shape(), &[forward.input()]));
    }
    let mut g = Graph::new();
    let fv = forward.bind_const(&mut g);
    let bv = backward.bind_const(&mut g);
    let table = g.constant_ref(xs);
    let rows = (0..xs.shape()[0])
        .map(|i| g.row(table, i))
        .collect::<Result<Vec<_>>>()?;
    let hs = bilstm_graph(&mut g, &fv, &bv, &rows)?;
    let d_h = forward.hidden() + backward.hidden();
    let data = hs
        .iter()
        .flat_map(|&h| g.value(h).data().to_vec())
        .collect();
    Tensor::matrix(hs.len(), d_h, data)
}
