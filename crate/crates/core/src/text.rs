//! Tokenization, vocabulary and frozen word embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, SOS_TOKEN, EOS_TOKEN];
const DETACHED: &[char] = &['.', ',', '?', '!', ';', ':', '"'];

/// Lowercases, splits on whitespace and detaches trailing `. , ? ! ; : "`
/// (and a leading `"`) into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut rest = word.as_str();
        while rest.len() > 1 {
            match rest.strip_prefix('"') {
                Some(stripped) => {
                    out.push("\"".to_string());
                    rest = stripped;
                }
                None => break,
            }
        }
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().last().filter(|c| DETACHED.contains(c)) {
            if rest.len() == c.len_utf8() {
                break;
            }
            tail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Space-joins tokens.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Bijective token↔id map with the reserved tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from an ordered token list, which must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::contract(
                "vocabulary must start with <pad>, <unk>, <s>, </s>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens first, then by descending count (ties lexicographic),
    /// dropping tokens seen fewer than `min_count` times, capped at `max_size`.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], max_size: usize, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `vocab × d` word vectors. Rows are never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    matrix: Tensor<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::dim("embedding table", matrix.shape(), &[]));
        }
        let mut matrix = matrix;
        let d = matrix.cols();
        matrix.data_mut()[PAD * d..(PAD + 1) * d].fill(T::zero());
        Ok(Self { matrix })
    }

    /// Every row uniform(-0.1, 0.1), PAD zeroed.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let m = Tensor::new(vec![vocab_size, dim], rng.uniform_vec(vocab_size * dim, -0.1, 0.1))
            .expect("shape");
        Self::new(m).expect("rank 2")
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, id: usize) -> &[T] {
        self.matrix.row(id)
    }

    pub fn vector(&self, id: usize) -> Tensor<T> {
        Tensor::vector(self.row(id).to_vec())
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn is_frozen(&self) -> bool {
        true
    }
}

/// Reads a GloVe-style text file (`token v1 … vd` per line).
///
/// Vocabulary tokens present in the file get their vector; the rest are drawn
/// uniform(-0.1, 0.1) from `rng` in id order. File tokens outside the
/// vocabulary are skipped. `dim` fixes the expected width.
pub fn load_embeddings<T: Scalar>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut found: Vec<Option<Vec<T>>> = vec![None; vocab.len()];
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|p| !p.is_empty());
        let token = parts.next().expect("non-empty line has a token");
        let values = parts
            .map(|p| {
                p.parse::<f64>().map(T::of).map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad float {p:?}: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            found[id] = Some(values);
        }
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for row in found {
        match row {
            Some(v) => data.extend(v),
            None => data.extend(rng.uniform_vec::<T>(dim, -0.1, 0.1)),
        }
    }
    EmbeddingTable::new(Tensor::new(vec![vocab.len(), dim], data)?)
}

/// Example-local ids for passage tokens outside the base vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedVocabMap {
    base_size: usize,
    oov: Vec<String>,
}

impl ExtendedVocabMap {
    /// Assigns `base_size, base_size+1, …` to passage OOV tokens in order of first occurrence.
    pub fn from_passage<S: AsRef<str>>(passage: &[S], vocab: &Vocabulary) -> Self {
        let mut oov: Vec<String> = Vec::new();
        for tok in passage {
            let tok = tok.as_ref();
            if vocab.get(tok).is_none() && !oov.iter().any(|o| o == tok) {
                oov.push(tok.to_string());
            }
        }
        Self {
            base_size: vocab.len(),
            oov,
        }
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn extended_size(&self) -> usize {
        self.base_size + self.oov.len()
    }

    pub fn oov_tokens(&self) -> &[String] {
        &self.oov
    }

    /// Base id, extended id, or [`UNK`].
    pub fn id(&self, token: &str, vocab: &Vocabulary) -> usize {
        vocab
            .get(token)
            .or_else(|| {
                self.oov
                    .iter()
                    .position(|o| o == token)
                    .map(|p| self.base_size + p)
            })
            .unwrap_or(UNK)
    }

    pub fn token<'a>(&'a self, id: usize, vocab: &'a Vocabulary) -> Option<&'a str> {
        if id < self.base_size {
            vocab.token(id)
        } else {
            self.oov.get(id - self.base_size).map(String::as_str)
        }
    }

    /// Maps an extended id to the id whose embedding feeds the next decoder step.
    pub fn input_id(&self, id: usize) -> usize {
        if id < self.base_size {
            id
        } else {
            UNK
        }
    }
}
