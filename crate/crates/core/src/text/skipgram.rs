//! Skip-gram with negative sampling.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Vocabulary, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 4,
            negatives: 5,
            epochs: 5,
            seed: 0,
            learning_rate: 0.025,
        }
    }
}

/// `V×D` word vectors. Row [`PAD_ID`] is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Tensor,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    pub fn vocab_size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[id * d..(id + 1) * d]
    }

    /// Cosine similarity; zero if either row has zero norm.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        cosine(self.row(a), self.row(b))
    }

    /// Rows drawn uniformly from `±0.5/D`, padding row zero.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.5 / dim as f64;
        let mut data = vec![0.0; vocab_size * dim];
        for v in data.iter_mut().skip(dim) {
            *v = rng.gen_range(-half..half);
        }
        Self {
            vectors: Tensor::new(vec![vocab_size, dim], data).expect("shape"),
            trainable: true,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramOutcome {
    pub embedding: EmbeddingMatrix,
    /// Mean negative-sampling loss per (center, context) pair, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains input vectors over `corpus` (documents as vocabulary ids).
///
/// PAD and UNK positions are skipped, so their rows keep their initial
/// values; negatives are drawn from the unigram distribution raised to 0.75.
/// The learning rate decays linearly to zero over all epochs. The returned
/// vectors are the sum of the input and context vectors.
pub fn train_skipgram(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    config: &SkipGramConfig,
) -> Result<SkipGramOutcome> {
    if config.dim < 2 {
        return Err(Error::usage("embedding dim must be at least 2"));
    }
    if config.window == 0 {
        return Err(Error::usage("window must be at least 1"));
    }
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| d.iter().copied().filter(|&i| i != PAD_ID && i != UNK_ID).collect())
        .collect();
    let mut counts = vec![0usize; vocab_size];
    for &id in docs.iter().flatten() {
        if id >= vocab_size {
            return Err(Error::Lookup(format!("token id {id} outside vocabulary of {vocab_size}")));
        }
        counts[id] += 1;
    }
    let total: usize = counts.iter().sum();
    if total <= config.window {
        return Err(Error::usage(format!(
            "corpus of {total} tokens is smaller than one window of {}",
            config.window
        )));
    }

    let dim = config.dim;
    let mut embedding = EmbeddingMatrix::random(vocab_size, dim, config.seed);
    let mut contexts = vec![0.0; vocab_size * dim];
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let pairs_per_epoch: usize = docs
        .iter()
        .map(|d| {
            (0..d.len())
                .map(|i| i.min(config.window) + (d.len() - 1 - i).min(config.window))
                .sum::<usize>()
        })
        .sum();
    let total_pairs = (pairs_per_epoch * config.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad_h = vec![0.0; dim];

    for _ in 0..config.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for doc in &docs {
            for (i, &center) in doc.iter().enumerate() {
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window).min(doc.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let lr = (config.learning_rate * (1.0 - seen as f64 / total_pairs))
                        .max(config.learning_rate * 1e-4);
                    seen += 1;
                    pairs += 1;
                    let target = doc[j];
                    grad_h.iter_mut().for_each(|g| *g = 0.0);
                    let h_off = center * dim;
                    for k in 0..=config.negatives {
                        let (word, label) = if k == 0 {
                            (target, 1.0)
                        } else {
                            let w = noise.sample(&mut rng);
                            if w == target {
                                continue;
                            }
                            (w, 0.0)
                        };
                        let c_off = word * dim;
                        let h = &embedding.vectors.data()[h_off..h_off + dim];
                        let c = &contexts[c_off..c_off + dim];
                        let score: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
                        let s = sigmoid(score);
                        loss -= if label == 1.0 {
                            s.max(1e-12).ln()
                        } else {
                            (1.0 - s).max(1e-12).ln()
                        };
                        let g = (label - s) * lr;
                        for (gh, cv) in grad_h.iter_mut().zip(c) {
                            *gh += g * cv;
                        }
                        let h = embedding.vectors.data()[h_off..h_off + dim].to_vec();
                        for (cv, hv) in contexts[c_off..c_off + dim].iter_mut().zip(&h) {
                            *cv += g * hv;
                        }
                    }
                    let row = &mut embedding.vectors.data_mut()[h_off..h_off + dim];
                    for (hv, gh) in row.iter_mut().zip(&grad_h) {
                        *hv += gh;
                    }
                }
            }
        }
        epoch_losses.push(loss / pairs.max(1) as f64);
    }
    for (v, c) in embedding.vectors.data_mut().iter_mut().zip(&contexts) {
        *v += c;
    }
    Ok(SkipGramOutcome {
        embedding,
        epoch_losses,
    })
}

/// The `k` most cosine-similar in-vocabulary tokens to `token`, self
/// excluded, ties broken by id.
pub fn nearest_neighbors(
    embed: &EmbeddingMatrix,
    vocab: &Vocabulary,
    token: &str,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let query = vocab
        .id(token)
        .ok_or_else(|| Error::Lookup(format!("token {token:?} not in vocabulary")))?;
    let mut scored: Vec<(usize, f64)> = (2..embed.vocab_size().min(vocab.len()))
        .filter(|&i| i != query)
        .map(|i| (i, embed.cosine(query, i)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (vocab.token(i).unwrap_or_default().to_string(), s))
        .collect())
}

/// One line per vocabulary entry: the token, then its `D` values.
pub fn write_embedding_text(path: &Path, embed: &EmbeddingMatrix, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for id in 0..embed.vocab_size() {
        out.push_str(vocab.token(id).unwrap_or_default());
        for v in embed.row(id) {
            write!(out, " {v}").expect("write to string");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the format written by [`write_embedding_text`]; rows must appear
/// in vocabulary id order.
pub fn read_embedding_text(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default();
        if vocab.token(line_no) != Some(token) {
            return Err(Error::Malformed(format!(
                "embedding line {} has token {token:?}, vocabulary expects {:?}",
                line_no + 1,
                vocab.token(line_no)
            )));
        }
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed(format!("embedding line {}: {e}", line_no + 1)))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Malformed(format!(
                    "embedding line {} has {} values, expected {d}",
                    line_no + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::Malformed("empty embedding file".into()))?;
    Ok(EmbeddingMatrix {
        vectors: Tensor::new(vec![rows, dim], data)?,
        trainable: true,
    })
}
