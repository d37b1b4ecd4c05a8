//! Toy text embedder over the caption grammar vocabulary.

use rand::Rng;
use std::collections::HashMap;

use c2r_core::synthdata::{caption_vocabulary, tokenize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::nn::{sinusoid, Attention, Linear};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Stands for the dropped caption of the unconditional branch.
pub const NULL: usize = 2;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut words: Vec<String> = ["<pad>", "<unk>", "<null>"].map(String::from).to_vec();
        words.extend(caption_vocabulary().into_iter().map(String::from));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Unknown words map to UNK; an empty caption is a single UNK.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(caption)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

/// Padded token ids `[batch, len]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    /// Sequences longer than `len` are truncated.
    pub fn new(seqs: &[Vec<usize>], len: usize) -> Self {
        let mut ids = vec![PAD; seqs.len() * len];
        let mut mask = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            for (i, &id) in s.iter().take(len).enumerate() {
                ids[b * len + i] = id;
                mask[b * len + i] = true;
            }
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }

    pub fn null(batch: usize, len: usize) -> Self {
        Self::new(&vec![vec![NULL]; batch], len)
    }

    pub fn row(&self, b: usize) -> Vec<usize> {
        (0..self.len)
            .filter(|&i| self.mask[b * self.len + i])
            .map(|i| self.ids[b * self.len + i])
            .collect()
    }
}

/// Token embeddings of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `[len, width]`
    pub tokens: Tensor<f32>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub attn: Attention,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    pub max_len: usize,
}

/// Encoder outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncodedText {
    /// `[batch, len, width]`
    pub tokens: Var,
    /// Masked mean over tokens, `[batch, width]`.
    pub pooled: Var,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        vocab: usize,
        width: usize,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: store.add("text.embed", vec![vocab, width], Init::Normal(0.3), rng),
            attn: Attention::new(store, "text.attn", width, heads, rng),
            fc1: Linear::new(store, "text.fc1", width, 2 * width, true, Init::Xavier, rng),
            fc2: Linear::new(store, "text.fc2", 2 * width, width, true, Init::Xavier, rng),
            width,
            max_len,
        }
    }

    fn positions<T: Scalar>(&self, batch: usize, len: usize) -> Tensor<T> {
        let mut row = vec![0.0; self.width];
        let mut data = Vec::with_capacity(batch * len * self.width);
        for _ in 0..batch {
            for i in 0..len {
                sinusoid(i as f64, self.width, &mut row);
                data.extend(row.iter().map(|&v| T::of(0.1 * v)));
            }
        }
        Tensor::new(vec![batch, len, self.width], data)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, text: &TextBatch) -> EncodedText {
        let (b, l, d) = (text.batch, text.len, self.width);
        let table = g.param(store, self.embed);
        let x = g.embedding(table, text.ids.clone());
        let x = g.reshape(x, vec![b, l, d]);
        let pos = g.constant(self.positions(b, l));
        let x = g.add(x, pos);
        let h = g.layer_norm(x);
        let a = self.attn.forward(g, store, h, h, Some(&text.mask));
        let x = g.add(x, a);
        let h = g.layer_norm(x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        let x = g.add(x, h);
        let tokens = g.layer_norm(x);
        let mut weights = vec![T::zero(); b * l];
        for bi in 0..b {
            let n = text.mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count().max(1);
            for i in 0..l {
                if text.mask[bi * l + i] {
                    weights[bi * l + i] = T::one() / T::of(n as f64);
                }
            }
        }
        let pooled = g.pool(tokens, weights);
        EncodedText { tokens, pooled }
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        store.count(&["text"])
    }
}
