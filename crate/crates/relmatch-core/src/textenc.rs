//! Caption-to-vector encoding: tokenization, vocabulary, word embedding and
//! a bi-directional GRU whose forward/backward hidden states are averaged
//! into one contextual vector per word.

use crate::diffcore::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
const SPECIALS: [&str; 4] = [PAD, UNK, BOS, EOS];

/// Lowercase, strip punctuation (replaced by whitespace), split.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCaption {
            caption: text.to_string(),
        });
    }
    Ok(tokens)
}

/// Token-to-index map with the four special tokens at indices 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    /// Build from raw tokens: specials first, then unique tokens in
    /// lexicographic order for reproducibility.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut unique: Vec<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        unique.sort();
        unique.dedup();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(unique);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    /// Build from caption text, tokenizing each caption.
    pub fn from_captions<'c>(captions: impl IntoIterator<Item = &'c str>) -> Result<Self> {
        let mut tokens = Vec::new();
        for caption in captions {
            tokens.extend(tokenize(caption)?);
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        Self::PAD_ID
    }
    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }
    pub fn bos_id(&self) -> usize {
        Self::BOS_ID
    }
    pub fn eos_id(&self) -> usize {
        Self::EOS_ID
    }

    /// Index of a token, `<unk>` for out-of-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenOutOfRange {
                index: id,
                size: self.tokens.len(),
            })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.token(id).map(|s| s.to_string()))
            .collect()
    }

    /// One token per line, line number = index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io_at(path))?);
        for token in &self.tokens {
            writeln!(file, "{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io_at(path))?;
        let mut tokens = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            tokens.push(line?);
        }
        let mut index = HashMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::BadVocabulary {
                    reason: format!("duplicate token {token:?}"),
                });
            }
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if index.get(*special) != Some(&i) {
                return Err(Error::BadVocabulary {
                    reason: format!("special token {special} missing or out of place"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

/// One direction of the GRU: update gate z, reset gate r, candidate state.
/// The recurrence is
///   z = sigmoid(Wz x + Uz h + bz)
///   r = sigmoid(Wr x + Ur h + br)
///   c = tanh(Wc x + Uc (r*h) + bc)
///   h' = (1 - z)*h + z*c
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_update: Array,
    pub u_update: Array,
    pub b_update: Array,
    pub w_reset: Array,
    pub u_reset: Array,
    pub b_reset: Array,
    pub w_cand: Array,
    pub u_cand: Array,
    pub b_cand: Array,
}

impl GruParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            w_update: Array::xavier(hidden, input_dim, rng),
            u_update: Array::xavier(hidden, hidden, rng),
            b_update: Array::zeros(&[hidden]),
            w_reset: Array::xavier(hidden, input_dim, rng),
            u_reset: Array::xavier(hidden, hidden, rng),
            b_reset: Array::zeros(&[hidden]),
            w_cand: Array::xavier(hidden, input_dim, rng),
            u_cand: Array::xavier(hidden, hidden, rng),
            b_cand: Array::zeros(&[hidden]),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        GruParams {
            w_update: Array::zeros(&[hidden, input_dim]),
            u_update: Array::zeros(&[hidden, hidden]),
            b_update: Array::zeros(&[hidden]),
            w_reset: Array::zeros(&[hidden, input_dim]),
            u_reset: Array::zeros(&[hidden, hidden]),
            b_reset: Array::zeros(&[hidden]),
            w_cand: Array::zeros(&[hidden, input_dim]),
            u_cand: Array::zeros(&[hidden, hidden]),
            b_cand: Array::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_update.shape()[0]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array)> {
        vec![
            (format!("{prefix}.w_update"), &self.w_update),
            (format!("{prefix}.u_update"), &self.u_update),
            (format!("{prefix}.b_update"), &self.b_update),
            (format!("{prefix}.w_reset"), &self.w_reset),
            (format!("{prefix}.u_reset"), &self.u_reset),
            (format!("{prefix}.b_reset"), &self.b_reset),
            (format!("{prefix}.w_cand"), &self.w_cand),
            (format!("{prefix}.u_cand"), &self.u_cand),
            (format!("{prefix}.b_cand"), &self.b_cand),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array)> {
        vec![
            (format!("{prefix}.w_update"), &mut self.w_update),
            (format!("{prefix}.u_update"), &mut self.u_update),
            (format!("{prefix}.b_update"), &mut self.b_update),
            (format!("{prefix}.w_reset"), &mut self.w_reset),
            (format!("{prefix}.u_reset"), &mut self.u_reset),
            (format!("{prefix}.b_reset"), &mut self.b_reset),
            (format!("{prefix}.w_cand"), &mut self.w_cand),
            (format!("{prefix}.u_cand"), &mut self.u_cand),
            (format!("{prefix}.b_cand"), &mut self.b_cand),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> GruNodes {
        GruNodes {
            w_update: reg.register(tape, format!("{prefix}.w_update"), &self.w_update),
            u_update: reg.register(tape, format!("{prefix}.u_update"), &self.u_update),
            b_update: reg.register(tape, format!("{prefix}.b_update"), &self.b_update),
            w_reset: reg.register(tape, format!("{prefix}.w_reset"), &self.w_reset),
            u_reset: reg.register(tape, format!("{prefix}.u_reset"), &self.u_reset),
            b_reset: reg.register(tape, format!("{prefix}.b_reset"), &self.b_reset),
            w_cand: reg.register(tape, format!("{prefix}.w_cand"), &self.w_cand),
            u_cand: reg.register(tape, format!("{prefix}.u_cand"), &self.u_cand),
            b_cand: reg.register(tape, format!("{prefix}.b_cand"), &self.b_cand),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w_update: NodeId,
    pub u_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub u_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_cand: NodeId,
}

/// One GRU step on the tape.
pub fn gru_step(tape: &mut Tape, g: &GruNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let zx = tape.matmul(g.w_update, x)?;
    let zh = tape.matmul(g.u_update, h)?;
    let zs = tape.add(zx, zh)?;
    let zb = tape.add(zs, g.b_update)?;
    let z = tape.sigmoid(zb)?;

    let rx = tape.matmul(g.w_reset, x)?;
    let rh = tape.matmul(g.u_reset, h)?;
    let rs = tape.add(rx, rh)?;
    let rb = tape.add(rs, g.b_reset)?;
    let r = tape.sigmoid(rb)?;

    let gated = tape.mul(r, h)?;
    let cx = tape.matmul(g.w_cand, x)?;
    let ch = tape.matmul(g.u_cand, gated)?;
    let cs = tape.add(cx, ch)?;
    let cb = tape.add(cs, g.b_cand)?;
    let c = tape.tanh(cb)?;

    let keep = tape.one_minus(z)?;
    let carry = tape.mul(keep, h)?;
    let update = tape.mul(z, c)?;
    tape.add(carry, update)
}

/// Hidden states of a GRU run over a sequence, starting from zeros.
pub fn gru_sequence(
    tape: &mut Tape,
    g: &GruNodes,
    inputs: &[NodeId],
    hidden: usize,
) -> Result<Vec<NodeId>> {
    let mut h = tape.constant(Array::zeros(&[hidden]));
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_step(tape, g, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Trainable state of the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    /// `n_vocab x embed_dim` word embedding matrix.
    pub embed: Array,
    pub forward: GruParams,
    pub backward: GruParams,
}

impl TextEncoderParams {
    pub fn init(vocab_size: usize, embed_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        TextEncoderParams {
            embed: Array::uniform(&[vocab_size, embed_dim], -0.1, 0.1, rng),
            forward: GruParams::init(embed_dim, hidden, rng),
            backward: GruParams::init(embed_dim, hidden, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array)> {
        let mut out = vec![(format!("{prefix}.embed"), &self.embed)];
        out.extend(self.forward.named(&format!("{prefix}.fwd")));
        out.extend(self.backward.named(&format!("{prefix}.bwd")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array)> {
        let mut out = vec![(format!("{prefix}.embed"), &mut self.embed)];
        out.extend(self.forward.named_mut(&format!("{prefix}.fwd")));
        out.extend(self.backward.named_mut(&format!("{prefix}.bwd")));
        out
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> TextEncoderNodes {
        TextEncoderNodes {
            embed: reg.register(tape, format!("{prefix}.embed"), &self.embed),
            forward: self.forward.bind(tape, reg, &format!("{prefix}.fwd")),
            backward: self.backward.bind(tape, reg, &format!("{prefix}.bwd")),
            hidden: self.hidden(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderNodes {
    pub embed: NodeId,
    pub forward: GruNodes,
    pub backward: GruNodes,
    pub hidden: usize,
}

/// Per-word contextual vectors for a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// `n x h` matrix of word vectors.
    pub words: Array,
    pub caption_id: u64,
}

impl TextEncoding {
    pub fn word_count(&self) -> usize {
        self.words.shape()[0]
    }

    pub fn word(&self, j: usize) -> &[f64] {
        self.words.row_slice(j)
    }
}

/// Encode token ids on an existing tape; returns one node per word.
///
/// Each word vector is the average of the forward and backward GRU hidden
/// states at that position.
pub fn encode_on_tape(
    tape: &mut Tape,
    enc: &TextEncoderNodes,
    token_ids: &[usize],
) -> Result<Vec<NodeId>> {
    let vocab_rows = tape.value(enc.embed).shape()[0];
    for &id in token_ids {
        if id >= vocab_rows {
            return Err(Error::TokenOutOfRange {
                index: id,
                size: vocab_rows,
            });
        }
    }
    let n = token_ids.len();
    let embedded = tape.gather_rows(enc.embed, token_ids)?;
    let inputs: Vec<NodeId> = (0..n)
        .map(|i| tape.row(embedded, i))
        .collect::<Result<_>>()?;

    let fwd = gru_sequence(tape, &enc.forward, &inputs, enc.hidden)?;
    let reversed: Vec<NodeId> = inputs.iter().rev().copied().collect();
    let bwd = gru_sequence(tape, &enc.backward, &reversed, enc.hidden)?;

    let mut words = Vec::with_capacity(n);
    for i in 0..n {
        // backward state for position i sits at reversed index n-1-i
        let sum = tape.add(fwd[i], bwd[n - 1 - i])?;
        words.push(tape.scale(sum, 0.5)?);
    }
    Ok(words)
}

/// Configuration for standalone encoding.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    pub max_len: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { max_len: 64 }
    }
}

/// Encode a tokenized caption to its word-vector matrix. Captions longer
/// than `max_len` are truncated with a warning.
pub fn encode_text(
    token_ids: &[usize],
    params: &TextEncoderParams,
    caption_id: u64,
    options: EncodeOptions,
) -> Result<TextEncoding> {
    let ids = truncate_tokens(token_ids, options.max_len, caption_id);
    if ids.is_empty() {
        return Err(Error::EmptyCaption {
            caption: format!("caption {caption_id}"),
        });
    }
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let enc = params.bind(&mut tape, &mut reg, "textenc");
    let word_nodes = encode_on_tape(&mut tape, &enc, ids)?;
    let stacked = tape.stack_rows(&word_nodes)?;
    Ok(TextEncoding {
        words: tape.value(stacked).clone(),
        caption_id,
    })
}

pub fn truncate_tokens(token_ids: &[usize], max_len: usize, caption_id: u64) -> &[usize] {
    if token_ids.len() > max_len {
        log::warn!(
            "caption {caption_id}: {} tokens truncated to max_len {max_len}",
            token_ids.len()
        );
        &token_ids[..max_len]
    } else {
        token_ids
    }
}
