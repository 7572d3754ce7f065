//! Byte-level corpus handling and deterministic batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::SeqLayout;

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index {
                op: "decode",
                index: id,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Concatenated byte stream with a fixed validation tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sources: Vec<PathBuf>,
    tokens: Vec<usize>,
    train_end: usize,
}

impl Corpus {
    /// `val_fraction` of the stream (rounded down) is held out at the end.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "data.val_fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let tokens = tokenize(bytes);
        let val = (tokens.len() as f64 * val_fraction).floor() as usize;
        Ok(Self {
            sources: Vec::new(),
            train_end: tokens.len() - val,
            tokens,
        })
    }

    pub fn from_paths(paths: &[PathBuf], val_fraction: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        for p in paths {
            bytes.extend(std::fs::read(p)?);
        }
        let mut c = Self::from_bytes(&bytes, val_fraction)?;
        c.sources = paths.to_vec();
        Ok(c)
    }

    pub fn from_path(path: &Path, val_fraction: f64) -> Result<Self> {
        Self::from_paths(&[path.to_path_buf()], val_fraction)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.train_end]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.train_end..]
    }

    pub fn train_end(&self) -> usize {
        self.train_end
    }
}

/// `n_seqs` windows of `seq_len` inputs; targets are the inputs shifted by one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub layout: SeqLayout,
    /// Corpus offset of each window.
    pub starts: Vec<usize>,
}

impl Batch {
    fn from_starts(stream: &[usize], base: usize, starts: Vec<usize>, seq_len: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in &starts {
            let local = s - base;
            inputs.extend_from_slice(&stream[local..local + seq_len]);
            targets.extend_from_slice(&stream[local + 1..local + seq_len + 1]);
        }
        Self {
            layout: SeqLayout::new(starts.len(), seq_len),
            inputs,
            targets,
            starts,
        }
    }

    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}

/// Endless stream of training batches with uniformly drawn window starts.
///
/// Every window, including its final target, lies inside the training region.
pub struct BatchSampler<'a> {
    stream: &'a [usize],
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

pub fn make_batches(corpus: &Corpus, batch_size: usize, seq_len: usize, seed: u64) -> Result<BatchSampler<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::config("batch_size and seq_len must be positive"));
    }
    if corpus.train().len() < seq_len + 1 {
        return Err(Error::config(format!(
            "training split has {} tokens, need at least seq_len + 1 = {}",
            corpus.train().len(),
            seq_len + 1
        )));
    }
    Ok(BatchSampler {
        stream: corpus.train(),
        batch_size,
        seq_len,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl BatchSampler<'_> {
    pub fn next_batch(&mut self) -> Batch {
        let max_start = self.stream.len() - self.seq_len - 1;
        let starts = (0..self.batch_size)
            .map(|_| self.rng.gen_range(0..=max_start))
            .collect();
        Batch::from_starts(self.stream, 0, starts, self.seq_len)
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Deterministic held-out batches: consecutive non-overlapping windows from
/// the start of the validation split, at most `max_batches` of them.
pub fn validation_batches(
    corpus: &Corpus,
    batch_size: usize,
    seq_len: usize,
    max_batches: usize,
) -> Result<Vec<Batch>> {
    let val = corpus.validation();
    let base = corpus.train_end();
    let n_windows = val.len().saturating_sub(1) / seq_len;
    if n_windows < batch_size {
        return Err(Error::config(format!(
            "validation split has {} tokens, too small for one {batch_size}×{seq_len} batch",
            val.len()
        )));
    }
    let batches = (n_windows / batch_size).min(max_batches);
    Ok((0..batches)
        .map(|b| {
            let starts = (0..batch_size).map(|i| base + (b * batch_size + i) * seq_len).collect();
            Batch::from_starts(val, base, starts, seq_len)
        })
        .collect())
}

/// Start offsets of full windows: `0, stride, 2·stride, ...`.
pub fn sliding_windows(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || stride == 0 || window > len {
        return Vec::new();
    }
    (0..=len - window).step_by(stride).collect()
}

const NAMES: [&str; 12] = [
    "ada", "bob", "cyd", "dora", "eli", "fay", "gus", "hana", "ivo", "june", "kai", "lena",
];
const ADJECTIVES: [&str; 16] = [
    "red", "old", "small", "bright", "quiet", "heavy", "green", "cold", "soft", "tall", "blue", "warm", "dark",
    "round", "sharp", "empty",
];
const NOUNS: [&str; 20] = [
    "box", "lamp", "river", "garden", "window", "letter", "stone", "bridge", "engine", "basket", "mirror", "candle",
    "forest", "table", "ladder", "kettle", "harbor", "wagon", "tower", "field",
];
const VERBS: [&str; 14] = [
    "finds", "opens", "paints", "moves", "cleans", "sells", "carries", "watches", "fixes", "builds", "keeps", "drops",
    "lifts", "counts",
];
const PLACES: [&str; 8] = [
    "by the sea",
    "in the town",
    "near the hill",
    "at the market",
    "under the bridge",
    "in the valley",
    "on the farm",
    "at the station",
];

/// Generates roughly `n_bytes` of structured English-like text.
///
/// Paragraphs introduce characters and objects and later refer back to them,
/// mix in arithmetic facts and repeated phrases, so next-byte prediction
/// needs both local statistics and long-range context.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    let zipf = |rng: &mut ChaCha8Rng, n: usize| -> usize {
        // P(i) ∝ 1/(i+1)
        let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let mut u = rng.gen::<f64>() * h;
        for i in 0..n {
            u -= 1.0 / (i + 1) as f64;
            if u <= 0.0 {
                return i;
            }
        }
        n - 1
    };
    while out.len() < n_bytes {
        let who = *NAMES.choose(&mut rng).expect("non-empty");
        let adj = ADJECTIVES[zipf(&mut rng, ADJECTIVES.len())];
        let noun = NOUNS[zipf(&mut rng, NOUNS.len())];
        let place = *PLACES.choose(&mut rng).expect("non-empty");
        out.push_str(&format!("{who} has a {adj} {noun} {place}. "));
        for _ in 0..rng.gen_range(2..6) {
            match rng.gen_range(0..5) {
                0 => {
                    let verb = VERBS[zipf(&mut rng, VERBS.len())];
                    out.push_str(&format!("{who} {verb} the {adj} {noun}. "));
                }
                1 => {
                    let other = *NAMES.choose(&mut rng).expect("non-empty");
                    let verb = VERBS[zipf(&mut rng, VERBS.len())];
                    let adj2 = ADJECTIVES[zipf(&mut rng, ADJECTIVES.len())];
                    let noun2 = NOUNS[zipf(&mut rng, NOUNS.len())];
                    out.push_str(&format!("{other} {verb} a {adj2} {noun2} for {who}. "));
                }
                2 => {
                    let a = rng.gen_range(0..20);
                    let b = rng.gen_range(0..20);
                    out.push_str(&format!("{a} plus {b} is {}. ", a + b));
                }
                3 => out.push_str(&format!("the {noun} is {adj}. ")),
                _ => out.push_str(&format!("where is the {noun}? it is {place}. ")),
            }
        }
        out.push_str(&format!("{who} is happy.\n"));
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
