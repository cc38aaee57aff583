//! Toy datasets: modular addition, sequence copying and raw bytes.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training sequence. `targets[t]` is the token expected after
/// position `t`, or `None` where the loss is masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Length shared by every example.
    pub seq_len: usize,
    /// Smallest vocabulary that covers every token.
    pub min_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `a b = (a+b) mod p`, scored only on the answer.
    ModularAdd {
        p: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
    },
    /// `s SEP s`, scored only on the copy.
    Copy {
        alphabet: usize,
        len: usize,
        n_examples: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
    },
    /// Byte-level next-token prediction on a file; the last tenth is held out.
    TextFile { path: String },
}

fn default_eval_fraction() -> f64 {
    0.5
}

impl DatasetConfig {
    pub fn build(&self, seq_len: usize, seed: u64) -> Result<Dataset> {
        match self {
            DatasetConfig::ModularAdd { p, eval_fraction } => make_modular_addition_dataset(*p, p * p, *eval_fraction, seed),
            DatasetConfig::Copy {
                alphabet,
                len,
                n_examples,
                eval_fraction,
            } => make_copy_dataset(*alphabet, *len, *n_examples, *eval_fraction, seed),
            DatasetConfig::TextFile { path } => make_text_dataset(path, seq_len),
        }
    }
}

fn split(mut all: Vec<Example>, eval_fraction: f64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!("eval_fraction must lie in [0, 1), got {eval_fraction}")));
    }
    let n_eval = ((all.len() as f64) * eval_fraction).round() as usize;
    let train = all.split_off(n_eval);
    if train.is_empty() {
        return Err(Error::Config("split leaves no training examples".into()));
    }
    Ok((train, all))
}

/// The answer token for `a + b` modulo `p`.
pub fn modular_answer(a: usize, b: usize, p: usize) -> usize {
    (a + b) % p
}

/// Sequences `[a, b, =]` with the target `(a+b) mod p` at the `=` position.
/// Token `p` is `=`. Draws `n_examples` distinct pairs (at most `p²`) and
/// splits them into disjoint train / eval sets.
pub fn make_modular_addition_dataset(p: usize, n_examples: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    if p < 2 {
        return Err(Error::Config(format!("modulus must be >= 2, got {p}")));
    }
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    pairs.truncate(n_examples.min(p * p));
    let all = pairs
        .into_iter()
        .map(|(a, b)| Example {
            tokens: vec![a, b, p],
            targets: vec![None, None, Some(modular_answer(a, b, p))],
        })
        .collect();
    let (train, eval) = split(all, eval_fraction)?;
    Ok(Dataset {
        train,
        eval,
        seq_len: 3,
        min_vocab: p + 1,
    })
}

/// Sequences `[s_1..s_n, SEP, s_1..s_{n-1}]` over `alphabet` symbols (token
/// `alphabet` is `SEP`); from `SEP` onward each position predicts the next
/// copied symbol. Sequences are distinct, so the split is disjoint.
pub fn make_copy_dataset(alphabet: usize, len: usize, n_examples: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    if alphabet < 1 || len < 1 {
        return Err(Error::Config("copy task needs alphabet >= 1 and len >= 1".into()));
    }
    let distinct = (alphabet as f64).powi(len as i32);
    let n = (n_examples as f64).min(distinct) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(n);
    while all.len() < n {
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        if !seen.insert(s.clone()) {
            continue;
        }
        let mut tokens = s.clone();
        tokens.push(alphabet);
        tokens.extend_from_slice(&s[..len - 1]);
        let mut targets = vec![None; len];
        targets.extend(s.iter().map(|&t| Some(t)));
        all.push(Example { tokens, targets });
    }
    let (train, eval) = split(all, eval_fraction)?;
    Ok(Dataset {
        train,
        eval,
        seq_len: 2 * len,
        min_vocab: alphabet + 1,
    })
}

/// Non-overlapping byte windows of `seq_len + 1`; the last tenth of the
/// windows is the eval split.
pub fn make_text_dataset(path: impl AsRef<Path>, seq_len: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path.as_ref())?;
    let windows: Vec<Example> = bytes
        .chunks_exact(seq_len + 1)
        .map(|w| Example {
            tokens: w[..seq_len].iter().map(|&b| b as usize).collect(),
            targets: w[1..].iter().map(|&b| Some(b as usize)).collect(),
        })
        .collect();
    if windows.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds fewer than two windows of {} bytes",
            path.as_ref().display(),
            seq_len + 1
        )));
    }
    let n_eval = (windows.len() / 10).max(1);
    let mut train = windows;
    let eval = train.split_off(train.len() - n_eval);
    Ok(Dataset {
        train,
        eval,
        seq_len,
        min_vocab: 256,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_answers() {
        assert_eq!(modular_answer(3, 5, 7), 1);
        assert_eq!(modular_answer(0, 0, 7), 0);
        let ds = make_modular_addition_dataset(7, 49, 0.3, 1).unwrap();
        for e in ds.train.iter().chain(&ds.eval) {
            assert_eq!(e.targets[2], Some((e.tokens[0] + e.tokens[1]) % 7));
            assert_eq!(e.tokens[2], 7);
        }
    }

    #[test]
    fn modular_split_is_disjoint_and_bounded() {
        let ds = make_modular_addition_dataset(7, 1000, 0.5, 4).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|e| (e.tokens[0], e.tokens[1])).collect();
        assert!(ds.eval.iter().all(|e| !train.contains(&(e.tokens[0], e.tokens[1]))));
        assert!(ds.train.len() + ds.eval.len() <= 49);
        assert_eq!(ds.min_vocab, 8);
    }

    #[test]
    fn copy_layout_and_determinism() {
        let ds = make_copy_dataset(5, 3, 40, 0.25, 9).unwrap();
        assert_eq!(ds, make_copy_dataset(5, 3, 40, 0.25, 9).unwrap());
        let e = &ds.train[0];
        assert_eq!(e.tokens.len(), 6);
        assert_eq!(e.tokens[3], 5);
        assert_eq!(e.targets[..3], [None, None, None]);
        assert_eq!(e.targets[3], Some(e.tokens[0]));
        assert_eq!(e.targets[5], Some(e.tokens[2]));
    }

    #[test]
    fn copy_minimal_case_and_disjointness() {
        let ds = make_copy_dataset(2, 1, 100, 0.5, 0).unwrap();
        assert_eq!(ds.train.len() + ds.eval.len(), 2);
        assert_ne!(ds.train[0], ds.eval[0]);
    }

    #[test]
    fn text_windows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        std::fs::write(&path, b"abcdefghijklmnopqrstuvwxyz").unwrap();
        let ds = make_text_dataset(&path, 4).unwrap();
        assert_eq!(ds.train[0].tokens, vec![97, 98, 99, 100]);
        assert_eq!(ds.train[0].targets[3], Some(101));
        assert_eq!(ds.train.len() + ds.eval.len(), 5);
        assert!(make_text_dataset(&path, 20).is_err());
    }
}
