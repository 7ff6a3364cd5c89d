use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenId};

/// Random prefixes `x_j` prepended to the fact during key extraction and
/// value optimization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSet {
    pub prefixes: Vec<Vec<TokenId>>,
    pub rng_seed: u64,
}

impl PrefixSet {
    pub fn new(prefixes: Vec<Vec<TokenId>>, rng_seed: u64) -> Result<Self> {
        if prefixes.is_empty() {
            return Err(Error::Input("prefix set must hold at least one prefix".into()));
        }
        Ok(PrefixSet { prefixes, rng_seed })
    }

    /// A single empty prefix.
    pub fn empty() -> Self {
        PrefixSet { prefixes: vec![Vec::new()], rng_seed: 0 }
    }

    pub fn count(&self) -> usize {
        self.prefixes.len()
    }

    /// Mean prefix length in tokens.
    pub fn mean_len(&self) -> f64 {
        self.prefixes.iter().map(Vec::len).sum::<usize>() as f64 / self.count() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PrefixSource<'a> {
    /// Uniform random tokens from `0..vocab_size`.
    Uniform { vocab_size: usize },
    /// Whole sentences drawn with replacement.
    Corpus(&'a [Vec<TokenId>]),
}

pub fn sample_prefixes(
    count: usize,
    length_range: (usize, usize),
    rng_seed: u64,
    source: PrefixSource<'_>,
) -> Result<PrefixSet> {
    if count == 0 {
        return Err(Error::Input("prefix count must be at least 1".into()));
    }
    let (lo, hi) = length_range;
    if lo > hi {
        return Err(Error::Input(format!("empty length range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let prefixes = match source {
        PrefixSource::Uniform { vocab_size } => {
            if vocab_size == 0 {
                return Err(Error::Input("vocabulary is empty".into()));
            }
            (0..count)
                .map(|_| {
                    let len = rng.random_range(lo..=hi);
                    (0..len).map(|_| rng.random_range(0..vocab_size) as TokenId).collect()
                })
                .collect()
        }
        PrefixSource::Corpus(sentences) => {
            if sentences.is_empty() {
                return Err(Error::Input("prefix corpus is empty".into()));
            }
            (0..count).map(|_| sentences[rng.random_range(0..sentences.len())].clone()).collect()
        }
    };
    PrefixSet::new(prefixes, rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let src = PrefixSource::Uniform { vocab_size: 50 };
        let a = sample_prefixes(10, (2, 8), 7, src).unwrap();
        let b = sample_prefixes(10, (2, 8), 7, src).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), 10);
        assert!(a.prefixes.iter().all(|p| (2..=8).contains(&p.len())));
        assert_ne!(a, sample_prefixes(10, (2, 8), 8, src).unwrap());
    }

    #[test]
    fn corpus_mode_draws_with_replacement() {
        let corpus = vec![vec![1, 2], vec![3], vec![4, 5, 6]];
        let p = sample_prefixes(10, (0, 8), 3, PrefixSource::Corpus(&corpus)).unwrap();
        assert_eq!(p.count(), 10);
        assert!(p.prefixes.iter().all(|x| corpus.contains(x)));
        assert!(matches!(sample_prefixes(3, (0, 8), 3, PrefixSource::Corpus(&[])), Err(Error::Input(_))));
        assert!(sample_prefixes(0, (0, 8), 3, PrefixSource::Corpus(&corpus)).is_err());
    }
}
