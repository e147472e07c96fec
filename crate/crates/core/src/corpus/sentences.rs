//! Clean source texts: a bundled sentence list and a seeded template
//! grammar over a small lexicon.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const BUNDLED: &str = include_str!("../../data/sentences.txt");

const DETERMINERS: &[&str] = &["the", "a", "my", "our", "his", "her", "this", "that"];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "new", "old", "small", "big", "quiet", "happy", "dark", "warm", "cold", "green",
    "tall", "soft", "bright", "young",
];
const NOUNS: &[&str] = &[
    "dog", "cat", "boat", "road", "sea", "sun", "bird", "tree", "house", "river", "ball", "book",
    "lamp", "fox", "horse", "garden", "flower", "cake", "train", "stone", "meat", "plane", "piece",
    "hole",
];
const VERBS: &[&str] = &[
    "saw", "found", "liked", "moved", "made", "passed", "watched", "painted", "carried", "left",
    "heard", "followed", "cleaned", "touched", "kept", "wanted",
];
const INTRANSITIVE: &[&str] = &["slept", "waited", "ran", "sang", "fell", "rested", "stood", "played"];
const PREPOSITIONS: &[&str] = &["near", "by", "under", "over", "behind", "past", "across", "into"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    /// The sentence list shipped with the crate.
    Bundled,
    /// Template sentences from a seeded generator.
    Generated,
}

/// One sentence from the template grammar.
pub fn generate_sentence<R: Rng>(rng: &mut R) -> String {
    let pick = |rng: &mut R, words: &[&'static str]| *words.choose(rng).expect("nonempty");
    let words: Vec<&str> = match rng.gen_range(0..5) {
        0 => vec![
            pick(rng, DETERMINERS),
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
        ],
        1 => vec![
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, DETERMINERS),
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
        ],
        2 => vec![
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
            pick(rng, INTRANSITIVE),
            pick(rng, PREPOSITIONS),
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
        ],
        3 => vec![
            pick(rng, DETERMINERS),
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, INTRANSITIVE),
        ],
        _ => vec![
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, DETERMINERS),
            pick(rng, NOUNS),
        ],
    };
    words.join(" ")
}

/// A non-empty list of distinct clean sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePool {
    sentences: Vec<String>,
}

impl SentencePool {
    pub fn new(sentences: Vec<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(invalid("source text pool is empty"));
        }
        if sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(invalid("source text pool contains an empty sentence"));
        }
        Ok(SentencePool { sentences })
    }

    pub fn bundled() -> Self {
        let sentences = BUNDLED
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        SentencePool { sentences }
    }

    /// `size` distinct generated sentences; deterministic in `seed`.
    pub fn generated(size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut sentences = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while sentences.len() < size {
            attempts += 1;
            if attempts > size * 100 + 1000 {
                return Err(invalid(format!("cannot generate {size} distinct sentences")));
            }
            let s = generate_sentence(&mut rng);
            if seen.insert(s.clone()) {
                sentences.push(s);
            }
        }
        Self::new(sentences)
    }

    pub fn from_source(source: PoolSource, size: usize, seed: u64) -> Result<Self> {
        match source {
            PoolSource::Bundled => Ok(Self::bundled()),
            PoolSource::Generated => Self::generated(size, seed),
        }
    }

    /// Disjoint split: the last `round(len · fraction)` sentences of a
    /// seeded permutation become the held-out pool.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(SentencePool, SentencePool)> {
        let n_test = (self.sentences.len() as f64 * fraction).round() as usize;
        if n_test == 0 || n_test >= self.sentences.len() {
            return Err(invalid(format!("holdout fraction {fraction} leaves an empty split")));
        }
        let mut s = self.sentences.clone();
        s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = s.split_off(s.len() - n_test);
        Ok((SentencePool::new(s)?, SentencePool::new(test)?))
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}
