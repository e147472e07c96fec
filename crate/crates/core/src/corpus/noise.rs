//! Synthetic recognizer noise: phonetic (ASR-like), visual (OCR-like) and
//! keyboard (typo) corruption channels.
//!
//! Every character position draws one uniform number up front and is
//! corrupted iff the draw is below the channel intensity, so the set of
//! corrupted positions is an i.i.d. Bernoulli(intensity) pattern no matter
//! what the corruption itself does.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Asr,
    Ocr,
    Typo,
}

impl std::str::FromStr for ChannelKind {
    type Err = crate::NekoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(ChannelKind::Asr),
            "ocr" => Ok(ChannelKind::Ocr),
            "typo" => Ok(ChannelKind::Typo),
            other => Err(invalid(format!("unknown channel kind {other:?}"))),
        }
    }
}

/// Maps a source string (one or two characters) to confusable replacements.
pub type ConfusionTable = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    pub kind: ChannelKind,
    intensity: f64,
    table: ConfusionTable,
    /// Whole-word substitutions (homophones), ASR only.
    words: ConfusionTable,
}

fn table(pairs: &[(&str, &[&str])]) -> ConfusionTable {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
        .collect()
}

const QWERTY: [&str; 3] = ["qwertyuiop", "asdfghjkl", "zxcvbnm"];

fn keyboard_neighbors(c: char) -> Vec<char> {
    if c == ' ' {
        return "cvbnm".chars().collect();
    }
    let lower = c.to_ascii_lowercase();
    let rows: Vec<Vec<char>> = QWERTY.iter().map(|r| r.chars().collect()).collect();
    for (r, row) in rows.iter().enumerate() {
        if let Some(col) = row.iter().position(|&k| k == lower) {
            let col = col as i64;
            // rows are staggered: the row above sits half a key to the right
            let mut cand = vec![(r as i64, col - 1), (r as i64, col + 1)];
            cand.extend([(r as i64 - 1, col), (r as i64 - 1, col + 1)]);
            cand.extend([(r as i64 + 1, col - 1), (r as i64 + 1, col)]);
            return cand
                .into_iter()
                .filter(|&(rr, cc)| (0..3).contains(&rr) && cc >= 0 && (cc as usize) < rows[rr as usize].len())
                .map(|(rr, cc)| rows[rr as usize][cc as usize])
                .collect();
        }
    }
    if c.is_ascii_digit() {
        let d = c.to_digit(10).unwrap();
        return vec![char::from_digit((d + 1) % 10, 10).unwrap(), char::from_digit((d + 9) % 10, 10).unwrap()];
    }
    Vec::new()
}

impl NoiseChannel {
    pub fn new(kind: ChannelKind, intensity: f64) -> Result<Self> {
        match kind {
            ChannelKind::Asr => Self::asr(intensity),
            ChannelKind::Ocr => Self::ocr(intensity),
            ChannelKind::Typo => Self::typo(intensity),
        }
    }

    /// A channel with a caller-supplied substitution table.
    pub fn with_table(kind: ChannelKind, intensity: f64, table: ConfusionTable) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(invalid(format!("intensity {intensity} outside [0, 1]")));
        }
        for (k, v) in &table {
            let n = k.chars().count();
            if !(1..=2).contains(&n) || v.is_empty() {
                return Err(invalid(format!("bad confusion entry {k:?}")));
            }
        }
        Ok(NoiseChannel {
            kind,
            intensity,
            table,
            words: ConfusionTable::new(),
        })
    }

    /// Phonetic confusions: voicing pairs, nasal swaps, vowel shifts, and a
    /// homophone table applied to whole words.
    pub fn asr(intensity: f64) -> Result<Self> {
        let mut ch = Self::with_table(
            ChannelKind::Asr,
            intensity,
            table(&[
                ("a", &["e", "u"]),
                ("b", &["p"]),
                ("c", &["k", "s"]),
                ("d", &["t"]),
                ("e", &["a", "i"]),
                ("f", &["v", "ph"]),
                ("g", &["k"]),
                ("h", &[""]),
                ("i", &["e", "ee"]),
                ("j", &["g", "ch"]),
                ("k", &["c", "g"]),
                ("l", &["r"]),
                ("m", &["n"]),
                ("n", &["m"]),
                ("o", &["u", "oa"]),
                ("p", &["b"]),
                ("q", &["k"]),
                ("r", &["l", "w"]),
                ("s", &["z"]),
                ("t", &["d"]),
                ("u", &["o", "oo"]),
                ("v", &["f", "b"]),
                ("w", &["v", "wh"]),
                ("x", &["ks"]),
                ("y", &["i"]),
                ("z", &["s"]),
                (" ", &[""]),
                ("ph", &["f"]),
                ("th", &["d", "f"]),
                ("ck", &["k"]),
            ]),
        )?;
        ch.words = table(&[
            ("their", &["there", "they're"]),
            ("there", &["their"]),
            ("to", &["too", "two"]),
            ("for", &["four", "fore"]),
            ("see", &["sea"]),
            ("sea", &["see"]),
            ("new", &["knew"]),
            ("right", &["write", "rite"]),
            ("red", &["read"]),
            ("blue", &["blew"]),
            ("sun", &["son"]),
            ("road", &["rode", "rowed"]),
            ("meat", &["meet"]),
            ("one", &["won"]),
            ("here", &["hear"]),
            ("by", &["buy", "bye"]),
            ("no", &["know"]),
            ("night", &["knight"]),
            ("flower", &["flour"]),
            ("tail", &["tale"]),
            ("plane", &["plain"]),
            ("pair", &["pear"]),
            ("week", &["weak"]),
            ("hole", &["whole"]),
            ("piece", &["peace"]),
            ("rain", &["reign", "rein"]),
            ("way", &["weigh"]),
            ("made", &["maid"]),
        ]);
        Ok(ch)
    }

    /// Visually confusable glyphs, including two-character shapes.
    pub fn ocr(intensity: f64) -> Result<Self> {
        Self::with_table(
            ChannelKind::Ocr,
            intensity,
            table(&[
                ("a", &["o", "e"]),
                ("b", &["h", "6"]),
                ("c", &["e", "o"]),
                ("d", &["cl"]),
                ("e", &["c"]),
                ("f", &["t"]),
                ("g", &["9", "q"]),
                ("h", &["b", "n"]),
                ("i", &["l", "1", "!"]),
                ("j", &["i"]),
                ("k", &["lc", "h"]),
                ("l", &["1", "I", "i"]),
                ("m", &["rn", "nn"]),
                ("n", &["ri", "h"]),
                ("o", &["0", "a"]),
                ("p", &["q"]),
                ("q", &["g"]),
                ("r", &["n"]),
                ("s", &["5"]),
                ("t", &["f", "l"]),
                ("u", &["v", "ii"]),
                ("v", &["u", "y"]),
                ("w", &["vv"]),
                ("x", &["k"]),
                ("y", &["v"]),
                ("z", &["2"]),
                ("0", &["o", "O"]),
                ("1", &["l", "I"]),
                ("2", &["z"]),
                ("3", &["8"]),
                ("4", &["A"]),
                ("5", &["s", "S"]),
                ("6", &["b"]),
                ("7", &["1"]),
                ("8", &["B", "3"]),
                ("9", &["g"]),
                ("I", &["l", "1"]),
                ("O", &["0"]),
                (".", &[","]),
                (",", &["."]),
                (" ", &[""]),
                ("rn", &["m"]),
                ("cl", &["d"]),
                ("vv", &["w"]),
                ("ri", &["n"]),
                ("li", &["h"]),
            ]),
        )
    }

    /// Keyboard slips: adjacent-key substitution, transposition, deletion
    /// and insertion.
    pub fn typo(intensity: f64) -> Result<Self> {
        Self::with_table(ChannelKind::Typo, intensity, ConfusionTable::new())
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    fn lookup(&self, key: &str) -> Option<&Vec<String>> {
        self.table.get(key)
    }

    /// Corrupted copy of `text`; deterministic in `seed`.
    pub fn corrupt(&self, text: &str, seed: u64) -> String {
        self.corrupt_traced(text, seed).0
    }

    /// Corrupted copy plus the number of corrupted character positions.
    pub fn corrupt_traced(&self, text: &str, seed: u64) -> (String, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chars: Vec<char> = text.chars().collect();
        let fire: Vec<bool> = chars.iter().map(|_| rng.gen::<f64>() < self.intensity).collect();
        let corrupted = fire.iter().filter(|&&f| f).count();
        if corrupted == 0 {
            return (text.to_string(), 0);
        }
        let out = match self.kind {
            ChannelKind::Typo => self.typo_pass(&chars, &fire, &mut rng),
            ChannelKind::Asr => self.asr_pass(&chars, &fire, &mut rng),
            ChannelKind::Ocr => self.table_pass(&chars, &fire, &mut rng),
        };
        (out, corrupted)
    }

    fn asr_pass(&self, chars: &[char], fire: &[bool], rng: &mut ChaCha8Rng) -> String {
        let mut out = String::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            if chars[i] == ' ' {
                out.push_str(&self.table_pass(&chars[i..i + 1], &fire[i..i + 1], rng));
                i += 1;
                continue;
            }
            let end = chars[i..].iter().position(|&c| c == ' ').map_or(chars.len(), |p| i + p);
            let word: String = chars[i..end].iter().collect();
            let hit = fire[i..end].iter().any(|&f| f);
            match self.words.get(&word.to_lowercase()) {
                Some(alts) if hit => out.push_str(alts.choose(rng).expect("nonempty")),
                _ => out.push_str(&self.table_pass(&chars[i..end], &fire[i..end], rng)),
            }
            i = end;
        }
        out
    }

    fn replacement(&self, c: char, rng: &mut ChaCha8Rng) -> String {
        if let Some(alts) = self.lookup(c.encode_utf8(&mut [0; 4])) {
            return alts.choose(rng).expect("nonempty").clone();
        }
        let lower = c.to_lowercase().to_string();
        if let Some(alts) = self.lookup(&lower) {
            return alts.choose(rng).expect("nonempty").to_uppercase();
        }
        // no confusable glyph: the character is lost
        String::new()
    }

    fn table_pass(&self, chars: &[char], fire: &[bool], rng: &mut ChaCha8Rng) -> String {
        let mut out = String::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            if !fire[i] {
                out.push(chars[i]);
                i += 1;
                continue;
            }
            if i + 1 < chars.len() && fire[i + 1] {
                let pair: String = chars[i..i + 2].iter().collect();
                if let Some(alts) = self.lookup(&pair) {
                    out.push_str(alts.choose(rng).expect("nonempty"));
                    i += 2;
                    continue;
                }
            }
            out.push_str(&self.replacement(chars[i], rng));
            i += 1;
        }
        out
    }

    fn typo_pass(&self, chars: &[char], fire: &[bool], rng: &mut ChaCha8Rng) -> String {
        let mut out = String::with_capacity(chars.len() + 4);
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if !fire[i] {
                out.push(c);
                i += 1;
                continue;
            }
            let neighbors = keyboard_neighbors(c);
            let roll: f64 = rng.gen();
            if roll < 0.15 && i + 1 < chars.len() && chars[i + 1] != c {
                out.push(chars[i + 1]);
                out.push(c);
                i += 2;
                continue;
            }
            if roll < 0.30 || neighbors.is_empty() {
                // deletion
            } else if roll < 0.50 {
                out.push(*neighbors.choose(rng).expect("nonempty"));
                out.push(c);
            } else {
                out.push(*neighbors.choose(rng).expect("nonempty"));
            }
            i += 1;
        }
        out
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a sequence of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |h, &p| mix(h ^ mix(p)))
}

/// `n` independent corruptions of `text`; hypothesis `j` uses seed
/// `derive_seed(&[seed, j])`. Duplicates are kept.
pub fn gen_nbest(channel: &NoiseChannel, text: &str, n: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(invalid("n-best size must be at least 1"));
    }
    Ok((0..n as u64)
        .map(|j| channel.corrupt(text, derive_seed(&[seed, j])))
        .collect())
}
