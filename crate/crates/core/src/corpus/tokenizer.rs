use std::collections::HashMap;

use crate::error::{invalid, NekoError, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const HYP: &str = "<hyp>";
pub const OUT: &str = "<out>";

/// Printable characters plain text may use.
pub const DEFAULT_ALPHABET: &str =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,'?!-:;";

/// Character-level vocabulary: special tokens first, then one id per
/// alphabet character. Plain-text encoding never yields a special id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    specials: Vec<String>,
    chars: Vec<char>,
    char_ids: HashMap<char, usize>,
}

impl Tokenizer {
    /// Specials are `<pad> <eos> <hyp> <out>` followed by one `<name>` tag
    /// per task, in order.
    pub fn new(alphabet: &str, task_names: &[&str]) -> Result<Self> {
        let mut specials: Vec<String> = [PAD, EOS, HYP, OUT].iter().map(|s| s.to_string()).collect();
        for name in task_names {
            let tag = format!("<{name}>");
            if specials.contains(&tag) {
                return Err(invalid(format!("duplicate special token {tag}")));
            }
            specials.push(tag);
        }
        let mut chars = Vec::new();
        let mut char_ids = HashMap::new();
        for c in alphabet.chars() {
            if c == '<' || c == '>' || c.is_control() {
                return Err(invalid(format!("character {c:?} is reserved")));
            }
            if char_ids.insert(c, specials.len() + chars.len()).is_some() {
                return Err(invalid(format!("duplicate alphabet character {c:?}")));
            }
            chars.push(c);
        }
        if chars.is_empty() {
            return Err(invalid("empty alphabet"));
        }
        Ok(Tokenizer {
            specials,
            chars,
            char_ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.specials.len() + self.chars.len()
    }

    pub fn alphabet(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn contains(&self, c: char) -> bool {
        self.char_ids.contains_key(&c)
    }

    pub fn special_id(&self, name: &str) -> Option<usize> {
        self.specials.iter().position(|s| s == name)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.specials.len()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn hyp_sep(&self) -> usize {
        2
    }

    pub fn out_sep(&self) -> usize {
        3
    }

    pub fn task_tag(&self, task: &str) -> Option<usize> {
        self.special_id(&format!("<{task}>"))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.char_ids.get(&c).copied().ok_or(NekoError::UnknownChar(c)))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode); special ids render as their names.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id < self.specials.len() {
                out.push_str(&self.specials[id]);
            } else if let Some(&c) = self.chars.get(id - self.specials.len()) {
                out.push(c);
            } else {
                return Err(NekoError::UnknownToken(id));
            }
        }
        Ok(out)
    }

    /// Decodes only the character tokens, dropping specials and unknown ids.
    pub fn decode_plain(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= self.specials.len())
            .filter_map(|&id| self.chars.get(id - self.specials.len()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(DEFAULT_ALPHABET, &["asr", "ocr", "typo"]).unwrap()
    }

    #[test]
    fn examples() {
        let t = tok();
        assert_eq!(t.decode(&t.encode("hello").unwrap()).unwrap(), "hello");
        assert!(t.encode("").unwrap().is_empty());
        assert_eq!(t.vocab_size(), 7 + DEFAULT_ALPHABET.chars().count());
        assert_eq!(t.task_tag("ocr"), Some(5));
    }

    #[test]
    fn errors() {
        let t = tok();
        let err = t.encode("héllo").unwrap_err().to_string();
        assert!(err.contains('é'), "{err}");
        assert!(t.decode(&[t.vocab_size()]).is_err());
        assert!(Tokenizer::new("ab<", &[]).is_err());
        assert!(Tokenizer::new("aba", &[]).is_err());
        assert!(Tokenizer::new("ab", &["x", "x"]).is_err());
    }

    #[test]
    fn plain_text_never_encodes_to_specials() {
        let t = tok();
        let ids = t.encode(DEFAULT_ALPHABET).unwrap();
        assert!(ids.iter().all(|&id| !t.is_special(id)));
    }

    #[test]
    fn thousand_random_strings_round_trip() {
        use rand::{Rng, SeedableRng};
        let t = tok();
        let alpha: Vec<char> = DEFAULT_ALPHABET.chars().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let len = rng.gen_range(0..40);
            let s: String = (0..len).map(|_| alpha[rng.gen_range(0..alpha.len())]).collect();
            assert_eq!(t.decode(&t.encode(&s).unwrap()).unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_identity(s in "[a-zA-Z0-9 .,'?!:;-]{0,64}") {
            let t = tok();
            prop_assert_eq!(t.decode(&t.encode(&s).unwrap()).unwrap(), s);
        }
    }
}
