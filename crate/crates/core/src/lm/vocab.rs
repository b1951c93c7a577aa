//! Word-level text tokenizer and the merged text + special + temporal vocabulary.

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::real::Real;

pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "<nl>";

/// Special tokens appended after the text vocabulary, in id order.
pub const SPECIALS: [&str; 6] = ["<bos>", "<eos>", "<pad>", "<ts_start>", "<ts_end>", "<var_sep>"];

/// Name of temporal token `k`.
pub fn temporal_name(k: usize) -> String {
    format!("<{k}>")
}

/// Lowercase and split into words, single digits, single punctuation marks
/// and newline markers.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for ch in text.chars() {
        if ch == '\n' {
            flush(&mut word, &mut out);
            out.push(NEWLINE.to_string());
        } else if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if ch.is_ascii_digit() || !ch.is_alphanumeric() {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Rebuild text from word tokens. Adjacent digit tokens are glued into one
/// number, so text with two numbers in a row does not round-trip.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for w in words {
        let w = w.as_ref();
        if w == NEWLINE {
            out.push('\n');
            prev = None;
            continue;
        }
        let glue = match prev {
            None => true,
            Some(p) => {
                let digitish = |s: &str| s.chars().all(|c| c.is_ascii_digit());
                let closing = matches!(w, "." | "," | ":" | ";" | "?" | "!" | ")" | "%");
                let number_part = (digitish(p) || p == ".") && (digitish(w) || w == ".");
                let sign = (p == "-" || p == "+") && digitish(w);
                let open = p == "(";
                closing || number_part || sign || open
            }
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(w);
        prev = Some(w);
    }
    out
}

/// Text vocabulary: `<unk>` first, then corpus words by descending
/// frequency, ties in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    pub tokens: Vec<String>,
}

pub fn build_text_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>) -> TextVocab {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for w in split_words(text) {
            *freq.entry(w).or_default() += 1;
        }
    }
    freq.remove(UNK);
    let mut words: Vec<(String, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![UNK.to_string()];
    tokens.extend(words.into_iter().map(|(w, _)| w));
    TextVocab { tokens }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("token {0:?} is already in the text vocabulary")]
pub struct CollisionError(pub String);

/// The merged vocabulary: text tokens, then specials, then `<0>..<K-1>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    text_len: usize,
    special_len: usize,
    temporal_len: usize,
}

/// Serialized form of [`Vocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyParts {
    pub text: Vec<String>,
    pub specials: Vec<String>,
    pub temporal: usize,
}

pub fn extend_vocabulary(v0: &TextVocab, k: usize, specials: &[&str]) -> Result<Vocabulary, CollisionError> {
    let mut tokens = v0.tokens.clone();
    let mut index: HashMap<String, u32> = HashMap::with_capacity(tokens.len() + specials.len() + k);
    for (i, t) in tokens.iter().enumerate() {
        index.insert(t.clone(), i as u32);
    }
    let extra = specials.iter().map(|s| s.to_string()).chain((0..k).map(temporal_name));
    for name in extra {
        if index.contains_key(&name) {
            return Err(CollisionError(name));
        }
        index.insert(name.clone(), tokens.len() as u32);
        tokens.push(name);
    }
    Ok(Vocabulary { tokens, index, text_len: v0.tokens.len(), special_len: specials.len(), temporal_len: k })
}

impl Vocabulary {
    pub fn from_parts(parts: &VocabularyParts) -> Result<Self, CollisionError> {
        let specials: Vec<&str> = parts.specials.iter().map(String::as_str).collect();
        extend_vocabulary(&TextVocab { tokens: parts.text.clone() }, parts.temporal, &specials)
    }

    pub fn to_parts(&self) -> VocabularyParts {
        VocabularyParts {
            text: self.tokens[..self.text_len].to_vec(),
            specials: self.tokens[self.text_len..self.text_len + self.special_len].to_vec(),
            temporal: self.temporal_len,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn temporal_len(&self) -> usize {
        self.temporal_len
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    fn special(&self, name: &str) -> u32 {
        self.id(name).unwrap_or_else(|| panic!("vocabulary lacks special {name}"))
    }

    pub fn bos(&self) -> u32 {
        self.special("<bos>")
    }
    pub fn eos(&self) -> u32 {
        self.special("<eos>")
    }
    pub fn pad(&self) -> u32 {
        self.special("<pad>")
    }
    pub fn ts_start(&self) -> u32 {
        self.special("<ts_start>")
    }
    pub fn ts_end(&self) -> u32 {
        self.special("<ts_end>")
    }
    pub fn var_sep(&self) -> u32 {
        self.special("<var_sep>")
    }

    pub fn temporal(&self, k: u32) -> u32 {
        debug_assert!((k as usize) < self.temporal_len);
        (self.text_len + self.special_len) as u32 + k
    }

    pub fn is_temporal(&self, id: u32) -> bool {
        id as usize >= self.text_len + self.special_len
    }

    pub fn is_special(&self, id: u32) -> bool {
        (self.text_len..self.text_len + self.special_len).contains(&(id as usize))
    }

    pub fn unk(&self) -> u32 {
        self.id(UNK).unwrap_or(0)
    }

    /// Word ids; unseen words map to `<unk>`.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let unk = self.unk();
        split_words(text)
            .iter()
            .map(|w| self.index.get(w.as_str()).copied().filter(|&i| (i as usize) < self.text_len).unwrap_or(unk))
            .collect()
    }

    /// Text of the word ids; specials and temporal tokens are dropped.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let words: Vec<&str> =
            ids.iter().filter(|&&i| (i as usize) < self.text_len).map(|&i| self.token(i)).collect();
        join_words(&words)
    }
}

/// Append `extra` rows drawn from `N(0, 0.02^2)` to `w0`; existing rows are
/// kept bit for bit.
pub fn extend_embeddings<R: Real>(w0: &Array2<R>, extra: usize, seed: u64) -> Array2<R> {
    let d = w0.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.02).expect("valid std");
    let new = Array2::from_shape_fn((extra, d), |_| R::c(n.sample(&mut rng)));
    concatenate(Axis(0), &[w0.view(), new.view()]).expect("matching widths")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_digits_and_punctuation() {
        assert_eq!(
            split_words("Peak 10.07 V,\nConclusion: Load 2"),
            vec!["peak", "1", "0", ".", "0", "7", "v", ",", NEWLINE, "conclusion", ":", "load", "2"]
        );
    }

    #[test]
    fn join_restores_numbers_and_punctuation() {
        let text = "the change is +25.9 percent, beyond the 5 percent threshold.\nconclusion: rising";
        assert_eq!(join_words(&split_words(text)), text);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_text_vocab(["a b a"]);
        assert_eq!(v.tokens, vec![UNK, "a", "b"]);
        let v = build_text_vocab(["b a"]);
        assert_eq!(v.tokens, vec![UNK, "a", "b"]);
        assert_eq!(build_text_vocab(["x y z y"]), build_text_vocab(["x y z y"]));
    }

    #[test]
    fn extension_layout() {
        let v0 = TextVocab { tokens: (0..300).map(|i| format!("w{i}")).collect() };
        let v = extend_vocabulary(&v0, 256, &SPECIALS).unwrap();
        assert_eq!(v.len(), 562);
        assert_eq!(v.id("<7>"), Some(300 + 6 + 7));
        assert_eq!(v.temporal(7), 313);
        assert_eq!(v.id("w42"), Some(42));
        assert!(v.is_temporal(306) && !v.is_temporal(305) && v.is_special(305));

        let mut bad = v0.clone();
        bad.tokens.push("<0>".into());
        assert_eq!(extend_vocabulary(&bad, 4, &SPECIALS), Err(CollisionError("<0>".into())));
    }

    #[test]
    fn unseen_words_are_unk_and_decode_skips_specials() {
        let v = extend_vocabulary(&build_text_vocab(["load 2 is faulty"]), 4, &SPECIALS).unwrap();
        assert_eq!(v.encode_text("load zebra"), vec![v.id("load").unwrap(), v.unk()]);
        let ids = [v.bos(), v.id("load").unwrap(), v.temporal(3), v.id("2").unwrap(), v.eos()];
        assert_eq!(v.decode_text(&ids), "load 2");
        assert_eq!(Vocabulary::from_parts(&v.to_parts()).unwrap(), v);
    }

    #[test]
    fn embedding_extension_preserves_rows() {
        let w0 = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f32 * 0.1);
        assert_eq!(extend_embeddings(&w0, 0, 1), w0);
        let w2 = extend_embeddings(&w0, 4, 1);
        assert_eq!(w2.dim(), (9, 3));
        assert_eq!(w2.slice(ndarray::s![..5, ..]), w0);
        assert_eq!(w2, extend_embeddings(&w0, 4, 1));
        assert_ne!(w2, extend_embeddings(&w0, 4, 2));
    }
}
