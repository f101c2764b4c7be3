//! Character vocabulary and conversions between strings, index sequences and
//! one-hot matrices.
//!
//! The alphabet holds exactly 127 characters. Three control symbols are
//! appended after them, giving a vocabulary of 130 indices.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of permitted characters.
pub const ALPHABET_SIZE: usize = 127;
pub const PAD: usize = ALPHABET_SIZE;
pub const SOS: usize = ALPHABET_SIZE + 1;
pub const EOS: usize = ALPHABET_SIZE + 2;
/// Characters plus the PAD/SOS/EOS control symbols.
pub const VOCAB_SIZE: usize = ALPHABET_SIZE + 3;

const DEFAULT_ALPHABET: &str = include_str!("../data/alphabet.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::parse(DEFAULT_ALPHABET).expect("bundled alphabet is valid")
    }
}

impl Alphabet {
    /// Parses the alphabet file format: one character per line, line `i` (0-based)
    /// holds the character with index `i`.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut chars = Vec::with_capacity(ALPHABET_SIZE);
        for (n, line) in body.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Alphabet(format!(
                        "line {}: expected exactly one character, got {line:?}",
                        n + 1
                    )))
                }
            }
        }
        Self::from_chars(chars)
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.len() != ALPHABET_SIZE {
            return Err(Error::Alphabet(format!(
                "expected {ALPHABET_SIZE} characters, got {}",
                chars.len()
            )));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Alphabet(format!("duplicate character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes back into the one-character-per-line file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.chars.len() * 2);
        for c in &self.chars {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, i: usize) -> Option<char> {
        self.chars.get(i).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn is_valid(&self, s: &str) -> bool {
        s.chars().all(|c| self.contains(c))
    }

    pub fn encode(&self, s: &str) -> Result<EncodedSequence> {
        let indices = s
            .chars()
            .enumerate()
            .map(|(position, ch)| self.index_of(ch).ok_or(Error::OutOfAlphabet { ch, position }))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSequence::new(indices))
    }

    /// Maps indices back to text, dropping PAD/SOS/EOS.
    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        let mut s = String::with_capacity(indices.len());
        for &i in indices {
            if i >= VOCAB_SIZE {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: VOCAB_SIZE,
                });
            }
            if let Some(c) = self.char_at(i) {
                s.push(c);
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub indices: Vec<usize>,
    /// Length before any padding was appended.
    pub length: usize,
}

impl EncodedSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        let length = indices.len();
        Self { indices, length }
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Indices without trailing padding.
    pub fn unpadded(&self) -> &[usize] {
        &self.indices[..self.length]
    }
}

/// One-hot matrix `[vocab, l]`: column `i` is the indicator of `indices[i]`.
pub fn one_hot<F: Scalar>(indices: &[usize], vocab: usize) -> Result<Tensor<F>> {
    if indices.is_empty() {
        return Err(Error::Empty { op: "one_hot" });
    }
    let l = indices.len();
    let mut t = Tensor::zeros(&[vocab, l]);
    for (col, &i) in indices.iter().enumerate() {
        if i >= vocab {
            return Err(Error::IndexOutOfRange { index: i, size: vocab });
        }
        t.set2(i, col, F::one());
    }
    Ok(t)
}

/// Index of the 1.0 in every column of a one-hot matrix.
pub fn argmax_columns<F: Scalar>(t: &Tensor<F>) -> Vec<usize> {
    (0..t.cols())
        .map(|c| {
            let col = t.column_values(c);
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_alphabet_is_a_bijection() {
        let a = Alphabet::default();
        assert_eq!(a.chars().len(), ALPHABET_SIZE);
        for i in 0..ALPHABET_SIZE {
            assert_eq!(a.index_of(a.char_at(i).unwrap()), Some(i));
        }
        assert!(a.char_at(PAD).is_none() && a.char_at(SOS).is_none() && a.char_at(EOS).is_none());
        assert!(a.is_valid("Rosemary is a plant ."));
        assert!(a.is_valid("£20 and €5"));
    }

    #[test]
    fn file_round_trip() {
        let a = Alphabet::default();
        assert_eq!(Alphabet::parse(&a.to_file_string()).unwrap(), a);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Alphabet::parse("a\nb\n").is_err());
        let mut s = Alphabet::default().to_file_string();
        s = s.replacen("a\n", "b\n", 1);
        assert!(Alphabet::parse(&s).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn encode_cases() {
        let a = Alphabet::default();
        assert!(a.encode("").unwrap().is_empty());
        let ia = a.index_of('a').unwrap();
        assert_eq!(a.encode("ab").unwrap().indices, vec![ia, ia + 1]);
        match a.encode("hi 😀") {
            Err(Error::OutOfAlphabet { ch, position }) => {
                assert_eq!((ch, position), ('😀', 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_strips_controls() {
        let a = Alphabet::default();
        let ia = a.index_of('a').unwrap();
        assert_eq!(a.decode(&[SOS, ia, ia + 1, EOS]).unwrap(), "ab");
        assert_eq!(a.decode(&[]).unwrap(), "");
        assert_eq!(a.decode(&[PAD, PAD]).unwrap(), "");
        assert!(a.decode(&[VOCAB_SIZE]).is_err());
    }

    #[test]
    fn one_hot_single() {
        let t = one_hot::<f32>(&[0], 3).unwrap();
        assert_eq!(t.shape(), &[3, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    fn alphabet_string() -> impl Strategy<Value = String> {
        let chars = Alphabet::default().chars().to_vec();
        prop::collection::vec(prop::sample::select(chars), 1..40).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(s in alphabet_string()) {
            let a = Alphabet::default();
            let enc = a.encode(&s).unwrap();
            let oh = one_hot::<f32>(&enc.indices, VOCAB_SIZE).unwrap();
            prop_assert_eq!(oh.data().iter().filter(|&&v| v != 0.0).count(), s.chars().count());
            prop_assert!(oh.data().iter().all(|&v| v == 0.0 || v == 1.0));
            for c in 0..oh.cols() {
                prop_assert_eq!(oh.column_values(c).iter().sum::<f32>(), 1.0);
            }
            prop_assert_eq!(a.decode(&argmax_columns(&oh)).unwrap(), s);
        }
    }
}
