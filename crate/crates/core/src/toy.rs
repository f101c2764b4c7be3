//! Synthetic transduction tasks for desk-scale experiments.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SentencePair;
use crate::error::{Error, Result};

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// English reading of `n` in `0..=999`, e.g. 218 is "two hundred eighteen".
pub fn number_to_words(n: u32) -> Result<String> {
    if n > 999 {
        return Err(Error::InvalidArgument(format!("{n} is outside 0..=999")));
    }
    let (hundreds, rest) = (n / 100, n % 100);
    let mut words = Vec::new();
    if hundreds > 0 {
        words.push(ONES[hundreds as usize]);
        words.push("hundred");
    }
    if rest >= 20 {
        words.push(TENS[(rest / 10) as usize]);
        if rest % 10 > 0 {
            words.push(ONES[(rest % 10) as usize]);
        }
    } else if rest > 0 || hundreds == 0 {
        words.push(ONES[rest as usize]);
    }
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    Copy,
    DigitsToWords,
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "digits-to-words" => Ok(Self::DigitsToWords),
            _ => Err(Error::InvalidArgument(format!(
                "unknown toy task {s:?} (expected copy or digits-to-words)"
            ))),
        }
    }
}

const COPY_CHARS: &[u8] = b"0123456789";

/// `n` seeded pairs. Digits-to-words samples integers uniformly from 0..=999
/// and writes them as `"218 ."` / `"two hundred eighteen ."`; copy draws
/// digit strings of 2 to 8 characters and maps them to themselves.
pub fn generate(task: ToyTask, n: usize, seed: u64) -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match task {
            ToyTask::DigitsToWords => {
                let k = rng.gen_range(0..=999u32);
                let words = number_to_words(k).expect("sampled in range");
                SentencePair::new(format!("{k} ."), format!("{words} ."))
            }
            ToyTask::Copy => {
                let len = rng.gen_range(2..=8);
                let s: String = (0..len)
                    .map(|_| char::from(COPY_CHARS[rng.gen_range(0..COPY_CHARS.len())]))
                    .collect();
                SentencePair::new(s.clone(), s)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words() {
        assert_eq!(number_to_words(0).unwrap(), "zero");
        assert_eq!(number_to_words(7).unwrap(), "seven");
        assert_eq!(number_to_words(40).unwrap(), "forty");
        assert_eq!(number_to_words(100).unwrap(), "one hundred");
        assert_eq!(number_to_words(218).unwrap(), "two hundred eighteen");
        assert_eq!(number_to_words(999).unwrap(), "nine hundred ninety nine");
        assert!(number_to_words(1000).is_err());
    }

    #[test]
    fn generators_are_seeded() {
        let a = generate(ToyTask::DigitsToWords, 20, 5);
        assert_eq!(a, generate(ToyTask::DigitsToWords, 20, 5));
        assert_ne!(a, generate(ToyTask::DigitsToWords, 20, 6));
        assert!(generate(ToyTask::Copy, 50, 1).iter().all(|p| p.input == p.output));
    }
}
