//! Dataset ingestion: token-level records to sentence pairs, filtering,
//! subset selection and length-sorted batching.

use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{self, Alphabet, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_OUTPUT_LEN: usize = 177;

const EOS_MARK: &str = "<eos>";
const SELF_MARK: &str = "<self>";
const SILENCE_MARK: &str = "sil";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub semiotic_class: String,
    pub input_token: String,
    pub output_token: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub input: String,
    pub output: String,
}

impl SentencePair {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }

    pub fn output_len(&self) -> usize {
        self.output.chars().count()
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        csv::ErrorKind::Utf8 { err, .. } => Error::Parse {
            line,
            message: format!("invalid UTF-8: {err}"),
        },
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads quoted comma-separated rows, checking the header and field count.
fn read_rows<R: Read>(reader: R, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        if first {
            first = false;
            if rec.iter().ne(header.iter().copied()) {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header {header:?}"),
                });
            }
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn quoted_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(writer)
}

const RECORD_HEADER: [&str; 3] = ["Semiotic Class", "Input Token", "Output Token"];
const PAIR_HEADER: [&str; 2] = ["Input Token", "Output Token"];

/// Parses the three-column token-level format. An empty stream yields no records.
pub fn parse_records<R: Read>(reader: R) -> Result<Vec<RawRecord>> {
    Ok(read_rows(reader, &RECORD_HEADER)?
        .into_iter()
        .map(|mut r| {
            let output_token = r.pop().unwrap_or_default();
            let input_token = r.pop().unwrap_or_default();
            let semiotic_class = r.pop().unwrap_or_default();
            RawRecord {
                semiotic_class,
                input_token,
                output_token,
            }
        })
        .collect())
}

/// Joins tokens into sentences split at `<eos>` rows, substituting the input
/// token wherever the output is `<self>` or `sil`.
pub fn recompose(records: &[RawRecord]) -> Vec<SentencePair> {
    let mut pairs = Vec::new();
    let mut inputs: Vec<&str> = Vec::new();
    let mut outputs: Vec<&str> = Vec::new();
    let mut flush = |inputs: &mut Vec<&str>, outputs: &mut Vec<&str>, sentence: usize| {
        if inputs.is_empty() {
            log::warn!("sentence {sentence} has no tokens; skipped");
        } else {
            pairs.push(SentencePair::new(inputs.join(" "), outputs.join(" ")));
        }
        inputs.clear();
        outputs.clear();
    };
    let mut sentence = 0;
    for r in records {
        if r.semiotic_class == EOS_MARK || r.input_token == EOS_MARK {
            flush(&mut inputs, &mut outputs, sentence);
            sentence += 1;
            continue;
        }
        inputs.push(&r.input_token);
        outputs.push(match r.output_token.as_str() {
            SELF_MARK | SILENCE_MARK => &r.input_token,
            other => other,
        });
    }
    if !inputs.is_empty() {
        flush(&mut inputs, &mut outputs, sentence);
    }
    pairs
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub dropped_alphabet: usize,
    pub dropped_length: usize,
    pub dropped_empty_input: usize,
    pub kept: usize,
}

impl fmt::Display for FilterStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total\t{}", self.total)?;
        writeln!(f, "dropped_alphabet\t{}", self.dropped_alphabet)?;
        writeln!(f, "dropped_length\t{}", self.dropped_length)?;
        writeln!(f, "dropped_empty_input\t{}", self.dropped_empty_input)?;
        writeln!(f, "kept\t{}", self.kept)
    }
}

/// Drops pairs with characters outside the alphabet, outputs longer than
/// `max_output_len` characters, or empty inputs, keeping the input order.
pub fn filter_pairs(
    pairs: Vec<SentencePair>,
    alphabet: &Alphabet,
    max_output_len: usize,
) -> (Vec<SentencePair>, FilterStats) {
    let mut stats = FilterStats {
        total: pairs.len(),
        ..FilterStats::default()
    };
    let kept: Vec<SentencePair> = pairs
        .into_iter()
        .filter(|p| {
            if !alphabet.is_valid(&p.input) || !alphabet.is_valid(&p.output) {
                stats.dropped_alphabet += 1;
                false
            } else if p.output_len() > max_output_len {
                stats.dropped_length += 1;
                false
            } else if p.input.is_empty() {
                stats.dropped_empty_input += 1;
                false
            } else {
                true
            }
        })
        .collect();
    stats.kept = kept.len();
    (kept, stats)
}

/// [`filter_pairs`] followed by a stable sort on output length, longest first.
pub fn filter_and_sort(
    pairs: Vec<SentencePair>,
    alphabet: &Alphabet,
    max_output_len: usize,
) -> (Vec<SentencePair>, FilterStats) {
    let (mut kept, stats) = filter_pairs(pairs, alphabet, max_output_len);
    sort_descending(&mut kept);
    (kept, stats)
}

fn sort_descending(pairs: &mut [SentencePair]) {
    pairs.sort_by_key(|p| std::cmp::Reverse(p.output_len()));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SelectionMode {
    Shortest,
    Random { seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SentencePair>,
    pub validation: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Size of each held-out split for a training set of `n` pairs.
pub fn held_out_size(n: usize) -> usize {
    n.div_ceil(5)
}

/// Selects `n` training pairs plus validation and test sets of `⌈n/5⌉` each.
/// `Shortest` allocates train, validation and test in increasing output
/// length; `Random` draws all three from a seeded shuffle. Every split is
/// returned sorted by descending output length.
pub fn select_subset(pairs: &[SentencePair], n: usize, mode: SelectionMode) -> Result<DatasetSplit> {
    let m = held_out_size(n);
    let needed = n + 2 * m;
    if pairs.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            available: pairs.len(),
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    match mode {
        SelectionMode::Shortest => order.sort_by_key(|&i| pairs[i].output_len()),
        SelectionMode::Random { seed } => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        // restore input order before the stable length sort
        idx.sort_unstable();
        let mut split: Vec<SentencePair> = idx.into_iter().map(|i| pairs[i].clone()).collect();
        sort_descending(&mut split);
        split
    };
    Ok(DatasetSplit {
        train: take(0..n),
        validation: take(n..n + m),
        test: take(n + m..needed),
    })
}

/// Line-oriented description of a split: `key<TAB>value` per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub mode: SelectionMode,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl fmt::Display for SplitManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            SelectionMode::Shortest => writeln!(f, "mode\tshortest")?,
            SelectionMode::Random { seed } => writeln!(f, "mode\trandom\nseed\t{seed}")?,
        }
        writeln!(f, "train\t{}", self.train)?;
        writeln!(f, "validation\t{}", self.validation)?;
        writeln!(f, "test\t{}", self.test)
    }
}

/// Reads the two-column pair format.
pub fn read_pairs<R: Read>(reader: R) -> Result<Vec<SentencePair>> {
    Ok(read_rows(reader, &PAIR_HEADER)?
        .into_iter()
        .map(|mut r| {
            let output = r.pop().unwrap_or_default();
            let input = r.pop().unwrap_or_default();
            SentencePair { input, output }
        })
        .collect())
}

pub fn read_pairs_file(path: impl AsRef<std::path::Path>) -> Result<Vec<SentencePair>> {
    read_pairs(std::fs::File::open(path)?)
}

/// Writes the two-column pair format with every field quoted.
pub fn write_pairs<W: Write>(writer: W, pairs: &[SentencePair]) -> Result<()> {
    let mut w = quoted_writer(writer);
    w.write_record(PAIR_HEADER).map_err(csv_error)?;
    for p in pairs {
        w.write_record([&p.input, &p.output]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairs_file(path: impl AsRef<std::path::Path>, pairs: &[SentencePair]) -> Result<()> {
    write_pairs(std::io::BufWriter::new(std::fs::File::create(path)?), pairs)
}

/// A group of consecutive pairs. Inputs are PAD-padded index rows; targets
/// are `SOS ... EOS` followed by PAD up to the longest target in the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub input_lengths: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Unpadded input indices of example `i`.
    pub fn input(&self, i: usize) -> &[usize] {
        &self.inputs[i][..self.input_lengths[i]]
    }

    pub fn max_input_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// One-hot inputs shaped `[batch, vocab, max_input_len]`; PAD columns
    /// carry a one at the PAD row.
    pub fn one_hot<F: Scalar>(&self, vocab: usize) -> Result<Tensor<F>> {
        let l = self.max_input_len();
        let mut data = Vec::with_capacity(self.len() * vocab * l);
        for row in &self.inputs {
            data.extend(alphabet::one_hot::<F>(row, vocab)?.into_data());
        }
        Tensor::new(vec![self.len(), vocab, l], data)
    }

    /// Number of predicted target positions (everything after SOS up to and
    /// including EOS).
    pub fn target_tokens(&self) -> usize {
        self.targets
            .iter()
            .map(|t| t.iter().skip(1).take_while(|&&c| c != PAD).count())
            .sum()
    }

    pub fn input_pad_count(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum::<usize>() - self.input_lengths.iter().sum::<usize>()
    }

    pub fn target_pad_count(&self) -> usize {
        self.targets.iter().flatten().filter(|&&c| c == PAD).count()
    }
}

/// Groups consecutive pairs into batches of at most `batch_size`.
pub fn make_batches(pairs: &[SentencePair], batch_size: usize, alphabet: &Alphabet) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for p in chunk {
                let x = alphabet.encode(&p.input)?.indices;
                if x.is_empty() {
                    return Err(Error::Empty { op: "make_batches" });
                }
                let mut y = Vec::with_capacity(p.output.len() + 2);
                y.push(SOS);
                y.extend(alphabet.encode(&p.output)?.indices);
                y.push(EOS);
                inputs.push(x);
                targets.push(y);
            }
            let input_lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
            let max_in = input_lengths.iter().copied().max().unwrap_or(0);
            let max_out = targets.iter().map(Vec::len).max().unwrap_or(0);
            for x in &mut inputs {
                x.resize(max_in, PAD);
            }
            for y in &mut targets {
                y.resize(max_out, PAD);
            }
            Ok(Batch {
                inputs,
                input_lengths,
                targets,
            })
        })
        .collect()
}
