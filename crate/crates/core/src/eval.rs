//! Metrics, the paired approximate randomization test, the error taxonomy and
//! attention-matrix export.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::attention::AttentionTrace;
use crate::data::{make_batches, SentencePair};
use crate::error::{Error, Result};
use crate::model::{DecodeResult, Model};
use crate::par::{self, Execution};

/// Unit-cost edit distance between the character sequences of `a` and `b`.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub input: String,
    pub reference: String,
    pub prediction: String,
    pub hit_cap: bool,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.prediction == self.reference
    }
}

/// Ordered predictions; order matters for paired comparisons.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictionSet {
    pub records: Vec<PredictionRecord>,
}

const DUMP_HEADER: [&str; 4] = ["input", "reference", "prediction", "hit_cap"];

impl PredictionSet {
    pub fn new(records: Vec<PredictionRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Always)
            .from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(DUMP_HEADER).map_err(io)?;
        for r in &self.records {
            let cap = if r.hit_cap { "true" } else { "false" };
            w.write_record([r.input.as_str(), &r.reference, &r.prediction, cap])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(DUMP_HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {DUMP_HEADER:?}"),
            });
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let hit_cap = match &rec[3] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("hit_cap must be true or false, found {other:?}"),
                    })
                }
            };
            records.push(PredictionRecord {
                input: rec[0].to_string(),
                reference: rec[1].to_string(),
                prediction: rec[2].to_string(),
                hit_cap,
            });
        }
        Ok(Self { records })
    }
}

fn require_nonempty(preds: &PredictionSet, op: &'static str) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty { op });
    }
    Ok(())
}

/// Character error rate in percent: total edit distance over total reference length.
pub fn cer(preds: &PredictionSet) -> Result<f64> {
    require_nonempty(preds, "cer")?;
    let (dist, len) = preds.records.iter().fold((0usize, 0usize), |(d, l), r| {
        (
            d + levenshtein(&r.prediction, &r.reference),
            l + r.reference.chars().count(),
        )
    });
    if len == 0 {
        return Err(Error::InvalidArgument("cer: total reference length is zero".into()));
    }
    Ok(100.0 * dist as f64 / len as f64)
}

/// Percentage of exact-match predictions.
pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    require_nonempty(preds, "accuracy")?;
    let correct = preds.records.iter().filter(|r| r.is_correct()).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub cer_percent: f64,
    pub accuracy_percent: f64,
    pub n: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n\t{}", self.n)?;
        writeln!(f, "nll\t{:.6}", self.nll)?;
        writeln!(f, "cer_percent\t{:.4}", self.cer_percent)?;
        writeln!(f, "accuracy_percent\t{:.4}", self.accuracy_percent)
    }
}

/// Greedy-decodes every pair, in order.
pub fn predict(
    model: &Model<f32>,
    pairs: &[SentencePair],
    alphabet: &Alphabet,
    exec: Execution,
) -> Result<PredictionSet> {
    let results = par::map(exec, pairs, |p| model.greedy_decode(&p.input, alphabet));
    let mut records = Vec::with_capacity(pairs.len());
    for (p, r) in pairs.iter().zip(results) {
        let r = r?;
        records.push(PredictionRecord {
            input: p.input.clone(),
            reference: p.output.clone(),
            prediction: r.text,
            hit_cap: r.hit_cap,
        });
    }
    Ok(PredictionSet { records })
}

/// Token-weighted teacher-forced NLL over `pairs`.
pub fn mean_nll(
    model: &Model<f32>,
    pairs: &[SentencePair],
    alphabet: &Alphabet,
    batch_size: usize,
    exec: Execution,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty { op: "mean_nll" });
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for batch in make_batches(pairs, batch_size, alphabet)? {
        let n = batch.target_tokens();
        total += f64::from(model.forward_teacher(&batch, exec)?) * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

pub fn evaluate(
    model: &Model<f32>,
    pairs: &[SentencePair],
    alphabet: &Alphabet,
    batch_size: usize,
    exec: Execution,
) -> Result<(EvalReport, PredictionSet)> {
    let nll = mean_nll(model, pairs, alphabet, batch_size, exec)?;
    let preds = predict(model, pairs, alphabet, exec)?;
    Ok((
        EvalReport {
            nll,
            cer_percent: cer(&preds)?,
            accuracy_percent: accuracy(&preds)?,
            n: preds.len(),
        },
        preds,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    Cer,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Self::Accuracy),
            "cer" => Ok(Self::Cer),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

impl Metric {
    /// Integer per-record score whose sum is proportional to the metric over
    /// a set sharing the same references.
    fn score(self, r: &PredictionRecord) -> i64 {
        match self {
            Metric::Accuracy => i64::from(r.is_correct()),
            Metric::Cer => levenshtein(&r.prediction, &r.reference) as i64,
        }
    }
}

fn check_paired(a: &PredictionSet, b: &PredictionSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!("{} vs {} records", a.len(), b.len())));
    }
    if let Some(i) = a
        .records
        .iter()
        .zip(&b.records)
        .position(|(x, y)| x.reference != y.reference)
    {
        return Err(Error::Mismatch(format!("reference differs at record {}", i + 1)));
    }
    Ok(())
}

/// Paired approximate randomization test. Each of `trials` rounds swaps
/// every pair of predictions with probability one half; the p-value is
/// `(count + 1) / (trials + 1)` where `count` is the number of rounds whose
/// metric gap is at least the observed one. Round `i` draws from its own
/// seeded stream, so the result does not depend on scheduling.
pub fn approx_randomization(
    a: &PredictionSet,
    b: &PredictionSet,
    metric: Metric,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    check_paired(a, b)?;
    require_nonempty(a, "approx_randomization")?;
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let sa: Vec<i64> = a.records.iter().map(|r| metric.score(r)).collect();
    let sb: Vec<i64> = b.records.iter().map(|r| metric.score(r)).collect();
    let observed = (sa.iter().sum::<i64>() - sb.iter().sum::<i64>()).abs();
    let hits = par::map_range(exec, trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut diff = 0i64;
        for (x, y) in sa.iter().zip(&sb) {
            if rng.gen::<bool>() {
                diff += y - x;
            } else {
                diff += x - y;
            }
        }
        diff.abs() >= observed
    });
    let count = hits.into_iter().filter(|&h| h).count();
    Ok((count + 1) as f64 / (trials + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorType {
    /// Decoding hit the output cap.
    T1,
    /// Same length, a few isolated wrong characters.
    T2,
    /// Output cut short.
    T3,
    Others,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierThresholds {
    /// Truncation requires `len(pred) < ratio * len(ref)`.
    pub t3_length_ratio: f64,
    /// ... and a common prefix of at least `ratio * len(pred)`.
    pub t3_prefix_ratio: f64,
    pub t2_max_mismatches: usize,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            t3_length_ratio: 0.6,
            t3_prefix_ratio: 0.9,
            t2_max_mismatches: 3,
        }
    }
}

/// Bucket of an incorrect prediction, or `None` when it is correct.
pub fn classify(r: &PredictionRecord, thr: &ClassifierThresholds) -> Option<ErrorType> {
    if r.is_correct() {
        return None;
    }
    if r.hit_cap {
        return Some(ErrorType::T1);
    }
    let pred: Vec<char> = r.prediction.chars().collect();
    let reference: Vec<char> = r.reference.chars().collect();
    let (lp, lr) = (pred.len() as f64, reference.len() as f64);
    let prefix = pred.iter().zip(&reference).take_while(|(a, b)| a == b).count() as f64;
    if lp < thr.t3_length_ratio * lr && prefix >= thr.t3_prefix_ratio * lp {
        return Some(ErrorType::T3);
    }
    if pred.len() == reference.len() {
        let mismatches = pred.iter().zip(&reference).filter(|(a, b)| a != b).count();
        if mismatches <= thr.t2_max_mismatches {
            return Some(ErrorType::T2);
        }
    }
    Some(ErrorType::Others)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    pub others: usize,
    pub total: usize,
}

impl fmt::Display for ErrorBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "T1\t{}", self.t1)?;
        writeln!(f, "T2\t{}", self.t2)?;
        writeln!(f, "T3\t{}", self.t3)?;
        writeln!(f, "Others\t{}", self.others)?;
        writeln!(f, "total\t{}", self.total)
    }
}

pub fn classify_errors(preds: &PredictionSet, thr: &ClassifierThresholds) -> ErrorBreakdown {
    let mut out = ErrorBreakdown::default();
    for r in &preds.records {
        let Some(kind) = classify(r, thr) else { continue };
        out.total += 1;
        match kind {
            ErrorType::T1 => out.t1 += 1,
            ErrorType::T2 => out.t2 += 1,
            ErrorType::T3 => out.t3 += 1,
            ErrorType::Others => out.others += 1,
        }
    }
    out
}

/// Writes the input on the first line, the output on the second, then one
/// tab-separated row of weights per output character.
pub fn dump_attention<W: Write>(mut w: W, input: &str, result: &DecodeResult) -> Result<()> {
    writeln!(w, "{input}")?;
    writeln!(w, "{}", result.text)?;
    for row in &result.trace.rows {
        let cells: Vec<String> = row.iter().map(f32::to_string).collect();
        writeln!(w, "{}", cells.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a trace written by [`dump_attention`], returning `(input, output, trace)`.
pub fn read_attention<R: BufRead>(r: R) -> Result<(String, String, AttentionTrace)> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines.next().transpose()?.ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing {what}"),
        })
    };
    let input = next("input line")?;
    let output = next("output line")?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let row = line
            .split('\t')
            .map(|c| {
                c.parse::<f32>().map_err(|e| Error::Parse {
                    line: i + 3,
                    message: format!("{c:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        rows.push(row);
    }
    Ok((input, output, crate::attention::record_trace(&rows)?))
}

/// Binary grayscale image, `cell` pixels per matrix entry; white is weight 1.
pub fn write_pgm<W: Write>(mut w: W, trace: &AttentionTrace, cell: usize) -> Result<()> {
    let (rows, cols) = (trace.num_rows(), trace.num_columns());
    if rows == 0 || cols == 0 || cell == 0 {
        return Err(Error::Empty { op: "write_pgm" });
    }
    write!(w, "P5\n{} {}\n255\n", cols * cell, rows * cell)?;
    let mut line = Vec::with_capacity(cols * cell);
    for row in &trace.rows {
        line.clear();
        for &a in row {
            let level = (a.clamp(0.0, 1.0) * 255.0).round() as u8;
            line.extend(std::iter::repeat(level).take(cell));
        }
        for _ in 0..cell {
            w.write_all(&line)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fraction of rows `i` (with `i` inside the input) whose largest weight sits
/// on column `i`.
pub fn diagonal_dominance(trace: &AttentionTrace) -> f64 {
    let rows: Vec<&Vec<f32>> = trace.rows.iter().take(trace.num_columns()).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == *i
        })
        .count();
    hits as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(reference: &str, prediction: &str, hit_cap: bool) -> PredictionRecord {
        PredictionRecord {
            input: String::new(),
            reference: reference.into(),
            prediction: prediction.into(),
            hit_cap,
        }
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein("kitten", "kitten"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("£5", "€5"), 1);
    }

    #[test]
    fn cer_and_accuracy() {
        let s = PredictionSet::new(vec![rec("abcd", "abce", false)]);
        assert_eq!(cer(&s).unwrap(), 25.0);
        let s = PredictionSet::new(vec![
            rec("a", "a", false),
            rec("b", "c", false),
            rec("d", "e", false),
            rec("f", "g", false),
        ]);
        assert_eq!(accuracy(&s).unwrap(), 25.0);
        assert!(cer(&PredictionSet::default()).is_err());
        assert!(accuracy(&PredictionSet::default()).is_err());
        assert!(cer(&PredictionSet::new(vec![rec("", "x", false)])).is_err());
    }

    #[test]
    fn identical_sets_give_one() {
        let s = PredictionSet::new(vec![rec("a", "b", false), rec("c", "c", false)]);
        for m in [Metric::Accuracy, Metric::Cer] {
            let p = approx_randomization(&s, &s, m, 50, 1, Execution::Sequential).unwrap();
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn randomization_validates_pairs() {
        let a = PredictionSet::new(vec![rec("a", "a", false)]);
        let b = PredictionSet::new(vec![rec("b", "a", false)]);
        assert!(approx_randomization(&a, &b, Metric::Accuracy, 10, 0, Execution::Sequential).is_err());
        let c = PredictionSet::new(vec![]);
        assert!(approx_randomization(&a, &c, Metric::Accuracy, 10, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn randomization_modes_agree() {
        let a = PredictionSet::new(
            (0..30)
                .map(|i| rec("x", if i % 3 == 0 { "y" } else { "x" }, false))
                .collect(),
        );
        let b = PredictionSet::new(
            (0..30)
                .map(|i| rec("x", if i % 2 == 0 { "y" } else { "x" }, false))
                .collect(),
        );
        let p1 = approx_randomization(&a, &b, Metric::Accuracy, 200, 9, Execution::Sequential).unwrap();
        let p2 = approx_randomization(&a, &b, Metric::Accuracy, 200, 9, Execution::Parallel).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn classifier_rules() {
        let thr = ClassifierThresholds::default();
        assert_eq!(classify(&rec("abc", "abc", false), &thr), None);
        assert_eq!(classify(&rec("abc", "abd", true), &thr), Some(ErrorType::T1));
        assert_eq!(classify(&rec("abcdef", "abcdex", false), &thr), Some(ErrorType::T2));
        assert_eq!(classify(&rec("abcdefghij", "abcd", false), &thr), Some(ErrorType::T3));
        assert_eq!(classify(&rec("abcdef", "uvwxyz", false), &thr), Some(ErrorType::Others));
    }

    #[test]
    fn dump_round_trip() {
        let s = PredictionSet::new(vec![rec("a, \"b\"", "a", true), rec("c", "c", false)]);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"\"input\",\"reference\",\"prediction\",\"hit_cap\"\n"));
        assert_eq!(PredictionSet::read(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn attention_file_and_image() {
        let result = DecodeResult {
            text: "xy".into(),
            trace: AttentionTrace {
                rows: vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]],
            },
            hit_cap: false,
        };
        let mut buf = Vec::new();
        dump_attention(&mut buf, "abc", &result).unwrap();
        let (i, o, t) = read_attention(buf.as_slice()).unwrap();
        assert_eq!((i.as_str(), o.as_str()), ("abc", "xy"));
        assert_eq!(t, result.trace);
        assert_eq!(diagonal_dominance(&t), 1.0);
        let mut img = Vec::new();
        write_pgm(&mut img, &t, 2).unwrap();
        assert!(img.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(img.len(), "P5\n6 4\n255\n".len() + 24);
    }
}
