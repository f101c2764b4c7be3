//! Optimisation loop, checkpoints and training logs.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::autograd::{Gradients, ParamStore};
use crate::data::{make_batches, Batch, DatasetSplit, SentencePair};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::par::Execution;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: Option<u64>,
    pub max_duration_secs: Option<f64>,
    /// Validate every this many iterations; 0 disables validation.
    pub validation_every: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            learning_rate: 1e-3,
            max_iterations: Some(1000),
            max_duration_secs: None,
            validation_every: 100,
            optimizer: OptimizerKind::AdaptiveMoment,
            clip_norm: 5.0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.batch_size == 0 {
            errors.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errors.push("train.learning_rate must be a positive number".to_string());
        }
        if self.max_iterations.is_none() && self.max_duration_secs.is_none() {
            errors.push("train: set max_iterations or max_duration_secs".to_string());
        }
        if let Some(d) = self.max_duration_secs {
            if !(d.is_finite() && d >= 0.0) {
                errors.push("train.max_duration_secs must be a non-negative number".to_string());
            }
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            errors.push("train.clip_norm must be a non-negative number".to_string());
        }
        if self.seed > i64::MAX as u64 {
            errors.push(format!("train.seed must be at most {}", i64::MAX));
        }
        errors
    }
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPSILON: f32 = 1e-8;

/// Optimiser moments; empty for plain gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::AdaptiveMoment => params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            }
        };
        Self {
            kind,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates every parameter that received a gradient.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    crate::tensor::axpy(params.get_mut(id).data_mut(), -lr, g.data());
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (id, g) in grads.iter() {
                    let i = id.index();
                    let p = params.get_mut(id).data_mut();
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for k in 0..p.len() {
                        let gk = g.data()[k];
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= lr * mh / (vh.sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}

/// Position in the training stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: u64,
    /// Batches already consumed in the current epoch.
    pub cursor: usize,
    pub num_batches: usize,
}

/// Batch visiting order for one epoch, derived from the run seed and epoch.
pub fn epoch_order(seed: u64, epoch: u64, num_batches: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_batches).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

const MAGIC: &[u8; 8] = b"TNCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    state: TrainState,
    model: ModelConfig,
    train: TrainConfig,
}

/// Everything needed to continue a run: configs, weights, optimiser moments
/// and stream position.
#[derive(Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("model", &self.model)
            .field("state", &self.state)
            .field("parameters", &self.params.num_scalars())
            .finish_non_exhaustive()
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(buf)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len())?;
    for &d in t.shape() {
        write_u32(w, d)?;
    }
    let mut bytes = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let n = read_u32(r)?;
    let name =
        String::from_utf8(read_bytes(r, n)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let ndim = read_u32(r)?;
    let shape = (0..ndim).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let bytes = read_bytes(r, 4 * len)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            optimizer: self.optimizer.kind,
            optimizer_step: self.optimizer.step,
            state: self.state,
            model: self.model.clone(),
            train: self.train.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(&mut w, text.len())?;
        w.write_all(text.as_bytes())?;
        let count = self.params.len() + self.optimizer.m.len() + self.optimizer.v.len();
        write_u32(&mut w, count)?;
        for (name, t) in self.params.iter() {
            write_tensor(&mut w, &format!("param/{name}"), t)?;
        }
        for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                write_tensor(&mut w, &format!("{prefix}/{name}"), t)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_bytes(&mut r, MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = read_u32(&mut r)?;
        let text =
            String::from_utf8(read_bytes(&mut r, n)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            let (kind, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {name:?}")))?;
            let expect = |list: &Vec<Tensor>| -> Result<()> {
                match params.find(rest) {
                    Some(id) if id.index() == list.len() && params.get(id).shape() == t.shape() => Ok(()),
                    _ => Err(Error::Checkpoint(format!("optimiser tensor {name:?} out of place"))),
                }
            };
            match kind {
                "param" => {
                    params.add(rest, t);
                }
                "adam.m" => {
                    expect(&m)?;
                    m.push(t);
                }
                "adam.v" => {
                    expect(&v)?;
                    v.push(t);
                }
                _ => return Err(Error::Checkpoint(format!("unknown tensor kind in {name:?}"))),
            }
        }
        let moments = match header.optimizer {
            OptimizerKind::Sgd => 0,
            OptimizerKind::AdaptiveMoment => params.len(),
        };
        if m.len() != moments || v.len() != moments {
            return Err(Error::Checkpoint("optimiser moments missing".into()));
        }
        let ckpt = Self {
            model: header.model,
            train: header.train,
            state: header.state,
            params,
            optimizer: OptimizerState {
                kind: header.optimizer,
                step: header.optimizer_step,
                m,
                v,
            },
        };
        // validates names and shapes against the model layout
        Model::from_params(ckpt.model.clone(), ckpt.params.clone())?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.model.clone(), self.params.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogRecord {
    Train {
        iteration: u64,
        wall_time: f64,
        loss: f32,
    },
    Validation {
        iteration: u64,
        wall_time: f64,
        loss: f64,
        cer: f64,
        accuracy: f64,
    },
}

impl LogRecord {
    pub fn iteration(&self) -> u64 {
        match *self {
            Self::Train { iteration, .. } | Self::Validation { iteration, .. } => iteration,
        }
    }

    pub fn wall_time(&self) -> f64 {
        match *self {
            Self::Train { wall_time, .. } | Self::Validation { wall_time, .. } => wall_time,
        }
    }

    /// The record with its wall-clock time zeroed.
    pub fn without_time(mut self) -> Self {
        match &mut self {
            Self::Train { wall_time, .. } | Self::Validation { wall_time, .. } => *wall_time = 0.0,
        }
        self
    }

    fn to_line(self) -> String {
        match self {
            Self::Train {
                iteration,
                wall_time,
                loss,
            } => format!("train\t{iteration}\t{wall_time:.6}\t{loss}\t\t\t"),
            Self::Validation {
                iteration,
                wall_time,
                loss,
                cer,
                accuracy,
            } => format!("validation\t{iteration}\t{wall_time:.6}\t\t{loss}\t{cer}\t{accuracy}"),
        }
    }
}

pub const LOG_HEADER: &str = "kind\titeration\twall_time\ttrain_loss\tval_loss\tval_cer\tval_acc";

/// Training log; optionally mirrors every record to a writer as it arrives.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainLog").field("records", &self.records).finish()
    }
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Clone for TrainLog {
    fn clone(&self) -> Self {
        Self {
            records: self.records.clone(),
            sink: None,
        }
    }
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Streams subsequent records to `sink`, writing the header first when
    /// `write_header` is set.
    pub fn with_sink(mut sink: Box<dyn Write + Send>, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(sink, "{LOG_HEADER}")?;
            sink.flush()?;
        }
        Ok(Self {
            records: Vec::new(),
            sink: Some(sink),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(s) = self.sink.as_mut() {
            writeln!(s, "{}", record.to_line())?;
            s.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn train_records(&self) -> impl DoubleEndedIterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Train { .. }))
    }

    pub fn validation_records(&self) -> impl DoubleEndedIterator<Item = &LogRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, LogRecord::Validation { .. }))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if n == 1 {
                if line != LOG_HEADER {
                    return Err(Error::Parse {
                        line: n,
                        message: "missing log header".into(),
                    });
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| Error::Parse { line: n, message };
            if f.len() != 7 {
                return Err(bad(format!("expected 7 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let iteration = f[1].parse::<u64>().map_err(|e| bad(e.to_string()))?;
            let wall_time = num(f[2])?;
            records.push(match f[0] {
                "train" => LogRecord::Train {
                    iteration,
                    wall_time,
                    loss: f[3].parse::<f32>().map_err(|e| bad(e.to_string()))?,
                },
                "validation" => LogRecord::Validation {
                    iteration,
                    wall_time,
                    loss: num(f[4])?,
                    cer: num(f[5])?,
                    accuracy: num(f[6])?,
                },
                other => return Err(bad(format!("unknown record kind {other:?}"))),
            });
        }
        Ok(Self { records, sink: None })
    }
}

/// Average iterations per second between the first and last training records.
pub fn measure_rate(log: &TrainLog) -> Result<f64> {
    let train: Vec<&LogRecord> = log.train_records().collect();
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "measuring a rate needs at least two logged iterations".into(),
        ));
    }
    let (first, last) = (train[0], train[train.len() - 1]);
    let elapsed = last.wall_time() - first.wall_time();
    if elapsed <= 0.0 {
        return Err(Error::InvalidArgument(
            "no wall-clock time elapsed between records".into(),
        ));
    }
    Ok((last.iteration() - first.iteration()) as f64 / elapsed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub iteration: u64,
    pub val_loss: f64,
    pub params: ParamStore,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Parameters with the lowest validation NLL, if validation ran.
    pub best: Option<BestModel>,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// The best validated model, or the final one.
    pub fn best_model(&self) -> Result<Model> {
        match &self.best {
            Some(b) => Model::from_params(self.checkpoint.model.clone(), b.params.clone()),
            None => self.checkpoint.to_model(),
        }
    }
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    optimizer: OptimizerState,
    state: TrainState,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        let optimizer = OptimizerState::new(config.optimizer, model.params());
        Ok(Self {
            model,
            config,
            optimizer,
            state: TrainState::default(),
            order: Vec::new(),
        })
    }

    /// Continues from `ckpt` under `config`, which may change stopping and
    /// validation settings but not the batch size or seed.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        if config.batch_size != ckpt.train.batch_size || config.seed != ckpt.train.seed {
            return Err(Error::Config(
                "resuming requires the checkpoint's train.batch_size and train.seed".into(),
            ));
        }
        if config.optimizer != ckpt.optimizer.kind {
            return Err(Error::Config(
                "resuming requires the checkpoint's train.optimizer".into(),
            ));
        }
        let model = ckpt.to_model()?;
        let order = if ckpt.state.num_batches > 0 {
            epoch_order(config.seed, ckpt.state.epoch, ckpt.state.num_batches)
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            config,
            optimizer: ckpt.optimizer,
            state: ckpt.state,
            order,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.config.clone(),
            state: self.state,
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            iteration: self.state.iteration + 1,
            checkpoint: Box::new(self.checkpoint()),
        }
    }

    fn next_batch(&mut self, num_batches: usize) -> Result<usize> {
        if num_batches == 0 {
            return Err(Error::Empty { op: "train" });
        }
        if self.state.num_batches == 0 {
            self.state.num_batches = num_batches;
        } else if self.state.num_batches != num_batches {
            return Err(Error::Config(format!(
                "checkpoint was trained on {} batches, the data now gives {num_batches}",
                self.state.num_batches
            )));
        }
        if self.order.is_empty() {
            self.order = epoch_order(self.config.seed, self.state.epoch, num_batches);
        }
        if self.state.cursor == num_batches {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = epoch_order(self.config.seed, self.state.epoch, num_batches);
        }
        let b = self.order[self.state.cursor];
        self.state.cursor += 1;
        Ok(b)
    }

    /// One optimisation step on the next batch in the schedule.
    pub fn step(&mut self, batches: &[Batch]) -> Result<f32> {
        let before = (self.state, self.order.clone());
        let b = self.next_batch(batches.len())?;
        let result = self.model.batch_gradients(&batches[b], self.config.execution);
        let (loss, mut grads) = match result {
            Ok(r) if r.0.is_finite() && r.1.all_finite() => r,
            Ok(_) | Err(Error::NonFinite(_)) => {
                (self.state, self.order) = before;
                return Err(self.diverged());
            }
            Err(e) => return Err(e),
        };
        let clip = self.config.clip_norm as f32;
        if clip > 0.0 {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.optimizer
            .apply(self.model.params_mut(), &grads, self.config.learning_rate as f32);
        self.state.iteration += 1;
        Ok(loss)
    }

    fn validate(&self, pairs: &[SentencePair], alphabet: &Alphabet) -> Result<(f64, f64, f64)> {
        let exec = self.config.execution;
        let loss = eval::mean_nll(&self.model, pairs, alphabet, self.config.batch_size, exec)?;
        let preds = eval::predict(&self.model, pairs, alphabet, exec)?;
        Ok((loss, eval::cer(&preds)?, eval::accuracy(&preds)?))
    }

    /// Trains until a stopping criterion is met, validating on schedule and
    /// once more at the end.
    pub fn run(
        &mut self,
        batches: &[Batch],
        validation: &[SentencePair],
        alphabet: &Alphabet,
        mut log: TrainLog,
    ) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut best: Option<BestModel> = None;
        let every = if validation.is_empty() {
            0
        } else {
            self.config.validation_every
        };
        let mut last_validated = None;
        let validate = |trainer: &Self, log: &mut TrainLog, best: &mut Option<BestModel>| -> Result<()> {
            let (loss, cer, accuracy) = trainer.validate(validation, alphabet)?;
            let iteration = trainer.state.iteration;
            log.push(LogRecord::Validation {
                iteration,
                wall_time: start.elapsed().as_secs_f64(),
                loss,
                cer,
                accuracy,
            })?;
            log::info!("iteration {iteration}: val_loss {loss:.4} cer {cer:.2}% acc {accuracy:.2}%");
            if best.as_ref().is_none_or(|b| loss < b.val_loss) {
                *best = Some(BestModel {
                    iteration,
                    val_loss: loss,
                    params: trainer.model.params().clone(),
                });
            }
            Ok(())
        };
        loop {
            if self.config.max_iterations.is_some_and(|m| self.state.iteration >= m) {
                break;
            }
            if self
                .config
                .max_duration_secs
                .is_some_and(|d| start.elapsed().as_secs_f64() >= d)
            {
                break;
            }
            let loss = self.step(batches)?;
            log.push(LogRecord::Train {
                iteration: self.state.iteration,
                wall_time: start.elapsed().as_secs_f64(),
                loss,
            })?;
            if every > 0 && self.state.iteration % every == 0 {
                validate(self, &mut log, &mut best)?;
                last_validated = Some(self.state.iteration);
            }
        }
        if every > 0 && self.state.iteration > 0 && last_validated != Some(self.state.iteration) {
            validate(self, &mut log, &mut best)?;
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            best,
            log,
        })
    }
}

/// Trains `model` on the training split, validating on the validation split.
pub fn train(model: Model, split: &DatasetSplit, config: &TrainConfig, alphabet: &Alphabet) -> Result<TrainOutcome> {
    let batches = make_batches(&split.train, config.batch_size, alphabet)?;
    Trainer::new(model, config.clone())?.run(&batches, &split.validation, alphabet, TrainLog::new())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSeedReport {
    pub per_seed: Vec<(u64, EvalReport)>,
    pub mean: EvalReport,
}

/// Trains one model per seed `config.seed + i` for `i < n_seeds` and
/// evaluates each (best validated weights) on the test split.
pub fn run_multi_seed(
    model_config: &ModelConfig,
    config: &TrainConfig,
    split: &DatasetSplit,
    alphabet: &Alphabet,
    n_seeds: usize,
) -> Result<MultiSeedReport> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
    }
    let mut per_seed = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds as u64 {
        let mut cfg = config.clone();
        cfg.seed = config.seed + i;
        let model = Model::new(model_config.clone(), cfg.seed)?;
        let outcome = train(model, split, &cfg, alphabet)?;
        let (report, _) = eval::evaluate(
            &outcome.best_model()?,
            &split.test,
            alphabet,
            cfg.batch_size,
            cfg.execution,
        )?;
        per_seed.push((cfg.seed, report));
    }
    let k = n_seeds as f64;
    let mean = EvalReport {
        nll: per_seed.iter().map(|(_, r)| r.nll).sum::<f64>() / k,
        cer_percent: per_seed.iter().map(|(_, r)| r.cer_percent).sum::<f64>() / k,
        accuracy_percent: per_seed.iter().map(|(_, r)| r.accuracy_percent).sum::<f64>() / k,
        n: per_seed[0].1.n,
    };
    Ok(MultiSeedReport { per_seed, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, EncoderKind};

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::new(EncoderConfig::new(EncoderKind::Cfe, 4, 2, 2));
        cfg.decoder_hidden = 8;
        cfg.attention_hidden = 6;
        cfg.embedding = 4;
        cfg.d = 2;
        cfg.max_output = 20;
        Model::new(cfg, seed).unwrap()
    }

    fn copy_batches(a: &Alphabet) -> Vec<Batch> {
        let pairs = crate::toy::generate(crate::toy::ToyTask::Copy, 6, 1);
        make_batches(&pairs, 2, a).unwrap()
    }

    fn config(iters: u64) -> TrainConfig {
        TrainConfig {
            max_iterations: Some(iters),
            batch_size: 2,
            learning_rate: 0.01,
            execution: Execution::Sequential,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_lists_everything() {
        let cfg = TrainConfig {
            batch_size: 0,
            learning_rate: -1.0,
            max_iterations: None,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
        assert!(TrainConfig::default().validate().is_empty());
    }

    #[test]
    fn zero_iterations_keep_weights() {
        let a = Alphabet::default();
        let m = tiny_model(0);
        let before = m.params().clone();
        let mut t = Trainer::new(m, config(0)).unwrap();
        let out = t.run(&copy_batches(&a), &[], &a, TrainLog::new()).unwrap();
        assert_eq!(out.checkpoint.params, before);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let o = epoch_order(3, 0, 10);
        let mut s = o.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(3, 0, 10));
        assert_ne!(o, epoch_order(3, 1, 10));
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let a = Alphabet::default();
        let mut t = Trainer::new(tiny_model(1), config(5)).unwrap();
        t.run(&copy_batches(&a), &[], &a, TrainLog::new()).unwrap();
        let ck = t.checkpoint();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(buf.as_slice()).unwrap(), ck);
        assert!(Checkpoint::read(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read(buf.as_slice()).is_err());
    }

    #[test]
    fn sgd_step_matches_manual_update() {
        let a = Alphabet::default();
        let batches = copy_batches(&a);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            clip_norm: 0.0,
            ..config(1)
        };
        let m = tiny_model(2);
        let mut t = Trainer::new(m.clone(), cfg).unwrap();
        t.step(&batches).unwrap();
        let b = epoch_order(0, 0, batches.len())[0];
        let (_, g) = m.batch_gradients(&batches[b], Execution::Sequential).unwrap();
        for id in m.params().ids() {
            let mut expected = m.params().get(id).clone();
            if let Some(g) = g.get(id) {
                for (p, gv) in expected.data_mut().iter_mut().zip(g.data()) {
                    *p -= 0.01 * gv;
                }
            }
            assert_eq!(&expected, t.model().params().get(id));
        }
    }

    #[test]
    fn rate_arithmetic() {
        let mut log = TrainLog::new();
        assert!(measure_rate(&log).is_err());
        log.push(LogRecord::Train {
            iteration: 1,
            wall_time: 0.0,
            loss: 1.0,
        })
        .unwrap();
        assert!(measure_rate(&log).is_err());
        log.push(LogRecord::Train {
            iteration: 101,
            wall_time: 50.0,
            loss: 1.0,
        })
        .unwrap();
        assert_eq!(measure_rate(&log).unwrap(), 2.0);
    }

    #[test]
    fn log_tsv_round_trip() {
        let mut log = TrainLog::new();
        log.push(LogRecord::Train {
            iteration: 1,
            wall_time: 0.5,
            loss: 4.25,
        })
        .unwrap();
        log.push(LogRecord::Validation {
            iteration: 1,
            wall_time: 0.75,
            loss: 4.0,
            cer: 50.0,
            accuracy: 12.5,
        })
        .unwrap();
        let parsed = TrainLog::parse(log.to_tsv().as_bytes()).unwrap();
        assert_eq!(parsed, log);
    }
}
