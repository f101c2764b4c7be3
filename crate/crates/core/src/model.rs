//! The full normalization model: an encoder, additive attention with
//! context-matrix selection and a single-layer LSTM decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{self, Alphabet, EOS, PAD, SOS, VOCAB_SIZE};
use crate::attention::{record_trace, AdditiveAttention, AttentionTrace};
use crate::autograd::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::data::Batch;
use crate::encoders::{Encoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::nn::{uniform, Linear, LstmCell, LstmState};
use crate::par::{self, Execution};
use crate::tensor::Scalar;

/// Longest output the decoder may emit, mirroring the dataset length filter.
pub const DEFAULT_MAX_OUTPUT: usize = 177;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default = "defaults::decoder_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "defaults::attention_hidden")]
    pub attention_hidden: usize,
    #[serde(default = "defaults::embedding")]
    pub embedding: usize,
    /// Number of code columns in the context matrix.
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::max_output")]
    pub max_output: usize,
    #[serde(default = "defaults::vocab")]
    pub vocab: usize,
}

mod defaults {
    pub fn decoder_hidden() -> usize {
        64
    }
    pub fn attention_hidden() -> usize {
        32
    }
    pub fn embedding() -> usize {
        32
    }
    pub fn d() -> usize {
        5
    }
    pub fn max_output() -> usize {
        super::DEFAULT_MAX_OUTPUT
    }
    pub fn vocab() -> usize {
        super::VOCAB_SIZE
    }
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            decoder_hidden: defaults::decoder_hidden(),
            attention_hidden: defaults::attention_hidden(),
            embedding: defaults::embedding(),
            d: defaults::d(),
            max_output: defaults::max_output(),
            vocab: defaults::vocab(),
        }
    }

    pub fn for_kind(kind: EncoderKind) -> Self {
        Self::new(EncoderConfig::default_for(kind))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = self.encoder.validate();
        for (name, v) in [
            ("model.decoder_hidden", self.decoder_hidden),
            ("model.attention_hidden", self.attention_hidden),
            ("model.embedding", self.embedding),
            ("model.d", self.d),
            ("model.max_output", self.max_output),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if self.vocab != VOCAB_SIZE {
            errors.push(format!("model.vocab must be {VOCAB_SIZE}"));
        }
        errors
    }

    fn decoder_input(&self) -> usize {
        self.d * self.encoder.feature_dim() + self.embedding
    }

    /// Trainable scalars of the whole model.
    pub fn count_parameters(&self) -> usize {
        let f = self.encoder.feature_dim();
        self.encoder.count_parameters(self.vocab)
            + AdditiveAttention::num_parameters(self.decoder_hidden, f, self.attention_hidden)
            + self.embedding * self.vocab
            + LstmCell::num_parameters(self.decoder_input(), self.decoder_hidden)
            + Linear::num_parameters(self.decoder_hidden, self.vocab)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Encoder,
    attention: AdditiveAttention,
    embedding: ParamId,
    cell: LstmCell,
    output: Linear,
}

impl Layout {
    fn build<F: Scalar>(config: &ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder, config.vocab, "encoder", store, &mut rng)?;
        let attention = AdditiveAttention::new(
            store,
            "attention",
            config.decoder_hidden,
            config.encoder.feature_dim(),
            config.attention_hidden,
            &mut rng,
        );
        let embedding = store.add(
            "decoder.embedding",
            uniform(&mut rng, &[config.embedding, config.vocab], 1.0),
        );
        let cell = LstmCell::new(
            store,
            "decoder.lstm",
            config.decoder_input(),
            config.decoder_hidden,
            &mut rng,
        );
        let output = Linear::new(store, "decoder.output", config.decoder_hidden, config.vocab, &mut rng);
        Ok(Self {
            encoder,
            attention,
            embedding,
            cell,
            output,
        })
    }
}

/// Graph handles for an encoded input.
#[derive(Clone, Copy, Debug)]
pub struct EncodedInput {
    pub code: Var,
    pub keys: Var,
    pub length: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Log-probabilities over the vocabulary, `[vocab, 1]`.
    pub log_probs: Var,
    pub state: LstmState,
    /// Attention weights used for this step, `[1, l]`.
    pub alpha: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub text: String,
    pub trace: AttentionTrace,
    /// Decoding stopped at `max_output` characters without emitting EOS.
    pub hit_cap: bool,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, seed)?;
        Ok(Self { config, layout, params })
    }

    /// Rebuilds a model around previously trained parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut fresh = ParamStore::<F>::new();
        let layout = Layout::build(&config, &mut fresh, 0)?;
        if fresh.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                params.len()
            )));
        }
        for ((name, expected), (got_name, got)) in fresh.iter().zip(params.iter()) {
            if name != got_name || expected.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {:?}, found {got_name} {:?}",
                    expected.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.layout.encoder
    }

    pub fn attention(&self) -> &AdditiveAttention {
        &self.layout.attention
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode_input(&self, g: &mut Graph<'_, F>, indices: &[usize]) -> Result<EncodedInput> {
        let x = g.constant(alphabet::one_hot(indices, self.config.vocab)?);
        let code = self.layout.encoder.forward(g, x)?;
        let keys = self.layout.attention.keys(g, code)?;
        Ok(EncodedInput {
            code,
            keys,
            length: indices.len(),
        })
    }

    pub fn initial_state(&self, g: &mut Graph<'_, F>) -> LstmState {
        LstmState::zeros(g, self.config.decoder_hidden)
    }

    /// One decoder step: attend from the current hidden state, build the
    /// context matrix, feed it with the previous character to the LSTM and
    /// project to log-probabilities.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_, F>,
        prev: usize,
        state: LstmState,
        input: &EncodedInput,
    ) -> Result<StepOutput> {
        if prev >= self.config.vocab {
            return Err(Error::IndexOutOfRange {
                index: prev,
                size: self.config.vocab,
            });
        }
        let scores = self.layout.attention.score(g, state.h, input.keys)?;
        let alpha = g.softmax(scores)?;
        let context = g.context_matrix(alpha, input.code, self.config.d)?;
        let table = g.param(self.layout.embedding);
        let embedded = g.column(table, prev)?;
        let x = g.concat_rows(&[context, embedded])?;
        let state = self.layout.cell.step(g, x, state)?;
        let logits = self.layout.output.forward(g, state.h)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepOutput {
            log_probs,
            state,
            alpha,
        })
    }

    /// Teacher-forced negative log-likelihood summed over the non-pad target
    /// positions. `target` is framed as `SOS ... EOS` optionally followed by PAD.
    pub fn teacher_nll_sum(&self, g: &mut Graph<'_, F>, input: &[usize], target: &[usize]) -> Result<(Var, usize)> {
        let enc = self.encode_input(g, input)?;
        let mut state = self.initial_state(g);
        let mut picks = Vec::with_capacity(target.len());
        for w in target.windows(2) {
            let (prev, gold) = (w[0], w[1]);
            if gold == PAD {
                break;
            }
            if gold >= self.config.vocab {
                return Err(Error::IndexOutOfRange {
                    index: gold,
                    size: self.config.vocab,
                });
            }
            let step = self.decode_step(g, prev, state, &enc)?;
            picks.push(g.pick(step.log_probs, gold)?);
            state = step.state;
        }
        if picks.is_empty() {
            return Err(Error::NoContributingPositions);
        }
        let total = g.add_n(&picks)?;
        Ok((g.scale(total, -F::one()), picks.len()))
    }

    /// Loss contribution and gradients of one example, scaled by `1 / denominator`.
    pub fn example_gradients(
        &self,
        input: &[usize],
        target: &[usize],
        denominator: usize,
    ) -> Result<(F, Gradients<F>)> {
        let mut g = Graph::new(&self.params);
        let (sum, _) = self.teacher_nll_sum(&mut g, input, target)?;
        let loss = g.scale(sum, F::one() / F::from_usize(denominator).unwrap());
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Pad-masked mean NLL of a batch and its gradients. Per-example graphs may
    /// run concurrently; their results are summed in example order.
    pub fn batch_gradients(&self, batch: &Batch, exec: Execution) -> Result<(F, Gradients<F>)> {
        let denominator = batch.target_tokens();
        if denominator == 0 {
            return Err(Error::NoContributingPositions);
        }
        let results = par::map_range(exec, batch.len(), |i| {
            self.example_gradients(batch.input(i), &batch.targets[i], denominator)
        });
        let mut loss = F::zero();
        let mut total = Gradients::empty(self.params.len());
        for r in results {
            let (l, g) = r?;
            loss = loss + l;
            total.accumulate(&g);
        }
        Ok((loss, total))
    }

    /// Pad-masked mean NLL of a batch without gradients.
    pub fn forward_teacher(&self, batch: &Batch, exec: Execution) -> Result<F> {
        let sums = par::map_range(exec, batch.len(), |i| -> Result<(F, usize)> {
            let mut g = Graph::new(&self.params);
            let (sum, n) = self.teacher_nll_sum(&mut g, batch.input(i), &batch.targets[i])?;
            Ok((g.value(sum).data()[0], n))
        });
        let mut total = F::zero();
        let mut count = 0;
        for s in sums {
            let (v, n) = s?;
            total = total + v;
            count += n;
        }
        let loss = total / F::from_usize(count).unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(loss)
    }

    pub fn greedy_decode(&self, input: &str, alphabet: &Alphabet) -> Result<DecodeResult> {
        let encoded = alphabet.encode(input)?;
        self.greedy_decode_indices(&encoded.indices, alphabet)
    }

    /// Emits the most likely character each step until EOS or `max_output`.
    pub fn greedy_decode_indices(&self, input: &[usize], alphabet: &Alphabet) -> Result<DecodeResult> {
        if input.is_empty() {
            return Err(Error::Empty { op: "greedy_decode" });
        }
        let mut g = Graph::new(&self.params);
        let enc = self.encode_input(&mut g, input)?;
        let mut state = self.initial_state(&mut g);
        let mut prev = SOS;
        let mut emitted = Vec::new();
        let mut alphas = Vec::new();
        let mut hit_cap = true;
        while emitted.len() < self.config.max_output {
            let step = self.decode_step(&mut g, prev, state, &enc)?;
            let lp = g.value(step.log_probs).data();
            // PAD and SOS are never emitted
            let mut best = EOS;
            for i in 0..PAD {
                if lp[i] > lp[best] {
                    best = i;
                }
            }
            if best == EOS {
                hit_cap = false;
                break;
            }
            alphas.push(g.value(step.alpha).data().to_vec());
            emitted.push(best);
            prev = best;
            state = step.state;
        }
        Ok(DecodeResult {
            text: alphabet.decode(&emitted)?,
            trace: record_trace(&alphas)?,
            hit_cap,
        })
    }
}
