//! The four interchangeable encoders producing the code matrix from a one-hot
//! input: bidirectional LSTM, position-wise feed-forward (FCNN), dilated CNN
//! (FE) and the bidirectional causal feature extractor (CFE).
//!
//! Every encoder starts with the same stem, a width-1 convolution mapping the
//! one-hot vocabulary to `channels`, and is length preserving: an input with
//! `l` columns yields a code with `l` columns.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Linear, LstmCell, LstmState};
use crate::tensor::{Padding, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "FCNN")]
    Fcnn,
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "CFE")]
    Cfe,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [Self::Lstm, Self::Fcnn, Self::Fe, Self::Cfe];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lstm => "LSTM",
            Self::Fcnn => "FCNN",
            Self::Fe => "FE",
            Self::Cfe => "CFE",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("encoder.kind: unknown encoder {s:?}")))
    }
}

/// Encoder hyperparameters.
///
/// `channels` is the feature width per direction for the bidirectional
/// encoders (LSTM, CFE) and the full width for FCNN and FE. Dilation starts
/// at 1 and doubles with every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, channels: usize, layers: usize, kernel: usize) -> Self {
        Self {
            kind,
            channels,
            layers,
            kernel,
        }
    }

    /// Default toy-scale settings for each encoder kind.
    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Lstm => Self::new(kind, 32, 1, 1),
            EncoderKind::Fcnn => Self::new(kind, 64, 2, 1),
            EncoderKind::Fe => Self::new(kind, 64, 4, 3),
            EncoderKind::Cfe => Self::new(kind, 32, 4, 3),
        }
    }

    /// CFE configuration with the same number of parameters as the FE
    /// configuration `fe`: half the channels per direction and a causal
    /// kernel twice as wide.
    pub fn matched_cfe(fe: &EncoderConfig) -> Result<Self> {
        if fe.kind != EncoderKind::Fe || fe.channels % 2 != 0 {
            return Err(Error::InvalidArgument(
                "matched CFE needs an FE configuration with an even channel count".into(),
            ));
        }
        Ok(Self::new(EncoderKind::Cfe, fe.channels / 2, fe.layers, fe.kernel * 2))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.channels == 0 {
            errors.push("encoder.channels must be positive".to_string());
        }
        if self.layers == 0 {
            errors.push("encoder.layers must be at least 1".to_string());
        }
        if matches!(self.kind, EncoderKind::Fe | EncoderKind::Cfe) && self.kernel < 2 {
            errors.push(format!("encoder.kernel must be at least 2 for {}", self.kind));
        }
        errors
    }

    /// Rows of the code matrix.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Lstm | EncoderKind::Cfe => 2 * self.channels,
            EncoderKind::Fcnn | EncoderKind::Fe => self.channels,
        }
    }

    /// Exact number of trainable scalars for an input vocabulary of `vocab`.
    pub fn count_parameters(&self, vocab: usize) -> usize {
        let c = self.channels;
        let stem = Linear::num_parameters(vocab, c);
        match self.kind {
            EncoderKind::Lstm => {
                let first = LstmCell::num_parameters(c, c);
                let deeper = LstmCell::num_parameters(2 * c, c);
                stem + 2 * (first + (self.layers - 1) * deeper)
            }
            EncoderKind::Fcnn => stem + self.layers * Linear::num_parameters(c, c),
            EncoderKind::Fe => stem + self.layers * Conv1d::num_parameters(c, c, self.kernel),
            EncoderKind::Cfe => 2 * (stem + self.layers * Conv1d::num_parameters(c, c, self.kernel)),
        }
    }
}

/// Encoder output: one feature column per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct Code<F = f32> {
    pub features: Tensor<F>,
}

impl<F: Scalar> Code<F> {
    pub fn length(&self) -> usize {
        self.features.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug)]
struct CausalStack {
    stem: Linear,
    convs: Vec<Conv1d>,
}

#[derive(Clone, Debug)]
enum Layers {
    Lstm {
        stem: Linear,
        forward: Vec<LstmCell>,
        backward: Vec<LstmCell>,
    },
    Fcnn {
        stem: Linear,
        hidden: Vec<Linear>,
    },
    Fe {
        stem: Linear,
        convs: Vec<Conv1d>,
    },
    Cfe {
        forward: CausalStack,
        backward: CausalStack,
    },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Layers,
}

fn conv_stack<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    padding: Padding,
    rng: &mut R,
) -> Vec<Conv1d> {
    (0..cfg.layers)
        .map(|i| {
            let name = format!("{prefix}.conv{i}");
            let c = cfg.channels;
            Conv1d::new(store, &name, c, c, cfg.kernel, 1 << i, padding, rng)
        })
        .collect()
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix` in `store`.
    pub fn new<F: Scalar, R: Rng>(
        cfg: EncoderConfig,
        vocab: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        let c = cfg.channels;
        let layers = match cfg.kind {
            EncoderKind::Lstm => {
                let stem = Linear::new(store, &format!("{prefix}.stem"), vocab, c, rng);
                let mut forward = Vec::new();
                let mut backward = Vec::new();
                for i in 0..cfg.layers {
                    let inputs = if i == 0 { c } else { 2 * c };
                    forward.push(LstmCell::new(store, &format!("{prefix}.fwd{i}"), inputs, c, rng));
                    backward.push(LstmCell::new(store, &format!("{prefix}.bwd{i}"), inputs, c, rng));
                }
                Layers::Lstm {
                    stem,
                    forward,
                    backward,
                }
            }
            EncoderKind::Fcnn => {
                let stem = Linear::new(store, &format!("{prefix}.stem"), vocab, c, rng);
                let hidden = (0..cfg.layers)
                    .map(|i| Linear::new(store, &format!("{prefix}.dense{i}"), c, c, rng))
                    .collect();
                Layers::Fcnn { stem, hidden }
            }
            EncoderKind::Fe => {
                let stem = Linear::new(store, &format!("{prefix}.stem"), vocab, c, rng);
                let convs = conv_stack(store, prefix, &cfg, Padding::Symmetric, rng);
                Layers::Fe { stem, convs }
            }
            EncoderKind::Cfe => {
                let mut stack = |dir: &str, padding| {
                    let p = format!("{prefix}.{dir}");
                    let stem = Linear::new(store, &format!("{p}.stem"), vocab, c, rng);
                    let convs = conv_stack(store, &p, &cfg, padding, rng);
                    CausalStack { stem, convs }
                };
                let forward = stack("fwd", Padding::CausalLeft);
                let backward = stack("bwd", Padding::CausalRight);
                Layers::Cfe { forward, backward }
            }
        };
        Ok(Self { config: cfg, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Builds the code `[feature_dim, l]` for a one-hot input `[vocab, l]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match &self.layers {
            Layers::Lstm {
                stem,
                forward,
                backward,
            } => encode_lstm(g, x, stem, forward, backward),
            Layers::Fcnn { stem, hidden } => encode_fcnn(g, x, stem, hidden),
            Layers::Fe { stem, convs } => conv_features(g, x, stem, convs),
            Layers::Cfe { forward, backward } => encode_cfe(g, x, forward, backward),
        }
    }

    /// Convenience wrapper evaluating the encoder outside a training graph.
    pub fn encode<F: Scalar>(&self, params: &ParamStore<F>, x: &Tensor<F>) -> Result<Code<F>> {
        let mut g = Graph::new(params);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, xv)?;
        Ok(Code {
            features: g.value(z).clone(),
        })
    }
}

fn encode_lstm<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    stem: &Linear,
    forward: &[LstmCell],
    backward: &[LstmCell],
) -> Result<Var> {
    let mut h = stem.forward(g, x)?;
    for (fcell, bcell) in forward.iter().zip(backward) {
        let len = g.value(h).cols();
        let columns: Vec<Var> = (0..len).map(|t| g.column(h, t)).collect::<Result<_>>()?;

        let mut state = LstmState::zeros(g, fcell.hidden);
        let mut fwd = Vec::with_capacity(len);
        for &col in &columns {
            state = fcell.step(g, col, state)?;
            fwd.push(state.h);
        }
        let mut state = LstmState::zeros(g, bcell.hidden);
        let mut bwd = vec![state.h; len];
        for t in (0..len).rev() {
            state = bcell.step(g, columns[t], state)?;
            bwd[t] = state.h;
        }
        let per_position: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat_rows(&[f, b]))
            .collect::<Result<_>>()?;
        h = g.concat_columns(&per_position)?;
    }
    Ok(h)
}

fn encode_fcnn<F: Scalar>(g: &mut Graph<'_, F>, x: Var, stem: &Linear, hidden: &[Linear]) -> Result<Var> {
    let s = stem.forward(g, x)?;
    let mut h = g.relu(s);
    for (i, layer) in hidden.iter().enumerate() {
        h = layer.forward(g, h)?;
        if i + 1 < hidden.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Stem followed by dilated convolutions (dilation `2^i` at layer `i`) with
/// rectifiers between layers.
fn conv_features<F: Scalar>(g: &mut Graph<'_, F>, x: Var, stem: &Linear, convs: &[Conv1d]) -> Result<Var> {
    let s = stem.forward(g, x)?;
    let mut h = g.relu(s);
    for (i, conv) in convs.iter().enumerate() {
        h = conv.forward(g, h)?;
        if i + 1 < convs.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn encode_cfe<F: Scalar>(g: &mut Graph<'_, F>, x: Var, forward: &CausalStack, backward: &CausalStack) -> Result<Var> {
    let f = conv_features(g, x, &forward.stem, &forward.convs)?;
    let b = conv_features(g, x, &backward.stem, &backward.convs)?;
    g.concat_rows(&[f, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::VOCAB_SIZE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: EncoderConfig, vocab: usize, seed: u64) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(cfg, vocab, "enc", &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn random_input(vocab: usize, len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        crate::alphabet::one_hot(&idx, vocab).unwrap()
    }

    #[test]
    fn parameter_counts_match_registered_tensors() {
        for kind in EncoderKind::ALL {
            for layers in 1..=3 {
                let cfg = EncoderConfig::new(kind, 6, layers, 3);
                let (_, store) = build(cfg, 11, 0);
                assert_eq!(cfg.count_parameters(11), store.num_scalars(), "{kind} x{layers}");
            }
        }
    }

    #[test]
    fn matched_fe_and_cfe_have_equal_counts() {
        for (c, l, k) in [(64, 4, 3), (128, 2, 2), (10, 5, 5)] {
            let fe = EncoderConfig::new(EncoderKind::Fe, c, l, k);
            let cfe = EncoderConfig::matched_cfe(&fe).unwrap();
            assert_eq!(fe.count_parameters(VOCAB_SIZE), cfe.count_parameters(VOCAB_SIZE));
            assert_eq!(fe.feature_dim(), cfe.feature_dim());
        }
    }

    #[test]
    fn doubling_channels_quadruples_conv_weights() {
        let a = EncoderConfig::new(EncoderKind::Fe, 16, 3, 3);
        let b = EncoderConfig::new(EncoderKind::Fe, 32, 3, 3);
        let conv = |c: &EncoderConfig| c.count_parameters(1) - Linear::num_parameters(1, c.channels);
        let weights = |c: &EncoderConfig| conv(c) - c.layers * c.channels;
        assert_eq!(weights(&b), 4 * weights(&a));
    }

    #[test]
    fn validation_rejects_narrow_kernels() {
        let errs = EncoderConfig::new(EncoderKind::Cfe, 0, 0, 1).validate();
        assert_eq!(errs.len(), 3);
        assert!(EncoderConfig::new(EncoderKind::Fcnn, 4, 1, 1).validate().is_empty());
        assert!("cfe".parse::<EncoderKind>().is_ok());
        assert!("GRU".parse::<EncoderKind>().is_err());
    }

    #[test]
    fn all_encoders_preserve_length() {
        for kind in EncoderKind::ALL {
            let cfg = EncoderConfig::new(kind, 4, 2, 3);
            let (enc, store) = build(cfg, 9, 1);
            for len in [1, 2, 7] {
                let code = enc.encode(&store, &random_input(9, len, len as u64)).unwrap();
                assert_eq!(code.length(), len);
                assert_eq!(code.feature_dim(), cfg.feature_dim());
            }
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn lstm_zero_weights_give_zero_code() {
        let (enc, mut store) = build(EncoderConfig::new(EncoderKind::Lstm, 5, 2, 1), 9, 2);
        zero_all(&mut store);
        let code = enc.encode(&store, &random_input(9, 4, 0)).unwrap();
        assert!(code.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_column() {
        let (enc, store) = build(EncoderConfig::new(EncoderKind::Lstm, 3, 1, 1), 9, 3);
        let code = enc.encode(&store, &random_input(9, 1, 4)).unwrap();
        assert_eq!(code.features.shape(), &[6, 1]);
    }

    /// Swaps every `<prefix>.fwd*` tensor with its `<prefix>.bwd*` counterpart.
    fn swap_directions(store: &mut ParamStore<f64>) {
        let pairs: Vec<_> = store
            .ids()
            .filter(|&id| store.name(id).contains(".fwd"))
            .map(|id| {
                let other = store.name(id).replace(".fwd", ".bwd");
                (id, store.find(&other).unwrap())
            })
            .collect();
        for (a, b) in pairs {
            let ta = store.get(a).clone();
            let tb = store.get(b).clone();
            *store.get_mut(a) = tb;
            *store.get_mut(b) = ta;
        }
    }

    fn reversed_columns(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                out.set2(i, j, t.get2(i, c - 1 - j));
            }
        }
        out
    }

    fn check_mirror(kind: EncoderKind, layers: usize) {
        let cfg = EncoderConfig::new(kind, 4, layers, 3);
        let half = cfg.channels;
        for seed in 0..5 {
            let (enc, store) = build(cfg, 9, seed);
            let x = random_input(9, 6, 100 + seed);
            let z = enc.encode(&store, &x).unwrap().features;
            let mut mirrored = store.clone();
            swap_directions(&mut mirrored);
            let zr = enc.encode(&mirrored, &reversed_columns(&x)).unwrap().features;
            for t in 0..6 {
                for f in 0..half {
                    let fwd = z.get2(f, t);
                    let bwd = z.get2(half + f, t);
                    assert!((zr.get2(half + f, 5 - t) - fwd).abs() < 1e-12);
                    assert!((zr.get2(f, 5 - t) - bwd).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lstm_reversal_swaps_halves() {
        // deeper layers read [fwd; bwd], which mirroring reorders
        check_mirror(EncoderKind::Lstm, 1);
    }

    #[test]
    fn cfe_reversal_swaps_halves() {
        check_mirror(EncoderKind::Cfe, 3);
    }

    #[test]
    fn fcnn_is_position_wise() {
        let (enc, store) = build(EncoderConfig::new(EncoderKind::Fcnn, 5, 3, 1), 9, 7);
        let x = random_input(9, 5, 8);
        let z = enc.encode(&store, &x).unwrap().features;
        // permute columns: reverse
        let zr = enc.encode(&store, &reversed_columns(&x)).unwrap().features;
        assert_eq!(reversed_columns(&z), zr);
        // perturb column 2 only
        let mut xp = x.clone();
        for r in 0..9 {
            xp.set2(r, 2, if r == 0 { 1.0 } else { 0.0 });
        }
        let zp = enc.encode(&store, &xp).unwrap().features;
        for t in [0, 1, 3, 4] {
            assert_eq!(z.column_values(t), zp.column_values(t));
        }
    }

    #[test]
    fn fcnn_column_matches_direct_mlp() {
        let (enc, store) = build(EncoderConfig::new(EncoderKind::Fcnn, 4, 2, 1), 6, 9);
        let x = random_input(6, 1, 10);
        let z = enc.encode(&store, &x).unwrap().features;
        let p = |n: &str| store.get(store.find(n).unwrap()).clone();
        let dense = |w: &Tensor<f64>, b: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|i| b.data()[i] + (0..w.cols()).map(|k| w.get2(i, k) * v[k]).sum::<f64>())
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let h = relu(dense(&p("enc.stem.weight"), &p("enc.stem.bias"), x.data()));
        let h = relu(dense(&p("enc.dense0.weight"), &p("enc.dense0.bias"), &h));
        let h = dense(&p("enc.dense1.weight"), &p("enc.dense1.bias"), &h);
        for (a, b) in h.iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fe_zero_kernels_give_bias_columns() {
        let (enc, mut store) = build(EncoderConfig::new(EncoderKind::Fe, 4, 3, 3), 9, 11);
        let kernels: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("kernel")).collect();
        for id in kernels {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let z = enc.encode(&store, &random_input(9, 6, 12)).unwrap().features;
        let bias = store.get(store.find("enc.conv2.bias").unwrap()).clone();
        for t in 0..6 {
            assert_eq!(z.column_values(t), bias.data());
        }
    }

    /// Positions whose perturbation changes feature rows `rows` at position `t`.
    fn sensitivity(
        enc: &Encoder,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        t: usize,
        rows: std::ops::Range<usize>,
    ) -> Vec<usize> {
        let base = enc.encode(store, x).unwrap().features;
        let vocab = x.rows();
        (0..x.cols())
            .filter(|&p| {
                let current = (0..vocab).find(|&r| x.get2(r, p) == 1.0).unwrap();
                (1..vocab).any(|shift| {
                    let mut xp = x.clone();
                    xp.set2(current, p, 0.0);
                    xp.set2((current + shift) % vocab, p, 1.0);
                    let z = enc.encode(store, &xp).unwrap().features;
                    rows.clone().any(|r| z.get2(r, t) != base.get2(r, t))
                })
            })
            .collect()
    }

    #[test]
    fn fe_receptive_field_radius() {
        // k=3, two layers: radius 1 + 2 = 3 on each side
        let (enc, store) = build(EncoderConfig::new(EncoderKind::Fe, 8, 2, 3), 7, 13);
        let x = random_input(7, 15, 14);
        assert_eq!(sensitivity(&enc, &store, &x, 7, 0..8), (4..=10).collect::<Vec<_>>());
    }

    #[test]
    fn fe_single_layer_is_plain_conv() {
        let (enc, store) = build(EncoderConfig::new(EncoderKind::Fe, 3, 1, 3), 5, 15);
        let x = random_input(5, 4, 16);
        let z = enc.encode(&store, &x).unwrap().features;
        let p = |n: &str| store.get(store.find(n).unwrap()).clone();
        let stem = crate::tensor::matmul(&p("enc.stem.weight"), &x).unwrap();
        let mut h = stem.clone();
        let b = p("enc.stem.bias");
        for r in 0..3 {
            for c in 0..4 {
                h.set2(r, c, (stem.get2(r, c) + b.data()[r]).max(0.0));
            }
        }
        let k = p("enc.conv0.kernel");
        let kb = p("enc.conv0.bias");
        for o in 0..3 {
            for t in 0..4 {
                let mut s = kb.data()[o];
                for c in 0..3 {
                    for j in 0..3 {
                        let src = t as isize + j as isize - 1;
                        if (0..4).contains(&src) {
                            s += k.data()[(o * 3 + c) * 3 + j] * h.get2(c, src as usize);
                        }
                    }
                }
                assert!((s - z.get2(o, t)).abs() < 1e-12);
            }
        }
    }
}
