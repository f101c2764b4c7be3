#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textnorm::autograd::{Graph, ParamId, ParamStore, Var};
use textnorm::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_MAX_RELATIVE_ERROR: f64 = 1e-3;
pub const FD_MIN_MAGNITUDE: f64 = 1e-6;
pub const KINK_STEP: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Scalar `sum(v ⊙ W)` with fixed pseudo-random `W`, so no output entry
/// cancels another.
pub fn weighted_sum(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let w = g.constant(random_tensor(&mut rng(seed), &shape, 1.0));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn evaluate(store: &ParamStore<f64>, build: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    g.value(loss).data()[0]
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    /// Entries where a ReLU or top-d boundary sits inside the stencil, so the
    /// one-sided slopes disagree, and a narrow central difference agrees.
    pub kinks: usize,
    pub failures: Vec<String>,
}

/// Compares reverse-mode gradients with five-point central differences on
/// every entry of every parameter in `store`.
pub fn check_gradients(store: &ParamStore<f64>, build: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> GradCheck {
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let grads = g.backward(loss).expect("backward");
    let mut report = GradCheck::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let shifted = |delta: f64| {
                let mut p = store.clone();
                p.get_mut(id).data_mut()[k] += delta;
                evaluate(&p, build)
            };
            let h = FD_STEP;
            let numeric = (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let scale = analytic.abs().max(numeric.abs());
            if scale <= FD_MIN_MAGNITUDE {
                continue;
            }
            report.checked += 1;
            let rel = (analytic - numeric).abs() / scale;
            if rel >= FD_MAX_RELATIVE_ERROR {
                let h = KINK_STEP;
                let right = (shifted(2.0 * FD_STEP) - shifted(0.0)) / (2.0 * FD_STEP);
                let left = (shifted(0.0) - shifted(-2.0 * FD_STEP)) / (2.0 * FD_STEP);
                let narrow = (shifted(h) - shifted(-h)) / (2.0 * h);
                let bent = (right - left).abs() > FD_MAX_RELATIVE_ERROR * scale;
                if bent && (analytic - narrow).abs() < FD_MAX_RELATIVE_ERROR * scale {
                    report.kinks += 1;
                    continue;
                }
                report.failures.push(format!(
                    "{}[{k}]: analytic {analytic:.9e} numeric {numeric:.9e} (rel {rel:.2e})",
                    store.name(id)
                ));
            }
            report.worst = report.worst.max(rel);
        }
    }
    report
}
