//! Finite-difference gradient checking.
//!
//! [`grad_check`] compares analytic gradients against central differences
//! `(f(w + ε) - f(w - ε)) / 2ε`, one component at a time, and reports the
//! worst relative error `|a - n| / max(|a|, |n|, 1e-8)` per tensor.
//! [`run_suite`] applies it to every backward rule in the crate, always in
//! `f64`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{make_batches, EncodedExample, TokenId, EOS, GO, PAD};
use crate::seq2seq::{
    self, decode_backward, decode_cached, embedding_backward, embedding_lookup, encode_backward, encode_cached,
    forward_backward, lstm_cell_backward, lstm_cell_forward, sequence_loss, sequence_loss_backward, Hyper, LayerState,
    LstmLayer, LstmState, ModelError, ModelParams,
};
use crate::tensor::{activate, activate_backward, matmul, matmul_backward, softmax_xent, Activation, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Tensors up to this size are checked exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 1000;
/// Components sampled from larger tensors.
pub const SAMPLED_COMPONENTS: usize = 200;

const REL_FLOOR: f64 = 1e-8;
/// Half-width of the uniform draw for random model parameters.
pub const PARAM_SCALE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite loss when perturbing {param}[{index}]")]
    NonFinite { param: String, index: usize },
    #[error("{0} names, {1} tensors and {2} gradients do not line up")]
    Arity(usize, usize, usize),
    #[error("gradient for {0} has the wrong shape")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GradCheckError>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rule: String,
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
    pub elapsed_ms: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `f` at `params`.
pub fn grad_check<F>(
    rule: &str,
    f: F,
    names: &[&str],
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    if names.len() != params.len() || params.len() != analytic.len() {
        return Err(GradCheckError::Arity(names.len(), params.len(), analytic.len()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (i, name) in names.iter().enumerate() {
        if analytic[i].shape() != params[i].shape() {
            return Err(GradCheckError::Shape(name.to_string()));
        }
        let len = params[i].len();
        let indices: Vec<usize> = if len <= EXHAUSTIVE_LIMIT {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut rng, len, SAMPLED_COMPONENTS).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut report = TensorReport {
            name: name.to_string(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for idx in indices {
            let original = work[i].data()[idx];
            work[i].data_mut()[idx] = original + config.epsilon;
            let plus = f(&work);
            work[i].data_mut()[idx] = original - config.epsilon;
            let minus = f(&work);
            work[i].data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: name.to_string(),
                    index: idx,
                });
            }
            let numeric = (plus - minus) / (2.0 * config.epsilon);
            let err = relative_error(analytic[i].data()[idx], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = idx;
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport {
        rule: rule.to_string(),
        tensors,
        tolerance: config.tolerance,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    t
}

fn weighted_sum(weights: &Tensor<f64>, values: &[f64]) -> f64 {
    weights.data().iter().zip(values).map(|(w, v)| w * v).sum()
}

/// Model with every tensor (biases included) drawn from `±scale`, so gates
/// sit away from their linear regime.
pub fn random_params(hyper: Hyper, seed: u64, scale: f64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(hyper);
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(&mut rng, &shape, scale);
    }
    p
}

/// The small configuration used for the end-to-end check.
pub fn small_hyper() -> Hyper {
    Hyper::new(5, 4, 3, 2)
}

/// Two examples of different lengths, so the batch carries padding.
/// `V = 5` leaves ids 3 and 4 as the only non-special tokens.
pub fn small_examples() -> Vec<EncodedExample> {
    let make = |source: &[TokenId], answer: &[TokenId]| EncodedExample {
        source: source.to_vec(),
        decoder_input: std::iter::once(GO).chain(answer.iter().copied()).collect(),
        decoder_target: answer.iter().copied().chain(std::iter::once(EOS)).collect(),
        mask: vec![1; answer.len() + 1],
    };
    vec![make(&[4, 3, 4], &[3, 4, 4]), make(&[3, 4], &[4, 3])]
}

fn check_matmul(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let a = random_tensor(rng, &[3, 4], 1.0);
    let b = random_tensor(rng, &[4, 2], 1.0);
    let r = random_tensor(rng, &[3, 2], 1.0);
    let (ga, gb) = matmul_backward(&a, &b, &r)?;
    grad_check(
        "matmul",
        |p| weighted_sum(&r, matmul(&p[0], &p[1]).expect("shapes fixed").data()),
        &["a", "b"],
        &[a, b],
        &[ga, gb],
        cfg,
    )
}

fn check_activation(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, kind: Activation) -> Result<GradCheckReport> {
    let x = random_tensor(rng, &[8], 3.0);
    let r = random_tensor(rng, &[8], 1.0);
    let y = activate(&x, kind);
    let gx = activate_backward(&y, &r, kind)?;
    let rule = match kind {
        Activation::Sigmoid => "sigmoid",
        Activation::Tanh => "tanh",
    };
    grad_check(
        rule,
        |p| weighted_sum(&r, activate(&p[0], kind).data()),
        &["x"],
        &[x],
        &[gx],
        cfg,
    )
}

fn check_softmax_xent(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let logits = random_tensor(rng, &[7], 2.0);
    let (_, grad) = softmax_xent(logits.data(), 3)?;
    grad_check(
        "softmax_xent",
        |p| softmax_xent(p[0].data(), 3).expect("target in range").0,
        &["logits"],
        &[logits],
        &[Tensor::vector(grad)],
        cfg,
    )
}

fn check_embedding(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let ids = [1, 4, 4, 2];
    let table = random_tensor(rng, &[6, 3], 1.0);
    let r = random_tensor(rng, &[4, 3], 1.0);
    let grad = embedding_backward(&ids, &r, 6)?;
    grad_check(
        "embedding_lookup",
        |p| weighted_sum(&r, embedding_lookup(&p[0], &ids).expect("ids in range").data()),
        &["embedding"],
        &[table],
        &[grad],
        cfg,
    )
}

fn check_lstm_cell(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (input, hidden) = (4, 3);
    let layer = LstmLayer {
        w: random_tensor(rng, &[4 * hidden, input], 0.8),
        u: random_tensor(rng, &[4 * hidden, hidden], 0.8),
        b: random_tensor(rng, &[4 * hidden], 0.8),
    };
    let x = random_tensor(rng, &[input], 1.0);
    let h = random_tensor(rng, &[hidden], 1.0);
    let c = random_tensor(rng, &[hidden], 1.0);
    let rh = random_tensor(rng, &[hidden], 1.0);
    let rc = random_tensor(rng, &[hidden], 1.0);
    let g = lstm_cell_backward(x.data(), h.data(), c.data(), &layer, rh.data(), rc.data())?;
    let loss = |p: &[Tensor<f64>]| {
        let layer = LstmLayer {
            w: p[0].clone(),
            u: p[1].clone(),
            b: p[2].clone(),
        };
        let (h2, c2) = lstm_cell_forward(p[3].data(), p[4].data(), p[5].data(), &layer).expect("shapes fixed");
        weighted_sum(&rh, &h2) + weighted_sum(&rc, &c2)
    };
    grad_check(
        "lstm_cell",
        loss,
        &["w", "u", "b", "x", "h", "c"],
        &[layer.w.clone(), layer.u.clone(), layer.b.clone(), x, h, c],
        &[
            g.params.w,
            g.params.u,
            g.params.b,
            Tensor::vector(g.dx),
            Tensor::vector(g.dh_prev),
            Tensor::vector(g.dc_prev),
        ],
        cfg,
    )
}

fn state_weights(rng: &mut ChaCha8Rng, hyper: Hyper) -> LstmState<f64> {
    LstmState {
        layers: (0..hyper.num_layers)
            .map(|_| LayerState {
                h: random_tensor(rng, &[hyper.hidden], 1.0).into_data(),
                c: random_tensor(rng, &[hyper.hidden], 1.0).into_data(),
            })
            .collect(),
    }
}

fn state_dot(weights: &LstmState<f64>, state: &LstmState<f64>) -> f64 {
    weights
        .layers
        .iter()
        .zip(&state.layers)
        .map(|(w, s)| {
            w.h.iter().zip(&s.h).map(|(a, b)| a * b).sum::<f64>() + w.c.iter().zip(&s.c).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

/// Indices into the canonical tensor list for a subset of the model.
fn model_subset(hyper: &Hyper, prefixes: &[&str]) -> Vec<usize> {
    ModelParams::<f64>::tensor_names(hyper)
        .iter()
        .enumerate()
        .filter(|(_, n)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(i, _)| i)
        .collect()
}

fn check_model_subset<F>(
    rule: &str,
    params: &ModelParams<f64>,
    grads: &ModelParams<f64>,
    prefixes: &[&str],
    extra: Vec<(&str, Tensor<f64>, Tensor<f64>)>,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams<f64>, &[Tensor<f64>]) -> f64,
{
    let hyper = params.hyper;
    let all_names = ModelParams::<f64>::tensor_names(&hyper);
    let subset = model_subset(&hyper, prefixes);
    let base: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let grad_list: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();

    let mut names: Vec<&str> = subset.iter().map(|&i| all_names[i].as_str()).collect();
    let mut values: Vec<Tensor<f64>> = subset.iter().map(|&i| base[i].clone()).collect();
    let mut analytic: Vec<Tensor<f64>> = subset.iter().map(|&i| grad_list[i].clone()).collect();
    for (name, value, grad) in extra {
        names.push(name);
        values.push(value);
        analytic.push(grad);
    }
    let n_model = subset.len();
    let f = |p: &[Tensor<f64>]| {
        let mut full = base.clone();
        for (k, &i) in subset.iter().enumerate() {
            full[i] = p[k].clone();
        }
        let model = ModelParams::from_tensors(hyper, full).expect("shapes preserved");
        loss(&model, &p[n_model..])
    };
    grad_check(rule, f, &names, &values, &analytic, cfg)
}

fn check_encoder(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let hyper = small_hyper();
    let params = random_params(hyper, rng.random(), PARAM_SCALE);
    let source = [4, 3, 4, PAD];
    let weights = state_weights(rng, hyper);
    let (_, caches) = encode_cached(&params, &source, 3)?;
    let mut grads = params.zeros_like();
    encode_backward(&params, &source, &caches, weights.clone(), &mut grads);
    check_model_subset(
        "encoder_stack",
        &params,
        &grads,
        &["embedding", "encoder."],
        vec![],
        |model, _| state_dot(&weights, &seq2seq::encode(&source, 3, model).expect("valid source")),
        cfg,
    )
}

fn state_from(flat: &[Tensor<f64>]) -> LstmState<f64> {
    LstmState {
        layers: flat
            .chunks(2)
            .map(|pair| LayerState {
                h: pair[0].data().to_vec(),
                c: pair[1].data().to_vec(),
            })
            .collect(),
    }
}

fn check_decoder(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let hyper = small_hyper();
    let params = random_params(hyper, rng.random(), PARAM_SCALE);
    let init = state_weights(rng, hyper);
    let decoder_input = [GO, 4, 3, 4];
    let targets = [4, 3, 4, EOS];
    let mask = [1, 1, 1, 1];
    let (rows, caches) = decode_cached(&params, &decoder_input, &init)?;
    let logits = Tensor::matrix(rows.len(), hyper.vocab_size, rows.concat())?;
    let dlogits = sequence_loss_backward(&logits, &targets, &mask)?;
    let dl_rows: Vec<Vec<f64>> = (0..dlogits.rows()).map(|t| dlogits.row(t).to_vec()).collect();
    let mut grads = params.zeros_like();
    let dinit = decode_backward(&params, &decoder_input, &caches, &dl_rows, &mut grads);

    let mut extra = Vec::new();
    let labels = ["init.0.h", "init.0.c", "init.1.h", "init.1.c"];
    for (l, (value, grad)) in init.layers.iter().zip(&dinit.layers).enumerate() {
        extra.push((labels[2 * l], Tensor::vector(value.h.clone()), Tensor::vector(grad.h.clone())));
        extra.push((labels[2 * l + 1], Tensor::vector(value.c.clone()), Tensor::vector(grad.c.clone())));
    }
    check_model_subset(
        "decoder_stack+projection",
        &params,
        &grads,
        &["embedding", "decoder.", "projection."],
        extra,
        |model, state| {
            let logits = seq2seq::decode_train(&decoder_input, &state_from(state), model).expect("valid input");
            sequence_loss(&logits, &targets, &mask).expect("mask non-empty")
        },
        cfg,
    )
}

fn check_sequence_loss(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let logits = random_tensor(rng, &[4, 6], 2.0);
    let targets = [5, 1, 2, PAD];
    let mask = [1, 1, 1, 0];
    let grad = sequence_loss_backward(&logits, &targets, &mask)?;
    grad_check(
        "sequence_loss",
        |p| sequence_loss(&p[0], &targets, &mask).expect("mask non-empty"),
        &["logits"],
        &[logits],
        &[grad],
        cfg,
    )
}

/// The end-to-end check: batch loss of the full encoder-decoder.
pub fn check_seq2seq(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let hyper = small_hyper();
    let params = random_params(hyper, cfg.seed, PARAM_SCALE);
    let batch = make_batches(&small_examples(), 2, None)
        .expect("non-empty")
        .remove(0);
    let (_, grads) = forward_backward(&batch, &params)?;
    check_model_subset(
        "seq2seq",
        &params,
        &grads,
        &[""],
        vec![],
        |model, _| forward_backward(&batch, model).expect("finite loss").0,
        cfg,
    )
}

/// Checks every backward rule in the crate.
pub fn run_suite(config: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(vec![
        check_matmul(&mut rng, config)?,
        check_activation(&mut rng, config, Activation::Sigmoid)?,
        check_activation(&mut rng, config, Activation::Tanh)?,
        check_softmax_xent(&mut rng, config)?,
        check_embedding(&mut rng, config)?,
        check_lstm_cell(&mut rng, config)?,
        check_encoder(&mut rng, config)?,
        check_decoder(&mut rng, config)?,
        check_sequence_loss(&mut rng, config)?,
        check_seq2seq(config)?,
    ])
}
