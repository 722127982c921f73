use super::lstm::{cell_backward, cell_step, CellCache};
use super::{Gradients, LayerState, LstmLayer, LstmState, ModelError, ModelParams, Result};
use crate::corpus::{Batch, EncodedExample, TokenId, EOS, GO, PAD};
use crate::parallel::Execution;
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, softmax_xent, Real, Tensor, TensorError};

/// Number of gradient partial sums per batch. Fixed so that the reduction
/// order, and therefore the result, does not depend on the thread count.
const GRAD_CHUNKS: usize = 8;

fn check_id(id: TokenId, vocab_size: usize) -> Result<()> {
    if id >= vocab_size {
        return Err(ModelError::TokenOutOfRange { id, vocab_size });
    }
    Ok(())
}

/// Gathers embedding rows: `[len × E]`.
pub fn embedding_lookup<T: Real>(embedding: &Tensor<T>, ids: &[TokenId]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ids.len() * embedding.cols());
    for &id in ids {
        check_id(id, embedding.rows())?;
        data.extend_from_slice(embedding.row(id));
    }
    Ok(Tensor::matrix(ids.len(), embedding.cols(), data)?)
}

/// Scatter-adds row gradients back into a `[V × E]` gradient.
pub fn embedding_backward<T: Real>(ids: &[TokenId], grad_out: &Tensor<T>, vocab_size: usize) -> Result<Tensor<T>> {
    if grad_out.rows() != ids.len() {
        return Err(TensorError::Shape {
            op: "embedding_backward",
            left: grad_out.shape().to_vec(),
            right: vec![ids.len()],
        }
        .into());
    }
    let mut grad = Tensor::zeros(&[vocab_size, grad_out.cols()]);
    for (r, &id) in ids.iter().enumerate() {
        check_id(id, vocab_size)?;
        add_into(grad.row_mut(id), grad_out.row(r));
    }
    Ok(grad)
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Advances a layer stack by one step, returning the per-layer caches.
fn stack_step<T: Real>(layers: &[LstmLayer<T>], x: &[T], state: &mut LstmState<T>) -> Vec<CellCache<T>> {
    let mut caches: Vec<CellCache<T>> = Vec::with_capacity(layers.len());
    for (layer, slot) in layers.iter().zip(state.layers.iter_mut()) {
        let input = caches.last().map_or(x, |c| c.h.as_slice());
        let cache = cell_step(layer, input, &slot.h, &slot.c);
        slot.h.clone_from(&cache.h);
        slot.c.clone_from(&cache.c);
        caches.push(cache);
    }
    caches
}

/// Per-step, per-layer caches kept for the backward pass.
type StepCaches<T> = Vec<Vec<CellCache<T>>>;

fn project<T: Real>(params: &ModelParams<T>, h_top: &[T]) -> Vec<T> {
    let mut logits = params.projection_b.data().to_vec();
    matvec_acc(&params.projection_w, h_top, &mut logits);
    logits
}

pub(crate) fn encode_cached<T: Real>(
    params: &ModelParams<T>,
    source: &[TokenId],
    source_length: usize,
) -> Result<(LstmState<T>, StepCaches<T>)> {
    if source_length == 0 || source_length > source.len() {
        return Err(ModelError::Contract(format!(
            "source_length {source_length} must be in 1..={}",
            source.len()
        )));
    }
    let hyper = params.hyper;
    let mut state = LstmState::zeros(hyper.num_layers, hyper.hidden);
    let mut caches = Vec::with_capacity(source_length);
    for &id in &source[..source_length] {
        check_id(id, hyper.vocab_size)?;
        caches.push(stack_step(&params.encoder, params.embedding.row(id), &mut state));
    }
    Ok((state, caches))
}

/// Runs the encoder over the first `source_length` ids from a zero state
/// and returns the final `(h, c)` of every layer.
pub fn encode<T: Real>(source: &[TokenId], source_length: usize, params: &ModelParams<T>) -> Result<LstmState<T>> {
    encode_cached(params, source, source_length).map(|(state, _)| state)
}

fn check_init<T: Real>(params: &ModelParams<T>, init: &LstmState<T>) -> Result<()> {
    let h = params.hyper.hidden;
    if init.layers.len() != params.hyper.num_layers || init.layers.iter().any(|l| l.h.len() != h || l.c.len() != h) {
        return Err(ModelError::Contract("initial state does not match model shape".into()));
    }
    Ok(())
}

pub(crate) fn decode_cached<T: Real>(
    params: &ModelParams<T>,
    decoder_input: &[TokenId],
    init: &LstmState<T>,
) -> Result<(Vec<Vec<T>>, StepCaches<T>)> {
    if decoder_input.first() != Some(&GO) {
        return Err(ModelError::Contract("decoder input must start with <go>".into()));
    }
    check_init(params, init)?;
    let mut state = init.clone();
    let mut logits = Vec::with_capacity(decoder_input.len());
    let mut caches = Vec::with_capacity(decoder_input.len());
    for &id in decoder_input {
        check_id(id, params.hyper.vocab_size)?;
        let step = stack_step(&params.decoder, params.embedding.row(id), &mut state);
        logits.push(project(params, &step.last().expect("at least one layer").h));
        caches.push(step);
    }
    Ok((logits, caches))
}

/// Teacher-forced decoder pass: one logits row per decoder input step.
pub fn decode_train<T: Real>(decoder_input: &[TokenId], init: &LstmState<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let (rows, _) = decode_cached(params, decoder_input, init)?;
    let vocab = params.hyper.vocab_size;
    Ok(Tensor::matrix(rows.len(), vocab, rows.concat())?)
}

/// Backpropagates `dlogits` (one row per decoder step) through the decoder
/// stack and projection. Returns the gradient with respect to the initial
/// state.
pub(crate) fn decode_backward<T: Real>(
    params: &ModelParams<T>,
    decoder_input: &[TokenId],
    caches: &[Vec<CellCache<T>>],
    dlogits: &[Vec<T>],
    grads: &mut Gradients<T>,
) -> LstmState<T> {
    let hyper = params.hyper;
    let mut carry = LstmState::zeros(hyper.num_layers, hyper.hidden);
    for t in (0..caches.len()).rev() {
        let step = &caches[t];
        let top = &step[hyper.num_layers - 1];
        let mut above = vec![T::zero(); hyper.hidden];
        let dl = &dlogits[t];
        if dl.iter().any(|&v| v != T::zero()) {
            outer_acc(&mut grads.projection_w, dl, &top.h);
            add_into(grads.projection_b.data_mut(), dl);
            matvec_t_acc(&params.projection_w, dl, &mut above);
        }
        for l in (0..hyper.num_layers).rev() {
            let slot = &mut carry.layers[l];
            add_into(&mut above, &slot.h);
            let (dx, dh_prev, dc_prev) = cell_backward(&params.decoder[l], &step[l], &above, &slot.c, &mut grads.decoder[l]);
            slot.h = dh_prev;
            slot.c = dc_prev;
            above = dx;
        }
        add_into(grads.embedding.row_mut(decoder_input[t]), &above);
    }
    carry
}

/// Backpropagates the gradient of the encoder's final state through time.
pub(crate) fn encode_backward<T: Real>(
    params: &ModelParams<T>,
    source: &[TokenId],
    caches: &[Vec<CellCache<T>>],
    dstate: LstmState<T>,
    grads: &mut Gradients<T>,
) {
    let layers = params.hyper.num_layers;
    let mut carry = dstate;
    for t in (0..caches.len()).rev() {
        let step = &caches[t];
        let mut above: Option<Vec<T>> = None;
        for l in (0..layers).rev() {
            let LayerState { h: dh, c: dc } = &mut carry.layers[l];
            if let Some(a) = &above {
                add_into(dh, a);
            }
            let (dx, dh_prev, dc_prev) = cell_backward(&params.encoder[l], &step[l], dh, dc, &mut grads.encoder[l]);
            *dh = dh_prev;
            *dc = dc_prev;
            above = Some(dx);
        }
        if let Some(dx) = above {
            add_into(grads.embedding.row_mut(source[t]), &dx);
        }
    }
}

fn check_loss_inputs<T: Real>(logits: &Tensor<T>, targets: &[TokenId], mask: &[u8]) -> Result<usize> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(TensorError::Shape {
            op: "sequence_loss",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), mask.len()],
        }
        .into());
    }
    let supervised = mask.iter().filter(|&&m| m != 0).count();
    if supervised == 0 {
        return Err(ModelError::Contract("mask has no supervised positions".into()));
    }
    Ok(supervised)
}

/// Mean cross-entropy over the positions where `mask` is 1.
pub fn sequence_loss<T: Real>(logits: &Tensor<T>, targets: &[TokenId], mask: &[u8]) -> Result<T> {
    let supervised = check_loss_inputs(logits, targets, mask)?;
    let mut total = T::zero();
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m != 0 {
            total = total + softmax_xent(logits.row(t), target)?.0;
        }
    }
    Ok(total / T::of(supervised as f64))
}

/// Gradient of [`sequence_loss`] with respect to the logits.
pub fn sequence_loss_backward<T: Real>(logits: &Tensor<T>, targets: &[TokenId], mask: &[u8]) -> Result<Tensor<T>> {
    let supervised = check_loss_inputs(logits, targets, mask)?;
    let scale = T::one() / T::of(supervised as f64);
    let mut grad = Tensor::zeros(logits.shape());
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m != 0 {
            let (_, g) = softmax_xent(logits.row(t), target)?;
            for (dst, v) in grad.row_mut(t).iter_mut().zip(g) {
                *dst = v * scale;
            }
        }
    }
    Ok(grad)
}

/// Decoder steps that can influence the loss: up to the last supervised one.
fn supervised_steps(ex: &EncodedExample) -> usize {
    ex.mask.iter().rposition(|&m| m != 0).map_or(0, |i| i + 1)
}

/// Summed (not averaged) loss of one example; when `grads` is given, adds
/// `scale ×` its gradient.
fn example_pass<T: Real>(
    params: &ModelParams<T>,
    ex: &EncodedExample,
    source_length: usize,
    scale: T,
    grads: Option<&mut Gradients<T>>,
) -> Result<T> {
    let steps = supervised_steps(ex);
    if steps == 0 {
        return Ok(T::zero());
    }
    if ex.decoder_target.len() < steps || ex.decoder_input.len() < steps {
        return Err(ModelError::Contract("decoder input, target and mask lengths differ".into()));
    }
    let (state, enc_caches) = encode_cached(params, &ex.source, source_length)?;
    let decoder_input = &ex.decoder_input[..steps];
    let (logits, dec_caches) = decode_cached(params, decoder_input, &state)?;

    let mut loss = T::zero();
    let mut dlogits = Vec::with_capacity(steps);
    for ((step_logits, &mask), &target) in logits.iter().zip(&ex.mask).zip(&ex.decoder_target).take(steps) {
        if mask == 0 {
            dlogits.push(vec![T::zero(); params.hyper.vocab_size]);
            continue;
        }
        let (l, mut g) = softmax_xent(step_logits, target)?;
        loss = loss + l;
        g.iter_mut().for_each(|v| *v = *v * scale);
        dlogits.push(g);
    }
    if let Some(grads) = grads {
        let dinit = decode_backward(params, decoder_input, &dec_caches, &dlogits, grads);
        encode_backward(params, &ex.source, &enc_caches, dinit, grads);
    }
    Ok(loss)
}

fn batch_tokens(batch: &Batch) -> Result<usize> {
    if batch.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    if batch.source_lengths.len() != batch.examples.len() {
        return Err(ModelError::Contract("source_lengths does not match batch size".into()));
    }
    let tokens = batch.target_tokens();
    if tokens == 0 {
        return Err(ModelError::Contract("batch has no supervised positions".into()));
    }
    Ok(tokens)
}

/// Batch loss (mean over every supervised token in the batch) and its exact
/// gradient with respect to all parameters.
pub fn forward_backward<T: Real>(batch: &Batch, params: &ModelParams<T>) -> Result<(T, Gradients<T>)> {
    forward_backward_with(batch, params, Execution::default())
}

/// [`forward_backward`] with an explicit execution mode. Examples are split
/// into a fixed number of chunks whose partial gradients are summed in
/// order, so both modes give bitwise-identical results.
pub fn forward_backward_with<T: Real>(
    batch: &Batch,
    params: &ModelParams<T>,
    exec: Execution,
) -> Result<(T, Gradients<T>)> {
    let tokens = batch_tokens(batch)?;
    let scale = T::one() / T::of(tokens as f64);
    let order: Vec<usize> = (0..batch.len()).collect();
    let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
    let partials = exec.map_chunks(&order, chunk_len, |_, chunk| -> Result<(T, Gradients<T>)> {
        let mut grads = params.zeros_like();
        let mut loss = T::zero();
        for &i in chunk {
            loss = loss + example_pass(params, &batch.examples[i], batch.source_lengths[i], scale, Some(&mut grads))?;
        }
        Ok((loss, grads))
    });

    let mut partials = partials.into_iter();
    let (mut loss, mut grads) = partials.next().expect("non-empty batch")?;
    for part in partials {
        let (l, g) = part?;
        loss = loss + l;
        grads.add_scaled(&g, T::one())?;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((loss, grads))
}

/// Forward-only pass: `(summed loss, supervised token count)`.
pub fn forward_loss<T: Real>(batch: &Batch, params: &ModelParams<T>, exec: Execution) -> Result<(T, usize)> {
    let tokens = batch_tokens(batch)?;
    let order: Vec<usize> = (0..batch.len()).collect();
    let losses = exec.map(&order, |&i| example_pass(params, &batch.examples[i], batch.source_lengths[i], T::one(), None));
    let mut total = T::zero();
    for l in losses {
        total = total + l?;
    }
    if !total.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((total, tokens))
}

/// Feeds the argmax back as the next input, starting from `<go>`.
///
/// `<pad>` and `<go>` are never chosen; ties go to the lowest id. Stops on
/// `<eos>` (not included, `terminated = true`) or after `max_steps` ids.
pub fn decode_greedy<T: Real>(init: &LstmState<T>, params: &ModelParams<T>, max_steps: usize) -> Result<(Vec<TokenId>, bool)> {
    if max_steps == 0 {
        return Err(ModelError::Contract("max_steps must be at least 1".into()));
    }
    check_init(params, init)?;
    let mut state = init.clone();
    let mut token = GO;
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let step = stack_step(&params.decoder, params.embedding.row(token), &mut state);
        let logits = project(params, &step.last().expect("at least one layer").h);
        let mut best = EOS;
        for id in (0..logits.len()).filter(|&id| id != PAD && id != GO) {
            if logits[id] > logits[best] {
                best = id;
            }
        }
        if best == EOS {
            return Ok((out, true));
        }
        out.push(best);
        token = best;
    }
    Ok((out, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batches, UNK};
    use crate::seq2seq::Hyper;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params(seed: u64) -> ModelParams<f64> {
        ModelParams::init(Hyper::new(8, 4, 3, 2), seed, None).unwrap()
    }

    fn example(source: &[TokenId], answer: &[TokenId]) -> EncodedExample {
        EncodedExample {
            source: source.to_vec(),
            decoder_input: std::iter::once(GO).chain(answer.iter().copied()).collect(),
            decoder_target: answer.iter().copied().chain(std::iter::once(EOS)).collect(),
            mask: vec![1; answer.len() + 1],
        }
    }

    #[test]
    fn single_step_encode_matches_cell_stack() {
        let p = params(1);
        let state = encode(&[5], 1, &p).unwrap();
        let zeros = vec![0.0; 3];
        let (h0, c0) = super::super::lstm_cell_forward(p.embedding.row(5), &zeros, &zeros, &p.encoder[0]).unwrap();
        let (h1, c1) = super::super::lstm_cell_forward(&h0, &zeros, &zeros, &p.encoder[1]).unwrap();
        assert_eq!(state.layers[0], LayerState { h: h0, c: c0 });
        assert_eq!(state.layers[1], LayerState { h: h1, c: c1 });
    }

    #[test]
    fn zero_params_encode_to_zero_state() {
        let p = ModelParams::<f64>::zeros(Hyper::new(8, 4, 3, 2));
        let state = encode(&[4, 5, 6], 3, &p).unwrap();
        assert_eq!(state, LstmState::zeros(2, 3));
    }

    #[test]
    fn padding_past_length_is_ignored() {
        let p = params(2);
        let padded = encode(&[4, 5, PAD, PAD], 2, &p).unwrap();
        let exact = encode(&[4, 5], 2, &p).unwrap();
        assert_eq!(padded, exact);
    }

    #[test]
    fn encode_rejects_bad_ids_and_lengths() {
        let p = params(2);
        assert!(matches!(encode(&[8], 1, &p), Err(ModelError::TokenOutOfRange { id: 8, .. })));
        assert!(encode(&[4], 0, &p).is_err());
        assert!(encode(&[4], 2, &p).is_err());
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let p = ModelParams::<f64>::zeros(Hyper::new(8, 4, 3, 2));
        let init = LstmState::zeros(2, 3);
        let logits = decode_train(&[GO, 4, 5], &init, &p).unwrap();
        assert_eq!(logits.shape(), &[3, 8]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_decode_shape() {
        let p = params(3);
        let init = encode(&[4], 1, &p).unwrap();
        assert_eq!(decode_train(&[GO], &init, &p).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn decode_requires_go() {
        let p = params(3);
        let init = encode(&[4], 1, &p).unwrap();
        assert!(matches!(decode_train(&[4, 5], &init, &p), Err(ModelError::Contract(_))));
    }

    #[test]
    fn uniform_sequence_loss() {
        let logits = Tensor::<f64>::zeros(&[3, 6]);
        let loss = sequence_loss(&logits, &[4, 5, 2], &[1, 1, 1]).unwrap();
        assert_abs_diff_eq!(loss, 6.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.7918, epsilon = 1e-4);
    }

    #[test]
    fn masked_positions_do_not_count() {
        let p = params(4);
        let init = encode(&[4, 5], 2, &p).unwrap();
        let logits = decode_train(&[GO, 6, 7], &init, &p).unwrap();
        let full = sequence_loss(&logits, &[6, 7, PAD], &[1, 1, 0]).unwrap();
        let two = Tensor::matrix(2, 8, logits.data()[..16].to_vec()).unwrap();
        let head = sequence_loss(&two, &[6, 7], &[1, 1]).unwrap();
        assert_abs_diff_eq!(full, head, epsilon = 1e-15);
        assert!(matches!(sequence_loss(&logits, &[6, 7, 2], &[0, 0, 0]), Err(ModelError::Contract(_))));
    }

    #[test]
    fn zero_params_projection_bias_gradient_closed_form() {
        let hyper = Hyper::new(6, 4, 3, 2);
        let p = ModelParams::<f64>::zeros(hyper);
        let ex = example(&[4, 5], &[4, 5]);
        let batch = make_batches(std::slice::from_ref(&ex), 1, None).unwrap().remove(0);
        let (loss, grads) = forward_backward(&batch, &p).unwrap();
        assert_abs_diff_eq!(loss, 6.0f64.ln(), epsilon = 1e-12);
        // Mean over the three target steps of (uniform - onehot).
        let mut expected = vec![1.0 / 6.0; 6];
        for &t in &ex.decoder_target {
            expected[t] -= 1.0 / 3.0;
        }
        for (g, e) in grads.projection_b.data().iter().zip(&expected) {
            assert_abs_diff_eq!(*g, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_contributes_no_gradient() {
        let p = params(5);
        let live = example(&[4, 5], &[6]);
        let mut dead = example(&[7], &[4]);
        dead.mask.iter_mut().for_each(|m| *m = 0);
        let alone = make_batches(std::slice::from_ref(&live), 2, None).unwrap().remove(0);
        let both = make_batches(&[live, dead], 2, None).unwrap().remove(0);
        let (la, ga) = forward_backward(&alone, &p).unwrap();
        let (lb, gb) = forward_backward(&both, &p).unwrap();
        assert_abs_diff_eq!(la, lb, epsilon = 1e-15);
        for (a, b) in ga.tensors().iter().zip(gb.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let p = params(6);
        let examples: Vec<_> = (0..23)
            .map(|i| example(&[4 + i % 4, 5 + i % 3, 4], &[7 - i % 3, 4 + i % 2]))
            .collect();
        let batch = make_batches(&examples, 23, Some(1)).unwrap().remove(0);
        let (ls, gs) = forward_backward_with(&batch, &p, Execution::Sequential).unwrap();
        let (lp, gp) = forward_backward_with(&batch, &p, Execution::Parallel).unwrap();
        assert_eq!(ls.to_bits(), lp.to_bits());
        assert_eq!(gs, gp);
    }

    #[test]
    fn greedy_stops_on_eos_bias() {
        let mut p = params(7);
        p.projection_b.data_mut()[EOS] = 100.0;
        let init = encode(&[4], 1, &p).unwrap();
        assert_eq!(decode_greedy(&init, &p, 10).unwrap(), (vec![], true));
    }

    #[test]
    fn zero_params_greedy_picks_eos_by_tie_break() {
        let p = ModelParams::<f64>::zeros(Hyper::new(8, 4, 3, 2));
        let init = LstmState::zeros(2, 3);
        assert_eq!(decode_greedy(&init, &p, 5).unwrap(), (vec![], true));
    }

    #[test]
    fn greedy_caps_at_max_steps() {
        let mut p = params(8);
        p.projection_b.data_mut()[UNK] = 100.0;
        let init = encode(&[4], 1, &p).unwrap();
        let (ids, terminated) = decode_greedy(&init, &p, 7).unwrap();
        assert_eq!(ids, vec![UNK; 7]);
        assert!(!terminated);
        assert!(decode_greedy(&init, &p, 0).is_err());
    }

    #[test]
    fn greedy_never_emits_pad_or_go() {
        let mut p = params(9);
        p.projection_b.data_mut()[PAD] = 100.0;
        p.projection_b.data_mut()[GO] = 100.0;
        let init = encode(&[4], 1, &p).unwrap();
        let (ids, _) = decode_greedy(&init, &p, 5).unwrap();
        assert!(ids.iter().all(|&id| id != PAD && id != GO));
    }

    proptest! {
        #[test]
        fn decoder_is_causal(seed in 0u64..1000, a in 3usize..8, b in 3usize..8, cut in 1usize..4) {
            let p = params(seed);
            let init = encode(&[4, 5], 2, &p).unwrap();
            let first = [GO, 4, 5, 6, 7];
            let mut second = first;
            second[cut] = if second[cut] == a { b } else { a };
            let l1 = decode_train(&first, &init, &p).unwrap();
            let l2 = decode_train(&second, &init, &p).unwrap();
            for t in 0..cut {
                prop_assert_eq!(l1.row(t), l2.row(t));
            }
        }

        #[test]
        fn encoder_ignores_padding_content(seed in 0u64..1000, tail in proptest::collection::vec(0usize..8, 0..4)) {
            let p = params(seed);
            let mut padded = vec![4, 6, 5];
            padded.extend(tail);
            prop_assert_eq!(encode(&padded, 3, &p).unwrap(), encode(&[4, 6, 5], 3, &p).unwrap());
        }

        #[test]
        fn zero_params_loss_is_ln_v(
            shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..6),
            v in 5usize..12,
        ) {
            let p = ModelParams::<f64>::zeros(Hyper::new(v, 3, 2, 2));
            let examples: Vec<_> = shapes.iter().enumerate().map(|(i, &(s, t))| {
                let ids = |n: usize| (0..n).map(|k| 3 + (i + k) % (v - 3)).collect::<Vec<_>>();
                example(&ids(s), &ids(t))
            }).collect();
            let batch = make_batches(&examples, examples.len(), Some(3)).unwrap().remove(0);
            let (loss, _) = forward_backward(&batch, &p).unwrap();
            prop_assert!((loss - (v as f64).ln()).abs() <= 1e-9);
        }

        #[test]
        fn greedy_is_deterministic(seed in 0u64..1000) {
            let p = params(seed);
            let init = encode(&[4, 7], 2, &p).unwrap();
            prop_assert_eq!(decode_greedy(&init, &p, 6).unwrap(), decode_greedy(&init, &p, 6).unwrap());
        }
    }
}
