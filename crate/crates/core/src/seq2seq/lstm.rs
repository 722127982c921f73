use super::{LstmLayer, ModelError, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, Real};

/// Forward quantities of one cell step, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CellCache<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// Activated gates `[i | f | g | o]`.
    pub gates: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

fn check_shapes<T: Real>(x: &[T], h: &[T], c: &[T], p: &LstmLayer<T>) -> Result<()> {
    let hidden = p.hidden();
    if x.len() != p.input() || h.len() != hidden || c.len() != hidden || p.w.rows() != 4 * hidden {
        return Err(ModelError::Contract(format!(
            "lstm cell expects x[{}], h[{hidden}], c[{hidden}]; got x[{}], h[{}], c[{}]",
            p.input(),
            x.len(),
            h.len(),
            c.len()
        )));
    }
    Ok(())
}

pub(crate) fn cell_step<T: Real>(p: &LstmLayer<T>, x: &[T], h_prev: &[T], c_prev: &[T]) -> CellCache<T> {
    let hidden = h_prev.len();
    let mut gates = p.b.data().to_vec();
    matvec_acc(&p.w, x, &mut gates);
    matvec_acc(&p.u, h_prev, &mut gates);

    let mut c = vec![T::zero(); hidden];
    let mut tanh_c = vec![T::zero(); hidden];
    let mut h = vec![T::zero(); hidden];
    for k in 0..hidden {
        let i = sigmoid(gates[k]);
        let f = sigmoid(gates[hidden + k]);
        let g = gates[2 * hidden + k].tanh();
        let o = sigmoid(gates[3 * hidden + k]);
        gates[k] = i;
        gates[hidden + k] = f;
        gates[2 * hidden + k] = g;
        gates[3 * hidden + k] = o;
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
    CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c,
        tanh_c,
        h,
    }
}

/// Backward through one cell step. Accumulates weight gradients into
/// `grads` and returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn cell_backward<T: Real>(
    p: &LstmLayer<T>,
    cache: &CellCache<T>,
    dh: &[T],
    dc: &[T],
    grads: &mut LstmLayer<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hidden = dh.len();
    let one = T::one();
    let g = &cache.gates;
    let mut dz = vec![T::zero(); 4 * hidden];
    let mut dc_prev = vec![T::zero(); hidden];
    for k in 0..hidden {
        let (i, f, gg, o) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
        let tc = cache.tanh_c[k];
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * o * (one - tc * tc);
        dz[k] = dct * gg * i * (one - i);
        dz[hidden + k] = dct * cache.c_prev[k] * f * (one - f);
        dz[2 * hidden + k] = dct * i * (one - gg * gg);
        dz[3 * hidden + k] = d_o * o * (one - o);
        dc_prev[k] = dct * f;
    }
    outer_acc(&mut grads.w, &dz, &cache.x);
    outer_acc(&mut grads.u, &dz, &cache.h_prev);
    for (b, &d) in grads.b.data_mut().iter_mut().zip(&dz) {
        *b = *b + d;
    }
    let mut dx = vec![T::zero(); cache.x.len()];
    matvec_t_acc(&p.w, &dz, &mut dx);
    let mut dh_prev = vec![T::zero(); hidden];
    matvec_t_acc(&p.u, &dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// One LSTM step:
/// `i = σ(W_i x + U_i h + b_i)`, `f = σ(..)`, `g = tanh(..)`, `o = σ(..)`,
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
pub fn lstm_cell_forward<T: Real>(x: &[T], h: &[T], c: &[T], p: &LstmLayer<T>) -> Result<(Vec<T>, Vec<T>)> {
    check_shapes(x, h, c, p)?;
    let cache = cell_step(p, x, h, c);
    Ok((cache.h, cache.c))
}

#[derive(Debug, Clone)]
pub struct CellGrads<T> {
    pub dx: Vec<T>,
    pub dh_prev: Vec<T>,
    pub dc_prev: Vec<T>,
    pub params: LstmLayer<T>,
}

/// Gradients of a scalar loss through one cell step, given the loss
/// gradients with respect to the step outputs `h'` and `c'`.
pub fn lstm_cell_backward<T: Real>(
    x: &[T],
    h: &[T],
    c: &[T],
    p: &LstmLayer<T>,
    dh_out: &[T],
    dc_out: &[T],
) -> Result<CellGrads<T>> {
    check_shapes(x, h, c, p)?;
    if dh_out.len() != h.len() || dc_out.len() != c.len() {
        return Err(ModelError::Contract("output gradient width mismatch".into()));
    }
    let cache = cell_step(p, x, h, c);
    let mut params = LstmLayer::zeros(p.input(), p.hidden());
    let (dx, dh_prev, dc_prev) = cell_backward(p, &cache, dh_out, dc_out, &mut params);
    Ok(CellGrads {
        dx,
        dh_prev,
        dc_prev,
        params,
    })
}
