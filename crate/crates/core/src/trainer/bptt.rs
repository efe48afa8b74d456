//! Batched forward/backward over a truncated BPTT window.
//!
//! Rows of every window matrix are ordered time-major: row `t·B + b` holds
//! stream `b` at step `t`. Input projections and weight gradients are done
//! as single matrix products over the whole window; only the recurrent
//! products run step by step.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::rnn::{sigmoid, Arch, LayerWeights, Model, Weights};

/// Recurrent state for `B` parallel streams.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub h: Array2<f64>,
    pub c: Option<Array2<f64>>,
}

impl BatchState {
    pub fn zeros(model: &Model, batch: usize) -> Vec<BatchState> {
        model
            .config
            .hidden
            .iter()
            .map(|&h| BatchState {
                h: Array2::zeros((batch, h)),
                c: (model.config.arch == Arch::Lstm).then(|| Array2::zeros((batch, h))),
            })
            .collect()
    }
}

struct LayerCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    /// Activated gates, `T·B x G·H`.
    acts: Array2<f64>,
    c_prev: Option<Array2<f64>>,
    tc: Option<Array2<f64>>,
    /// GRU only: the recurrent part of the candidate pre-activation.
    ah_n: Option<Array2<f64>>,
    h: Array2<f64>,
}

fn lstm_forward(lw: &LayerWeights, x: Array2<f64>, state: &mut BatchState, steps: usize) -> LayerCache {
    let (b, hd) = (state.h.nrows(), lw.hidden);
    let rows = steps * b;
    let pre_x = x.dot(&lw.u) + &lw.b;
    let mut acts = Array2::zeros((rows, 4 * hd));
    let mut h_prev = Array2::zeros((rows, hd));
    let mut c_prev = Array2::zeros((rows, hd));
    let mut tc = Array2::zeros((rows, hd));
    let mut h_all = Array2::zeros((rows, hd));
    let c_state = state.c.as_mut().expect("LSTM state has a cell");
    for t in 0..steps {
        let r0 = t * b;
        h_prev.slice_mut(s![r0..r0 + b, ..]).assign(&state.h);
        c_prev.slice_mut(s![r0..r0 + b, ..]).assign(c_state);
        let a = &pre_x.slice(s![r0..r0 + b, ..]) + &state.h.dot(&lw.w);
        for r in 0..b {
            for k in 0..hd {
                let i = sigmoid(a[[r, k]]);
                let f = sigmoid(a[[r, hd + k]]);
                let o = sigmoid(a[[r, 2 * hd + k]]);
                let g = a[[r, 3 * hd + k]].tanh();
                let c = f * c_state[[r, k]] + i * g;
                let tcv = c.tanh();
                let h = o * tcv;
                let row = r0 + r;
                acts[[row, k]] = i;
                acts[[row, hd + k]] = f;
                acts[[row, 2 * hd + k]] = o;
                acts[[row, 3 * hd + k]] = g;
                tc[[row, k]] = tcv;
                h_all[[row, k]] = h;
                c_state[[r, k]] = c;
                state.h[[r, k]] = h;
            }
        }
    }
    LayerCache {
        x,
        h_prev,
        acts,
        c_prev: Some(c_prev),
        tc: Some(tc),
        ah_n: None,
        h: h_all,
    }
}

fn gru_forward(lw: &LayerWeights, x: Array2<f64>, state: &mut BatchState, steps: usize) -> LayerCache {
    let (b, hd) = (state.h.nrows(), lw.hidden);
    let rows = steps * b;
    let ax = x.dot(&lw.u) + &lw.b;
    let mut acts = Array2::zeros((rows, 3 * hd));
    let mut h_prev = Array2::zeros((rows, hd));
    let mut ah_n = Array2::zeros((rows, hd));
    let mut h_all = Array2::zeros((rows, hd));
    for t in 0..steps {
        let r0 = t * b;
        h_prev.slice_mut(s![r0..r0 + b, ..]).assign(&state.h);
        let ah = state.h.dot(&lw.w);
        for r in 0..b {
            let row = r0 + r;
            for k in 0..hd {
                let z = sigmoid(ax[[row, k]] + ah[[r, k]]);
                let rg = sigmoid(ax[[row, hd + k]] + ah[[r, hd + k]]);
                let ahn = ah[[r, 2 * hd + k]];
                let n = (ax[[row, 2 * hd + k]] + rg * ahn).tanh();
                let h = (1.0 - z) * state.h[[r, k]] + z * n;
                acts[[row, k]] = z;
                acts[[row, hd + k]] = rg;
                acts[[row, 2 * hd + k]] = n;
                ah_n[[row, k]] = ahn;
                h_all[[row, k]] = h;
            }
        }
        state.h.assign(&h_all.slice(s![r0..r0 + b, ..]));
    }
    LayerCache {
        x,
        h_prev,
        acts,
        c_prev: None,
        tc: None,
        ah_n: Some(ah_n),
        h: h_all,
    }
}

/// Returns the gradient with respect to the layer input.
fn lstm_backward(
    lw: &LayerWeights,
    cache: &LayerCache,
    dh_out: &Array2<f64>,
    grad: &mut LayerWeights,
    b: usize,
) -> Array2<f64> {
    let hd = lw.hidden;
    let rows = dh_out.nrows();
    let steps = rows / b;
    let acts = &cache.acts;
    let c_prev = cache.c_prev.as_ref().expect("LSTM cache");
    let tc = cache.tc.as_ref().expect("LSTM cache");
    let mut da = Array2::zeros((rows, 4 * hd));
    let mut dh_next: Array2<f64> = Array2::zeros((b, hd));
    let mut dc_next: Array2<f64> = Array2::zeros((b, hd));
    for t in (0..steps).rev() {
        let r0 = t * b;
        for r in 0..b {
            let row = r0 + r;
            for k in 0..hd {
                let (i, f, o, g) = (
                    acts[[row, k]],
                    acts[[row, hd + k]],
                    acts[[row, 2 * hd + k]],
                    acts[[row, 3 * hd + k]],
                );
                let tcv = tc[[row, k]];
                let dh = dh_out[[row, k]] + dh_next[[r, k]];
                let d_o = dh * tcv;
                let dc = dc_next[[r, k]] + dh * o * (1.0 - tcv * tcv);
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev[[row, k]];
                dc_next[[r, k]] = dc * f;
                da[[row, k]] = di * i * (1.0 - i);
                da[[row, hd + k]] = df * f * (1.0 - f);
                da[[row, 2 * hd + k]] = d_o * o * (1.0 - o);
                da[[row, 3 * hd + k]] = dg * (1.0 - g * g);
            }
        }
        dh_next = da.slice(s![r0..r0 + b, ..]).dot(&lw.w.t());
    }
    grad.w += &cache.h_prev.t().dot(&da);
    grad.u += &cache.x.t().dot(&da);
    grad.b += &da.sum_axis(Axis(0));
    da.dot(&lw.u.t())
}

fn gru_backward(
    lw: &LayerWeights,
    cache: &LayerCache,
    dh_out: &Array2<f64>,
    grad: &mut LayerWeights,
    b: usize,
) -> Array2<f64> {
    let hd = lw.hidden;
    let rows = dh_out.nrows();
    let steps = rows / b;
    let acts = &cache.acts;
    let ah_n = cache.ah_n.as_ref().expect("GRU cache");
    let mut dax = Array2::zeros((rows, 3 * hd));
    let mut dah = Array2::zeros((rows, 3 * hd));
    let mut dh_next: Array2<f64> = Array2::zeros((b, hd));
    for t in (0..steps).rev() {
        let r0 = t * b;
        let mut direct = Array2::zeros((b, hd));
        for r in 0..b {
            let row = r0 + r;
            for k in 0..hd {
                let (z, rg, n) = (acts[[row, k]], acts[[row, hd + k]], acts[[row, 2 * hd + k]]);
                let hp = cache.h_prev[[row, k]];
                let dh = dh_out[[row, k]] + dh_next[[r, k]];
                let dz = dh * (n - hp);
                let dn = dh * z;
                direct[[r, k]] = dh * (1.0 - z);
                let dan = dn * (1.0 - n * n);
                let dr = dan * ah_n[[row, k]];
                let daz = dz * z * (1.0 - z);
                let dar = dr * rg * (1.0 - rg);
                dax[[row, k]] = daz;
                dax[[row, hd + k]] = dar;
                dax[[row, 2 * hd + k]] = dan;
                dah[[row, k]] = daz;
                dah[[row, hd + k]] = dar;
                dah[[row, 2 * hd + k]] = dan * rg;
            }
        }
        dh_next = direct + dah.slice(s![r0..r0 + b, ..]).dot(&lw.w.t());
    }
    grad.w += &cache.h_prev.t().dot(&dah);
    grad.u += &cache.x.t().dot(&dax);
    grad.b += &dax.sum_axis(Axis(0));
    dax.dot(&lw.u.t())
}

fn gather_embeddings(embedding: &Array2<f64>, tokens: &[u32]) -> Array2<f64> {
    let mut x = Array2::zeros((tokens.len(), embedding.ncols()));
    for (row, &tok) in tokens.iter().enumerate() {
        x.row_mut(row).assign(&embedding.row(tok as usize));
    }
    x
}

fn run_layers(model: &Model, inputs: &[u32], state: &mut [BatchState], steps: usize) -> Vec<LayerCache> {
    let mut x = gather_embeddings(&model.weights.embedding, inputs);
    let mut caches = Vec::with_capacity(model.weights.layers.len());
    for (lw, st) in model.weights.layers.iter().zip(state.iter_mut()) {
        let cache = match lw.arch {
            Arch::Lstm => lstm_forward(lw, x, st, steps),
            Arch::Gru => gru_forward(lw, x, st, steps),
        };
        x = cache.h.clone();
        caches.push(cache);
    }
    caches
}

fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

fn output_log_probs(weights: &Weights, h_top: ArrayView2<f64>) -> Array2<f64> {
    let mut lp = h_top.dot(&weights.out_w) + &weights.out_b;
    log_softmax_rows(&mut lp);
    lp
}

/// Summed negative log-likelihood of a window without gradients; advances
/// `state`.
pub fn window_nll(model: &Model, inputs: &[u32], targets: &[u32], state: &mut [BatchState]) -> f64 {
    let b = state[0].h.nrows();
    let steps = inputs.len() / b;
    let caches = run_layers(model, inputs, state, steps);
    let lp = output_log_probs(&model.weights, caches.last().expect("one layer").h.view());
    targets.iter().enumerate().map(|(row, &y)| -lp[[row, y as usize]]).sum()
}

/// Mean next-token loss over the window and its gradient. `inputs` and
/// `targets` hold `steps·B` tokens in time-major order.
pub fn window_loss_grads(model: &Model, inputs: &[u32], targets: &[u32], state: &mut [BatchState]) -> (f64, Weights) {
    let b = state[0].h.nrows();
    let steps = inputs.len() / b;
    let n = inputs.len() as f64;
    let caches = run_layers(model, inputs, state, steps);
    let h_top = &caches.last().expect("one layer").h;
    let mut dlogits = output_log_probs(&model.weights, h_top.view());
    let mut loss = 0.0;
    for (row, &y) in targets.iter().enumerate() {
        let y = y as usize;
        loss -= dlogits[[row, y]];
        let mut r = dlogits.row_mut(row);
        r.mapv_inplace(|lp| lp.exp() / n);
        r[y] -= 1.0 / n;
    }
    let mut grad = Weights::zeros(&model.config);
    grad.out_w = h_top.t().dot(&dlogits);
    grad.out_b = dlogits.sum_axis(Axis(0));
    let mut dh = dlogits.dot(&model.weights.out_w.t());
    for (l, lw) in model.weights.layers.iter().enumerate().rev() {
        dh = match lw.arch {
            Arch::Lstm => lstm_backward(lw, &caches[l], &dh, &mut grad.layers[l], b),
            Arch::Gru => gru_backward(lw, &caches[l], &dh, &mut grad.layers[l], b),
        };
    }
    for (row, &tok) in inputs.iter().enumerate() {
        let mut e = grad.embedding.row_mut(tok as usize);
        e += &dh.row(row);
    }
    (loss / n, grad)
}

pub fn global_norm(grad: &Weights) -> f64 {
    grad.params()
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales `grad` so its global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut Weights, clip: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > clip {
        let scale = clip / norm;
        for p in grad.params_mut() {
            p.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Log-probabilities for a single stream from a zero state, `T x V`.
pub fn stream_log_probs(model: &Model, tokens: &[u32]) -> Array2<f64> {
    let mut state = BatchState::zeros(model, 1);
    let caches = run_layers(model, tokens, &mut state, tokens.len());
    output_log_probs(&model.weights, caches.last().expect("one layer").h.view())
}
