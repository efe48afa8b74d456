use ndarray::{Array1, ArrayView1, Zip};

use super::weights::LayerWeights;
use super::{Arch, RnnError};

/// Logistic function kept strictly inside `(0, 1)` for finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Recurrent state of one layer. `c` is present for LSTM layers only.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub h: Array1<f64>,
    pub c: Option<Array1<f64>>,
}

impl LayerState {
    pub fn zeros(arch: Arch, hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: (arch == Arch::Lstm).then(|| Array1::zeros(hidden)),
        }
    }

    /// Forces the listed units to zero in `h` and `c`.
    pub fn clamp_units(&mut self, units: &[usize]) {
        for &u in units {
            self.h[u] = 0.0;
            if let Some(c) = self.c.as_mut() {
                c[u] = 0.0;
            }
        }
    }
}

/// Gate activations of one step, ordered as [`Arch::gate_names`]
/// (`i, f, o, g` for LSTM with `g` the candidate cell; `z, r, n` for GRU).
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues {
    pub arch: Arch,
    pub values: Vec<Array1<f64>>,
}

impl GateValues {
    pub fn get(&self, name: &str) -> Option<&Array1<f64>> {
        let k = self.arch.gate_names().iter().position(|&g| g == name)?;
        self.values.get(k)
    }
}

fn check_shapes(x: &ArrayView1<f64>, prev: &LayerState, layer: &LayerWeights) -> Result<(), RnnError> {
    let mismatch = |name: &str, expected: usize, found: usize| RnnError::ShapeMismatch {
        name: name.into(),
        expected: vec![expected],
        found: vec![found],
    };
    if x.len() != layer.input_dim() {
        return Err(mismatch("x", layer.input_dim(), x.len()));
    }
    if prev.h.len() != layer.hidden {
        return Err(mismatch("h", layer.hidden, prev.h.len()));
    }
    match (layer.arch, &prev.c) {
        (Arch::Lstm, Some(c)) if c.len() != layer.hidden => Err(mismatch("c", layer.hidden, c.len())),
        (Arch::Lstm, None) => Err(RnnError::InvalidConfig("LSTM state without cell vector".into())),
        _ => Ok(()),
    }
}

/// One LSTM step: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step(
    x: ArrayView1<f64>,
    prev: &LayerState,
    layer: &LayerWeights,
) -> Result<(LayerState, GateValues), RnnError> {
    if layer.arch != Arch::Lstm {
        return Err(RnnError::InvalidConfig("lstm_cell_step on a GRU layer".into()));
    }
    check_shapes(&x, prev, layer)?;
    Ok(lstm_step(x, prev, layer))
}

pub(crate) fn lstm_step(x: ArrayView1<f64>, prev: &LayerState, layer: &LayerWeights) -> (LayerState, GateValues) {
    let h = layer.hidden;
    let pre = x.dot(&layer.u) + prev.h.dot(&layer.w) + &layer.b;
    let i = pre.slice(ndarray::s![0..h]).mapv(sigmoid);
    let f = pre.slice(ndarray::s![h..2 * h]).mapv(sigmoid);
    let o = pre.slice(ndarray::s![2 * h..3 * h]).mapv(sigmoid);
    let g = pre.slice(ndarray::s![3 * h..4 * h]).mapv(f64::tanh);
    let c_prev = prev.c.as_ref().expect("LSTM state has a cell");
    let mut c = Array1::zeros(h);
    Zip::from(&mut c)
        .and(&f)
        .and(c_prev)
        .and(&i)
        .and(&g)
        .for_each(|c, &f, &cp, &i, &g| *c = f * cp + i * g);
    let h_new = &o * &c.mapv(f64::tanh);
    (
        LayerState { h: h_new, c: Some(c) },
        GateValues {
            arch: Arch::Lstm,
            values: vec![i, f, o, g],
        },
    )
}

/// One GRU step: `n = tanh(x·U_n + b_n + r⊙(h·W_n))`,
/// `h = (1 − z)⊙h_prev + z⊙n`.
pub fn gru_cell_step(
    x: ArrayView1<f64>,
    prev: &LayerState,
    layer: &LayerWeights,
) -> Result<(LayerState, GateValues), RnnError> {
    if layer.arch != Arch::Gru {
        return Err(RnnError::InvalidConfig("gru_cell_step on an LSTM layer".into()));
    }
    check_shapes(&x, prev, layer)?;
    Ok(gru_step(x, prev, layer))
}

pub(crate) fn gru_step(x: ArrayView1<f64>, prev: &LayerState, layer: &LayerWeights) -> (LayerState, GateValues) {
    let h = layer.hidden;
    let ax = x.dot(&layer.u) + &layer.b;
    let ah = prev.h.dot(&layer.w);
    let z = Array1::from_shape_fn(h, |k| sigmoid(ax[k] + ah[k]));
    let r = Array1::from_shape_fn(h, |k| sigmoid(ax[h + k] + ah[h + k]));
    let n = Array1::from_shape_fn(h, |k| (ax[2 * h + k] + r[k] * ah[2 * h + k]).tanh());
    let h_new = Array1::from_shape_fn(h, |k| (1.0 - z[k]) * prev.h[k] + z[k] * n[k]);
    (
        LayerState { h: h_new, c: None },
        GateValues {
            arch: Arch::Gru,
            values: vec![z, r, n],
        },
    )
}
