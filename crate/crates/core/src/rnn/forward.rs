use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};

use super::cell::{gru_step, lstm_step, GateValues, LayerState};
use super::{Arch, Model, ModelConfig, RnnError};
use crate::corpus::SentenceScorer;

/// Units whose `h` and `c` are clamped to zero after every step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AblationMask {
    units: BTreeSet<(usize, usize)>,
}

impl AblationMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_units(layer: usize, units: impl IntoIterator<Item = usize>) -> Self {
        Self {
            units: units.into_iter().map(|u| (layer, u)).collect(),
        }
    }

    pub fn insert(&mut self, layer: usize, unit: usize) {
        self.units.insert((layer, unit));
    }

    pub fn contains(&self, layer: usize, unit: usize) -> bool {
        self.units.contains(&(layer, unit))
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.units.iter().copied()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), RnnError> {
        for &(layer, unit) in &self.units {
            if config.hidden.get(layer).is_none_or(|&h| unit >= h) {
                return Err(RnnError::MaskOutOfRange { layer, unit });
            }
        }
        Ok(())
    }

    fn per_layer(&self, n_layers: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_layers];
        for &(l, u) in &self.units {
            out[l].push(u);
        }
        out
    }
}

/// Which quantities [`Model::forward`] keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Record {
    pub hidden: bool,
    pub cell: bool,
    pub gates: bool,
    pub log_probs: bool,
}

impl Record {
    pub fn all() -> Self {
        Self {
            hidden: true,
            cell: true,
            gates: true,
            log_probs: true,
        }
    }

    pub fn log_probs_only() -> Self {
        Self {
            log_probs: true,
            ..Self::default()
        }
    }

    pub fn states() -> Self {
        Self {
            hidden: true,
            cell: true,
            ..Self::default()
        }
    }
}

/// Per-layer activations, each `T x hidden`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub hidden: Option<Array2<f64>>,
    /// LSTM only.
    pub cell: Option<Array2<f64>>,
    /// One matrix per gate, in [`Arch::gate_names`] order.
    pub gates: Option<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    /// `T x V` log-softmax of the next-token prediction after each step.
    pub log_probs: Option<Array2<f64>>,
    pub final_state: Vec<LayerState>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Perplexity summary of a scored sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    /// Mean negative log-likelihood in nats.
    pub nll: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub n: usize,
}

impl Perplexity {
    pub fn from_nll(nll: f64, n: usize) -> Self {
        Self {
            nll,
            ppl: nll.exp(),
            bpc: nll / std::f64::consts::LN_2,
            n,
        }
    }
}

/// Scores `targets[t]` against the prediction emitted after step `t`.
pub fn sequence_perplexity(trace: &ForwardTrace, targets: &[u32]) -> Result<Perplexity, RnnError> {
    let lp = trace.log_probs.as_ref().ok_or(RnnError::MissingLogProbs)?;
    if targets.is_empty() {
        return Err(RnnError::EmptySequence);
    }
    if targets.len() != lp.nrows() {
        return Err(RnnError::LengthMismatch {
            expected: lp.nrows(),
            found: targets.len(),
        });
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let v = *lp.get((t, y as usize)).ok_or(RnnError::InvalidToken {
            token: y,
            vocab: lp.ncols(),
        })?;
        total -= v;
    }
    Ok(Perplexity::from_nll(total / targets.len() as f64, targets.len()))
}

impl Model {
    pub fn zero_state(&self) -> Vec<LayerState> {
        self.config
            .hidden
            .iter()
            .map(|&h| LayerState::zeros(self.config.arch, h))
            .collect()
    }

    /// Runs the model from a zero state.
    pub fn forward(
        &self,
        tokens: &[u32],
        record: Record,
        mask: Option<&AblationMask>,
    ) -> Result<ForwardTrace, RnnError> {
        self.forward_from(self.zero_state(), tokens, record, mask)
    }

    /// Runs the model from `state`, bottom layer first at each step. Masked
    /// units are zeroed after their layer's update, before feeding upward.
    pub fn forward_from(
        &self,
        mut state: Vec<LayerState>,
        tokens: &[u32],
        record: Record,
        mask: Option<&AblationMask>,
    ) -> Result<ForwardTrace, RnnError> {
        let cfg = &self.config;
        let v = cfg.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(RnnError::InvalidToken { token: bad, vocab: v });
        }
        if state.len() != cfg.hidden.len() {
            return Err(RnnError::ShapeMismatch {
                name: "state".into(),
                expected: vec![cfg.hidden.len()],
                found: vec![state.len()],
            });
        }
        let clamp = match mask {
            Some(m) => {
                m.validate(cfg)?;
                m.per_layer(cfg.hidden.len())
            }
            None => vec![Vec::new(); cfg.hidden.len()],
        };
        let t_len = tokens.len();
        let n_gates = cfg.arch.n_gates();
        let mut layers: Vec<LayerTrace> = cfg
            .hidden
            .iter()
            .map(|&h| LayerTrace {
                hidden: record.hidden.then(|| Array2::zeros((t_len, h))),
                cell: (record.cell && cfg.arch == Arch::Lstm).then(|| Array2::zeros((t_len, h))),
                gates: record.gates.then(|| vec![Array2::zeros((t_len, h)); n_gates]),
            })
            .collect();
        let mut log_probs = record.log_probs.then(|| Array2::zeros((t_len, v)));

        for (t, &tok) in tokens.iter().enumerate() {
            let mut x: Array1<f64> = self.weights.embedding.row(tok as usize).to_owned();
            for (l, lw) in self.weights.layers.iter().enumerate() {
                let (mut next, gates): (LayerState, GateValues) = match cfg.arch {
                    Arch::Lstm => lstm_step(x.view(), &state[l], lw),
                    Arch::Gru => gru_step(x.view(), &state[l], lw),
                };
                next.clamp_units(&clamp[l]);
                let lt = &mut layers[l];
                if let Some(hs) = lt.hidden.as_mut() {
                    hs.row_mut(t).assign(&next.h);
                }
                if let (Some(cs), Some(c)) = (lt.cell.as_mut(), next.c.as_ref()) {
                    cs.row_mut(t).assign(c);
                }
                if let Some(gs) = lt.gates.as_mut() {
                    for (g, vals) in gs.iter_mut().zip(&gates.values) {
                        g.row_mut(t).assign(vals);
                    }
                }
                x = next.h.clone();
                state[l] = next;
            }
            if let Some(lp) = log_probs.as_mut() {
                let logits = x.dot(&self.weights.out_w) + &self.weights.out_b;
                lp.row_mut(t).assign(&log_softmax(logits.view()));
            }
        }
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers,
            log_probs,
            final_state: state,
        })
    }

    /// Mean next-token perplexity over `tokens[1..]` from a zero state.
    pub fn sequence_ppl(&self, tokens: &[u32]) -> Result<Perplexity, RnnError> {
        if tokens.len() < 2 {
            return Err(RnnError::EmptySequence);
        }
        let trace = self.forward(&tokens[..tokens.len() - 1], Record::log_probs_only(), None)?;
        sequence_perplexity(&trace, &tokens[1..])
    }
}

impl SentenceScorer for Model {
    fn perplexity(&self, tokens: &[u32]) -> f64 {
        self.sequence_ppl(tokens).map(|p| p.ppl).unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenLevel;
    use crate::rnn::Weights;
    use proptest::prelude::*;

    fn tiny(arch: Arch, seed: u64) -> Model {
        let config = ModelConfig {
            arch,
            level: TokenLevel::Char,
            vocab_size: 7,
            embed_dim: 4,
            hidden: vec![5, 3],
        };
        let weights = Weights::random(&config, 0.5, seed);
        Model::new(config, weights).unwrap()
    }

    #[test]
    fn zero_output_is_uniform() {
        let mut m = tiny(Arch::Lstm, 1);
        m.weights.out_w.fill(0.0);
        m.weights.out_b.fill(0.0);
        let trace = m.forward(&[0, 3, 6], Record::all(), None).unwrap();
        let lp = trace.log_probs.as_ref().unwrap();
        assert!(lp.iter().all(|&v| (v + 7f64.ln()).abs() < 1e-15));
        let p = sequence_perplexity(&trace, &[1, 2, 3]).unwrap();
        assert!((p.ppl - 7.0).abs() < 1e-12);
        assert!((p.bpc - 7f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn two_token_hand_perplexity() {
        let lp = ndarray::arr2(&[[-(2f64.ln()), -(2f64.ln())], [-(4f64.ln()), -(4f64 / 3.0).ln()]]);
        let trace = ForwardTrace {
            tokens: vec![0, 0],
            layers: Vec::new(),
            log_probs: Some(lp),
            final_state: Vec::new(),
        };
        let p = sequence_perplexity(&trace, &[0, 0]).unwrap();
        assert!((p.ppl - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((p.bpc - p.ppl.log2()).abs() < 1e-12);
        assert!(matches!(sequence_perplexity(&trace, &[]), Err(RnnError::EmptySequence)));
    }

    #[test]
    fn empty_mask_is_bit_identical() {
        for arch in [Arch::Lstm, Arch::Gru] {
            let m = tiny(arch, 2);
            let toks = [1, 4, 4, 0, 6, 2];
            let a = m.forward(&toks, Record::all(), None).unwrap();
            let b = m.forward(&toks, Record::all(), Some(&AblationMask::new())).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, m.forward(&toks, Record::all(), None).unwrap());
        }
    }

    #[test]
    fn masked_unit_stays_zero() {
        let m = tiny(Arch::Lstm, 3);
        let mask = AblationMask::from_units(0, [2]);
        let t = m.forward(&[1, 2, 3, 4, 5], Record::all(), Some(&mask)).unwrap();
        let l0 = &t.layers[0];
        assert!(l0.hidden.as_ref().unwrap().column(2).iter().all(|&v| v == 0.0));
        assert!(l0.cell.as_ref().unwrap().column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_with_silent_unit_leaves_others_unchanged() {
        let mut m = tiny(Arch::Gru, 4);
        // Unit 1 of layer 1 projects nowhere except the output layer.
        m.weights.layers[1].w.row_mut(1).fill(0.0);
        m.weights.out_w.row_mut(1).fill(0.0);
        let toks = [0, 5, 2, 2, 6];
        let plain = m.forward(&toks, Record::all(), None).unwrap();
        let masked = m
            .forward(&toks, Record::all(), Some(&AblationMask::from_units(1, [1])))
            .unwrap();
        let (hp, hm) = (
            plain.layers[1].hidden.as_ref().unwrap(),
            masked.layers[1].hidden.as_ref().unwrap(),
        );
        for u in [0, 2] {
            assert_eq!(hp.column(u), hm.column(u));
        }
        assert_eq!(plain.log_probs, masked.log_probs);
        assert_eq!(plain.layers[0], masked.layers[0]);
    }

    #[test]
    fn invalid_inputs() {
        let m = tiny(Arch::Lstm, 5);
        assert!(matches!(
            m.forward(&[7], Record::all(), None),
            Err(RnnError::InvalidToken { token: 7, vocab: 7 })
        ));
        let mask = AblationMask::from_units(1, [3]);
        assert!(matches!(
            m.forward(&[1], Record::all(), Some(&mask)),
            Err(RnnError::MaskOutOfRange { layer: 1, unit: 3 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gates_bounded_and_softmax_normalized(
            seed in 0u64..1000,
            gru in any::<bool>(),
            toks in proptest::collection::vec(0u32..7, 1..20),
        ) {
            let arch = if gru { Arch::Gru } else { Arch::Lstm };
            let config = ModelConfig {
                arch,
                level: TokenLevel::Char,
                vocab_size: 7,
                embed_dim: 4,
                hidden: vec![5, 3],
            };
            let m = Model::new(config.clone(), Weights::random(&config, 5.0, seed)).unwrap();
            let t = m.forward(&toks, Record::all(), None).unwrap();
            let sig_gates: &[usize] = if gru { &[0, 1] } else { &[0, 1, 2] };
            for lt in &t.layers {
                let gates = lt.gates.as_ref().unwrap();
                for &g in sig_gates {
                    prop_assert!(gates[g].iter().all(|&v| v > 0.0 && v < 1.0));
                }
                if let Some(c) = &lt.cell {
                    prop_assert!(c.iter().all(|v| v.is_finite()));
                }
            }
            for row in t.log_probs.as_ref().unwrap().rows() {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
