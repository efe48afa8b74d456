//! Truncated-BPTT training of the recurrent language models, evaluation and
//! finite-difference gradient checks.

mod bptt;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rnn::{Arch, Model, ModelConfig, Perplexity, RnnError, Weights};

pub use bptt::{clip_global_norm, global_norm, stream_log_probs, window_loss_grads, window_nll, BatchState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("need at least {need} tokens, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("loss became {loss} at step {step} (lr {lr})")]
    Diverged { step: usize, lr: f64, loss: f64 },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error(transparent)]
    Model(#[from] RnnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd|adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplies `lr` whenever the validation loss does not improve.
    pub lr_decay: f64,
    pub epochs: usize,
    pub bptt: usize,
    /// Number of parallel contiguous streams.
    pub batch_size: usize,
    /// Global gradient-norm cap.
    pub clip: f64,
    pub seed: u64,
    /// Weights start in `U(-init_scale, init_scale)`.
    pub init_scale: f64,
    pub optimizer: Optimizer,
    /// Initial LSTM forget-gate bias.
    pub forget_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            lr_decay: 0.5,
            epochs: 10,
            bptt: 50,
            batch_size: 32,
            clip: 5.0,
            seed: 1,
            init_scale: 0.1,
            optimizer: Optimizer::Sgd,
            forget_bias: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.bptt < 2 {
            return bad(format!("bptt must be at least 2, got {}", self.bptt));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss in nats per token.
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
    pub valid_bpc: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<EpochStats>,
}

/// Random initialization with the configured forget-gate bias.
pub fn init_model(config: &ModelConfig, cfg: &TrainConfig) -> Result<Model, TrainError> {
    config.validate()?;
    let mut weights = Weights::random(config, cfg.init_scale, cfg.seed);
    if config.arch == Arch::Lstm {
        let f = Arch::Lstm.gate_index("f").expect("forget gate");
        for l in &mut weights.layers {
            l.b_gate_mut(f).fill(cfg.forget_bias);
        }
    }
    Ok(Model::new(config.clone(), weights)?)
}

pub fn train(
    config: &ModelConfig,
    train_tokens: &[u32],
    valid_tokens: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let model = init_model(config, cfg)?;
    train_from(model, train_tokens, valid_tokens, cfg)
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<(), TrainError> {
    let vocab = model.config.vocab_size;
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(TrainError::InvalidToken { token, vocab }),
        None => Ok(()),
    }
}

/// Trains `model` in place on `batch_size` contiguous streams of
/// `train_tokens`. State carries across windows and resets every epoch.
pub fn train_from(
    mut model: Model,
    train_tokens: &[u32],
    valid_tokens: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_tokens(&model, train_tokens)?;
    check_tokens(&model, valid_tokens)?;
    let b = cfg.batch_size;
    let stream_len = train_tokens.len().saturating_sub(1) / b;
    if stream_len < 1 {
        return Err(TrainError::TooShort {
            need: b + 1,
            got: train_tokens.len(),
        });
    }
    let mut lr = cfg.lr;
    let mut best_valid = f64::INFINITY;
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam {
        m: Weights::zeros(&model.config),
        v: Weights::zeros(&model.config),
        t: 0,
    });
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut state = BatchState::zeros(&model, b);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut pos = 0;
        while pos < stream_len {
            let steps = cfg.bptt.min(stream_len - pos);
            let mut inputs = Vec::with_capacity(steps * b);
            let mut targets = Vec::with_capacity(steps * b);
            for t in 0..steps {
                for s in 0..b {
                    let at = s * stream_len + pos + t;
                    inputs.push(train_tokens[at]);
                    targets.push(train_tokens[at + 1]);
                }
            }
            let (loss, mut grad) = window_loss_grads(&model, &inputs, &targets, &mut state);
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, lr, loss });
            }
            clip_global_norm(&mut grad, cfg.clip);
            apply_update(&mut model.weights, &grad, lr, adam.as_mut());
            loss_sum += loss * inputs.len() as f64;
            count += inputs.len();
            pos += steps;
        }
        let train_loss = loss_sum / count as f64;
        let valid = if valid_tokens.len() >= 2 {
            Some(evaluate(&model, valid_tokens, cfg.bptt)?)
        } else {
            None
        };
        curve.push(EpochStats {
            epoch,
            train_loss,
            valid_ppl: valid.map(|p| p.ppl),
            valid_bpc: valid.map(|p| p.bpc),
            lr,
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, valid ppl {}, lr {lr}",
            valid.map_or("n/a".to_string(), |p| format!("{:.3} (bpc {:.3})", p.ppl, p.bpc))
        );
        if let Some(p) = valid {
            if p.nll < best_valid {
                best_valid = p.nll;
            } else {
                lr *= cfg.lr_decay;
            }
        }
    }
    Ok(TrainOutcome { model, curve })
}

fn apply_update(weights: &mut Weights, grad: &Weights, lr: f64, adam: Option<&mut Adam>) {
    match adam {
        None => {
            for (p, g) in weights.params_mut().into_iter().zip(grad.params()) {
                p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
            }
        }
        Some(state) => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            state.t += 1;
            let c1 = 1.0 - B1.powi(state.t);
            let c2 = 1.0 - B2.powi(state.t);
            let params = weights.params_mut();
            let ms = state.m.params_mut();
            let vs = state.v.params_mut();
            for (((p, g), m), v) in params.into_iter().zip(grad.params()).zip(ms).zip(vs) {
                for k in 0..p.len() {
                    m[k] = B1 * m[k] + (1.0 - B1) * g[k];
                    v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
                    p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Next-token perplexity over `tokens` as one stream from a zero state,
/// processed in windows of `window` tokens with the state carried across.
pub fn evaluate(model: &Model, tokens: &[u32], window: usize) -> Result<Perplexity, TrainError> {
    if tokens.len() < 2 {
        return Err(TrainError::Model(RnnError::EmptySequence));
    }
    check_tokens(model, tokens)?;
    let mut state = BatchState::zeros(model, 1);
    let n = tokens.len() - 1;
    let mut total = 0.0;
    let mut pos = 0;
    while pos < n {
        let end = (pos + window.max(1)).min(n);
        total += window_nll(model, &tokens[pos..end], &tokens[pos + 1..end + 1], &mut state);
        pos = end;
    }
    Ok(Perplexity::from_nll(total / n as f64, n))
}

/// Writes the loss curve as `epoch,train_loss,valid_ppl,valid_bpc,lr`.
pub fn write_curve_csv<W: Write>(curve: &[EpochStats], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,valid_ppl,valid_bpc,lr")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for e in curve {
        writeln!(
            out,
            "{},{:.6},{},{},{}",
            e.epoch,
            e.train_loss,
            opt(e.valid_ppl),
            opt(e.valid_bpc),
            e.lr
        )?;
    }
    Ok(())
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: (String, usize),
    pub n_checked: usize,
}

fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for l in 0..config.n_layers() {
        names.extend([format!("layer{l}.U"), format!("layer{l}.W"), format!("layer{l}.b")]);
    }
    names.extend(["output.W".to_string(), "output.b".to_string()]);
    names
}

/// Compares BPTT gradients of the mean next-token loss on `tokens` with
/// central differences (step `1e-5`) for every parameter. The relative
/// error of an entry is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &Model, tokens: &[u32]) -> Result<GradCheck, TrainError> {
    if tokens.len() < 2 {
        return Err(TrainError::TooShort {
            need: 2,
            got: tokens.len(),
        });
    }
    check_tokens(model, tokens)?;
    const STEP: f64 = 1e-5;
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let n = inputs.len() as f64;
    let loss_at = |m: &Model| {
        let mut state = BatchState::zeros(m, 1);
        window_nll(m, inputs, targets, &mut state) / n
    };
    let mut state = BatchState::zeros(model, 1);
    let (_, analytic) = window_loss_grads(model, inputs, targets, &mut state);
    let names = param_names(&model.config);
    let mut probe = model.clone();
    let mut worst = (0.0, (names[0].clone(), 0));
    let mut n_checked = 0;
    for (ti, grads) in analytic.params().iter().enumerate() {
        for k in 0..grads.len() {
            let orig = probe.weights.params()[ti][k];
            probe.weights.params_mut()[ti][k] = orig + STEP;
            let up = loss_at(&probe);
            probe.weights.params_mut()[ti][k] = orig - STEP;
            let down = loss_at(&probe);
            probe.weights.params_mut()[ti][k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grads[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, (names[ti].clone(), k));
            }
            n_checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst: worst.1,
        n_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenLevel;
    use crate::rnn::Record;

    fn tiny_config(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            level: TokenLevel::Char,
            vocab_size: 6,
            embed_dim: 3,
            hidden: vec![4, 3],
        }
    }

    #[test]
    fn grad_check_lstm_and_gru() {
        for arch in [Arch::Lstm, Arch::Gru] {
            for seed in [1, 2, 3] {
                let c = tiny_config(arch);
                let m = Model::new(c.clone(), Weights::random(&c, 0.8, seed)).unwrap();
                let r = grad_check(&m, &[0, 3, 5, 1, 1, 2]).unwrap();
                assert!(r.max_rel_error < 1e-4, "{arch} seed {seed}: {r:?}");
                assert_eq!(r.n_checked, c.n_params());
            }
        }
    }

    #[test]
    fn grad_check_at_zero_weights() {
        for arch in [Arch::Lstm, Arch::Gru] {
            let c = tiny_config(arch);
            let m = Model::new(c.clone(), Weights::zeros(&c)).unwrap();
            assert!(grad_check(&m, &[1, 2, 3, 4]).unwrap().max_rel_error < 1e-4);
        }
    }

    #[test]
    fn batched_log_probs_match_reference_forward() {
        for arch in [Arch::Lstm, Arch::Gru] {
            let c = tiny_config(arch);
            let m = Model::new(c.clone(), Weights::random(&c, 0.6, 4)).unwrap();
            let toks = [5, 0, 2, 2, 4, 1, 3];
            let lp = stream_log_probs(&m, &toks);
            let reference = m.forward(&toks, Record::log_probs_only(), None).unwrap();
            for (a, b) in lp.iter().zip(reference.log_probs.unwrap().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_zero_output_is_vocab_size() {
        let c = tiny_config(Arch::Lstm);
        let mut w = Weights::random(&c, 0.5, 1);
        w.out_w.fill(0.0);
        w.out_b.fill(0.0);
        let m = Model::new(c, w).unwrap();
        let p = evaluate(&m, &[0, 1, 2, 3, 4, 5, 0, 1], 3).unwrap();
        assert!((p.ppl - 6.0).abs() < 1e-12);
        assert!(evaluate(&m, &[1], 3).is_err());
    }

    #[test]
    fn window_evaluation_matches_single_pass() {
        let c = tiny_config(Arch::Gru);
        let m = Model::new(c.clone(), Weights::random(&c, 0.5, 8)).unwrap();
        let toks: Vec<u32> = (0..40).map(|i| (i * 7 % 6) as u32).collect();
        let a = evaluate(&m, &toks, 5).unwrap();
        let b = evaluate(&m, &toks, 1000).unwrap();
        assert!((a.nll - b.nll).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let c = tiny_config(Arch::Lstm);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            bptt: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let start = init_model(&c, &cfg).unwrap();
        let toks: Vec<u32> = (0..50).map(|i| (i % 6) as u32).collect();
        let out = train_from(start.clone(), &toks, &toks[..10], &cfg).unwrap();
        assert_eq!(out.model.weights, start.weights);
        assert_eq!(out.curve.len(), 3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let c = tiny_config(Arch::Lstm);
        let m = Model::new(c.clone(), Weights::random(&c, 2.0, 5)).unwrap();
        let mut state = BatchState::zeros(&m, 2);
        let (_, mut g) = window_loss_grads(&m, &[0, 1, 2, 3, 4, 5], &[1, 2, 3, 4, 5, 0], &mut state);
        for clip in [1e-3, 0.05, 0.5] {
            let mut gc = g.clone();
            clip_global_norm(&mut gc, clip);
            assert!(global_norm(&gc) <= clip + 1e-12);
        }
        let before = global_norm(&g);
        clip_global_norm(&mut g, before * 2.0);
        assert_eq!(global_norm(&g), before);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig {
                bptt: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                clip: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn curve_csv_layout() {
        let curve = [EpochStats {
            epoch: 1,
            train_loss: 1.5,
            valid_ppl: Some(4.0),
            valid_bpc: Some(2.0),
            lr: 0.1,
        }];
        let mut buf = Vec::new();
        write_curve_csv(&curve, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,valid_ppl,valid_bpc,lr\n1,1.500000,4.000000,2.000000,0.1\n"
        );
    }
}
