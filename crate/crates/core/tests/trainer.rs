//! Training behaviour on toy sequences and slices of the bundled text.

use std::collections::HashMap;
use std::path::PathBuf;

use rnn_timescales::corpus::{Corpus, TextConfig, TokenLevel};
use rnn_timescales::rnn::{Arch, ModelConfig};
use rnn_timescales::trainer::{train, Optimizer, TrainConfig};

fn alice() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/alice.txt");
    std::fs::read_to_string(path).unwrap()
}

fn model_config(corpus: &Corpus, arch: Arch, embed: usize, hidden: Vec<usize>) -> ModelConfig {
    ModelConfig {
        arch,
        level: corpus.level(),
        vocab_size: corpus.vocab.len(),
        embed_dim: embed,
        hidden,
    }
}

#[test]
fn memorizes_repeated_text() {
    let pattern: Vec<u32> = vec![0, 1, 2, 3, 4, 2, 5, 6, 1, 7];
    let tokens: Vec<u32> = pattern.iter().cycle().take(100).copied().collect();
    let mc = ModelConfig {
        arch: Arch::Lstm,
        level: TokenLevel::Char,
        vocab_size: 8,
        embed_dim: 8,
        hidden: vec![16],
    };
    let cfg = TrainConfig {
        lr: 0.01,
        lr_decay: 1.0,
        epochs: 200,
        bptt: 20,
        batch_size: 1,
        optimizer: Optimizer::Adam,
        ..TrainConfig::default()
    };
    let out = train(&mc, &tokens, &tokens, &cfg).unwrap();
    let last = out.curve.last().unwrap();
    assert!(last.train_loss < 0.05, "final loss {}", last.train_loss);
}

#[test]
fn gru_trains_at_lr_point_one() {
    let c = Corpus::from_text("alice", alice()[..30_000].to_string(), TextConfig::char_spaced(), 0).unwrap();
    let (tr, va) = c.train_valid_split(0.1);
    let mc = model_config(&c, Arch::Gru, 16, vec![32, 32]);
    let cfg = TrainConfig {
        lr: 0.1,
        epochs: 3,
        bptt: 35,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&mc, &c.tokens[tr], &c.tokens[va], &cfg).unwrap();
    assert!(out.model.weights.is_finite());
    let ppl: Vec<f64> = out.curve.iter().map(|e| e.valid_ppl.unwrap()).collect();
    assert!(ppl.iter().all(|p| p.is_finite()));
    assert!(ppl[ppl.len() - 1] < c.vocab.len() as f64, "{ppl:?}");
}

#[test]
fn same_seed_same_curve_and_falling_ppl() {
    let c = Corpus::from_text("alice", alice()[..40_000].to_string(), TextConfig::char_spaced(), 0).unwrap();
    let (tr, va) = c.train_valid_split(0.1);
    let mc = model_config(&c, Arch::Lstm, 16, vec![32, 32]);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 4,
        bptt: 40,
        batch_size: 8,
        optimizer: Optimizer::Adam,
        seed: 7,
        ..TrainConfig::default()
    };
    let a = train(&mc, &c.tokens[tr.clone()], &c.tokens[va.clone()], &cfg).unwrap();
    let b = train(&mc, &c.tokens[tr], &c.tokens[va], &cfg).unwrap();
    for (x, y) in a.curve.iter().zip(&b.curve) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-12);
        assert!((x.valid_ppl.unwrap() - y.valid_ppl.unwrap()).abs() <= 1e-12);
    }
    assert_eq!(a.model.weights, b.model.weights);
    let ppl: Vec<f64> = a.curve.iter().map(|e| e.valid_ppl.unwrap()).collect();
    assert!(ppl.windows(2).all(|w| w[1] < w[0]), "{ppl:?}");
}

#[test]
fn word_model_beats_unigram_baseline() {
    let c = Corpus::from_text("alice", alice(), TextConfig::word(), 5000).unwrap();
    let (tr, va) = c.train_valid_split(0.1);
    // Add-one unigram model counted from the training span.
    let mut counts: HashMap<u32, f64> = HashMap::new();
    for &t in &c.tokens[tr.clone()] {
        *counts.entry(t).or_default() += 1.0;
    }
    let v = c.vocab.len() as f64;
    let total = tr.len() as f64;
    let valid = &c.tokens[va.clone()];
    let nll: f64 = valid[1..]
        .iter()
        .map(|t| -((counts.get(t).copied().unwrap_or(0.0) + 1.0) / (total + v)).ln())
        .sum::<f64>()
        / (valid.len() - 1) as f64;
    let unigram_ppl = nll.exp();

    let mc = model_config(&c, Arch::Lstm, 32, vec![64]);
    let cfg = TrainConfig {
        lr: 0.005,
        epochs: 3,
        bptt: 35,
        batch_size: 16,
        optimizer: Optimizer::Adam,
        ..TrainConfig::default()
    };
    let out = train(&mc, &c.tokens[tr], valid, &cfg).unwrap();
    let ppl = out.curve.last().unwrap().valid_ppl.unwrap();
    assert!(ppl < unigram_ppl, "model {ppl:.1} vs unigram {unigram_ppl:.1}");
}
