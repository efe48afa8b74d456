//! Group ablation: change in target-token probability when a set of units is
//! clamped to zero, compared against random unit sets of the same size.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::numerics::{mean, welch_effect, EffectStats, NumericsError};
use crate::rnn::{AblationMask, Model, Record, RnnError};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("need {needed} batch starts of length {batch_len}, corpus has {available}")]
    InsufficientStarts {
        needed: usize,
        available: usize,
        batch_len: usize,
    },
    #[error("batch length must be at least 2, got {0}")]
    BatchTooShort(usize),
    #[error("need {needed} units outside the excluded set, layer has {available}")]
    InsufficientUnits { needed: usize, available: usize },
    #[error("no batch has a target under {0}")]
    NoTargets(Condition),
    #[error(transparent)]
    Model(#[from] RnnError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which positions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    AllTokens,
    /// Only the token right before a sentence-final full stop.
    FinalTokens,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::AllTokens => "all_tokens",
            Condition::FinalTokens => "final_tokens",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_tokens" => Ok(Condition::AllTokens),
            "final_tokens" => Ok(Condition::FinalTokens),
            other => Err(format!(
                "unknown condition `{other}` (expected all_tokens|final_tokens)"
            )),
        }
    }
}

/// A corpus slice starting at a sentence start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBatch {
    /// Offset in the corpus token stream.
    pub start: usize,
    pub tokens: Vec<u32>,
    /// Batch positions (≥ 1) of tokens directly followed by a sentence-final
    /// full stop.
    pub final_positions: Vec<usize>,
}

impl TextBatch {
    pub fn targets(&self, condition: Condition) -> Vec<usize> {
        match condition {
            Condition::AllTokens => (1..self.tokens.len()).collect(),
            Condition::FinalTokens => self.final_positions.clone(),
        }
    }
}

/// Corpus positions of tokens that directly precede a sentence-final period.
pub fn final_token_positions(corpus: &Corpus) -> Vec<usize> {
    let Some(period) = corpus.vocab.period_id() else {
        return Vec::new();
    };
    let space = corpus.vocab.id(" ");
    corpus
        .sentences
        .iter()
        .filter_map(|s| {
            let toks = &corpus.tokens[s.span.clone()];
            let mut end = toks.len();
            if end > 0 && Some(toks[end - 1]) == space {
                end -= 1;
            }
            (end >= 2 && toks[end - 1] == period).then(|| s.span.start + end - 2)
        })
        .collect()
}

/// `n_batches` slices of `batch_len` tokens, each starting at a sentence start,
/// drawn without replacement and returned in corpus order.
pub fn make_batches(
    corpus: &Corpus,
    n_batches: usize,
    batch_len: usize,
    seed: u64,
) -> Result<Vec<TextBatch>, AblationError> {
    if batch_len < 2 {
        return Err(AblationError::BatchTooShort(batch_len));
    }
    let starts: Vec<usize> = corpus
        .sentences
        .iter()
        .map(|s| s.span.start)
        .filter(|&s| s + batch_len <= corpus.tokens.len())
        .collect();
    if starts.len() < n_batches {
        return Err(AblationError::InsufficientStarts {
            needed: n_batches,
            available: starts.len(),
            batch_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, starts.len(), n_batches)
        .into_iter()
        .map(|i| starts[i])
        .collect();
    picked.sort_unstable();
    let finals = final_token_positions(corpus);
    Ok(picked
        .into_iter()
        .map(|start| {
            let end = start + batch_len;
            TextBatch {
                start,
                tokens: corpus.tokens[start..end].to_vec(),
                final_positions: finals
                    .iter()
                    .filter(|&&p| p > start && p < end)
                    .map(|&p| p - start)
                    .collect(),
            }
        })
        .collect())
}

/// Probability of each batch token given its prefix; entry `q` scores
/// `tokens[q]` (entry 0 is unused and set to NaN).
pub fn target_probs(model: &Model, batch: &TextBatch, mask: &AblationMask) -> Result<Vec<f64>, RnnError> {
    let toks = &batch.tokens;
    let trace = model.forward(&toks[..toks.len() - 1], Record::log_probs_only(), Some(mask))?;
    let lp = trace.log_probs.ok_or(RnnError::MissingLogProbs)?;
    Ok(std::iter::once(f64::NAN)
        .chain((1..toks.len()).map(|q| lp[[q - 1, toks[q] as usize]].exp()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub group: String,
    pub layer: usize,
    pub units: Vec<usize>,
    pub condition: Condition,
    /// Indices of the batches that had targets.
    pub batch_ids: Vec<usize>,
    /// Mean ΔP per scored batch.
    pub batch_means: Vec<f64>,
    pub mean_delta_p: f64,
    pub n_targets: usize,
    pub tokens_per_batch: usize,
    pub stats: Option<EffectStats>,
}

/// Batches plus the unablated target probabilities, reused across groups.
pub struct Ablator<'a> {
    model: &'a Model,
    batches: &'a [TextBatch],
    original: Vec<Vec<f64>>,
}

impl<'a> Ablator<'a> {
    pub fn new(model: &'a Model, batches: &'a [TextBatch]) -> Result<Self, AblationError> {
        let empty = AblationMask::new();
        let original = batches
            .par_iter()
            .map(|b| target_probs(model, b, &empty))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            model,
            batches,
            original,
        })
    }

    pub fn batches(&self) -> &[TextBatch] {
        self.batches
    }

    /// Per-position `P_ablated − P_original` of one batch (entry 0 is NaN).
    pub fn delta_p_batch(&self, batch: usize, mask: &AblationMask) -> Result<Vec<f64>, AblationError> {
        let abl = target_probs(self.model, &self.batches[batch], mask)?;
        Ok(abl.iter().zip(&self.original[batch]).map(|(a, o)| a - o).collect())
    }

    pub fn report(
        &self,
        group: &str,
        layer: usize,
        units: &[usize],
        condition: Condition,
    ) -> Result<AblationReport, AblationError> {
        let mask = AblationMask::from_units(layer, units.iter().copied());
        mask.validate(&self.model.config)?;
        let per_batch: Vec<Option<(f64, usize)>> = (0..self.batches.len())
            .into_par_iter()
            .map(|i| {
                let targets = self.batches[i].targets(condition);
                if targets.is_empty() {
                    return Ok(None);
                }
                let dp = self.delta_p_batch(i, &mask)?;
                let vals: Vec<f64> = targets.iter().map(|&q| dp[q]).collect();
                Ok(Some((mean(&vals), vals.len())))
            })
            .collect::<Result<_, AblationError>>()?;
        let mut batch_ids = Vec::new();
        let mut batch_means = Vec::new();
        let mut n_targets = 0;
        for (i, r) in per_batch.into_iter().enumerate() {
            match r {
                Some((m, n)) => {
                    batch_ids.push(i);
                    batch_means.push(m);
                    n_targets += n;
                }
                None => log::warn!("{group}: batch {i} has no {condition} targets, skipped"),
            }
        }
        if batch_means.is_empty() {
            return Err(AblationError::NoTargets(condition));
        }
        Ok(AblationReport {
            group: group.to_string(),
            layer,
            units: units.to_vec(),
            condition,
            mean_delta_p: mean(&batch_means),
            batch_ids,
            batch_means,
            n_targets,
            tokens_per_batch: self.batches.first().map_or(0, |b| b.tokens.len()),
            stats: None,
        })
    }

    /// `r` random unit sets of `size` units from `layer`, avoiding `exclude`.
    /// Set `j` is drawn with seed `seed + j`.
    pub fn random_baselines(
        &self,
        layer: usize,
        size: usize,
        r: usize,
        exclude: &[usize],
        condition: Condition,
        seed: u64,
    ) -> Result<Vec<AblationReport>, AblationError> {
        let n = *self
            .model
            .config
            .hidden
            .get(layer)
            .ok_or(RnnError::MaskOutOfRange { layer, unit: 0 })?;
        let excluded: BTreeSet<usize> = exclude.iter().copied().collect();
        let pool: Vec<usize> = (0..n).filter(|u| !excluded.contains(u)).collect();
        if pool.len() < size {
            return Err(AblationError::InsufficientUnits {
                needed: size,
                available: pool.len(),
            });
        }
        (0..r)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
                let mut units: Vec<usize> = index::sample(&mut rng, pool.len(), size)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                units.sort_unstable();
                self.report(&format!("random_{j}"), layer, &units, condition)
            })
            .collect()
    }
}

/// Fills `report.stats` with Cohen's d and Welch's t of its batch means
/// against the pooled batch means of `baselines`.
pub fn compare_groups(report: &mut AblationReport, baselines: &[AblationReport]) -> Result<EffectStats, AblationError> {
    let pooled: Vec<f64> = baselines.iter().flat_map(|b| b.batch_means.iter().copied()).collect();
    let stats = welch_effect(&report.batch_means, &pooled)?;
    report.stats = Some(stats);
    Ok(stats)
}

/// `group,condition,batch_id,mean_delta_p`
pub fn write_reports_csv<W: Write>(reports: &[AblationReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "group,condition,batch_id,mean_delta_p")?;
    for r in reports {
        for (id, m) in r.batch_ids.iter().zip(&r.batch_means) {
            writeln!(out, "{},{},{},{:.12e}", r.group, r.condition, id, m)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TextConfig;
    use crate::rnn::{Arch, ModelConfig, Weights};

    const TEXT: &str = "The cat sat on the mat. A dog ran far away. It was late, and the sun set. \
        We ate bread. They sang songs all night. Birds flew south. The end came soon.";

    fn setup(arch: Arch) -> (Corpus, Model) {
        let c = Corpus::from_text("t", TEXT, TextConfig::word(), 1000).unwrap();
        let cfg = ModelConfig {
            arch,
            level: c.level(),
            vocab_size: c.vocab.len(),
            embed_dim: 4,
            hidden: vec![5, 6],
        };
        let w = Weights::random(&cfg, 0.5, 3);
        (c, Model::new(cfg, w).unwrap())
    }

    #[test]
    fn batches_start_at_sentences_and_are_seeded() {
        let (c, _) = setup(Arch::Lstm);
        let starts: BTreeSet<usize> = c.sentences.iter().map(|s| s.span.start).collect();
        let a = make_batches(&c, 4, 8, 11).unwrap();
        assert_eq!(a, make_batches(&c, 4, 8, 11).unwrap());
        for b in &a {
            assert!(starts.contains(&b.start));
            assert_eq!(b.tokens.len(), 8);
            for &p in &b.final_positions {
                let next = c.tokens[b.start + p + 1];
                assert_eq!(Some(next), c.vocab.period_id());
            }
        }
        assert!(matches!(
            make_batches(&c, 50, 8, 1),
            Err(AblationError::InsufficientStarts { .. })
        ));
        assert!(matches!(
            make_batches(&c, 1, 1, 1),
            Err(AblationError::BatchTooShort(1))
        ));
    }

    #[test]
    fn final_tokens_precede_each_full_stop() {
        let (c, _) = setup(Arch::Lstm);
        let finals = final_token_positions(&c);
        assert_eq!(finals.len(), 7);
        let words: Vec<&str> = finals.iter().map(|&p| c.vocab.token(c.tokens[p]).unwrap()).collect();
        assert_eq!(words, ["mat", "away", "set", "bread", "night", "south", "soon"]);
    }

    #[test]
    fn empty_set_is_exactly_zero() {
        for arch in [Arch::Lstm, Arch::Gru] {
            let (c, m) = setup(arch);
            let batches = make_batches(&c, 3, 10, 2).unwrap();
            let ab = Ablator::new(&m, &batches).unwrap();
            for i in 0..batches.len() {
                let dp = ab.delta_p_batch(i, &AblationMask::new()).unwrap();
                assert!(dp[1..].iter().all(|&d| d.to_bits() == 0.0f64.to_bits()));
            }
            let r = ab.report("empty", 1, &[], Condition::AllTokens).unwrap();
            assert_eq!(r.mean_delta_p, 0.0);
            assert_eq!(r.n_targets, 3 * 9);
        }
    }

    #[test]
    fn silent_unit_has_no_effect() {
        let (c, mut m) = setup(Arch::Lstm);
        // Unit 2 of the top layer projects nowhere.
        m.weights.layers[1].w.row_mut(2).fill(0.0);
        m.weights.out_w.row_mut(2).fill(0.0);
        let batches = make_batches(&c, 3, 10, 5).unwrap();
        let ab = Ablator::new(&m, &batches).unwrap();
        let r = ab.report("silent", 1, &[2], Condition::AllTokens).unwrap();
        assert!(r.batch_means.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn ablating_everything_hurts() {
        // A model that has memorized the text loses probability mass when the
        // top layer is removed.
        let (c, _) = setup(Arch::Lstm);
        let cfg = ModelConfig {
            arch: Arch::Lstm,
            level: c.level(),
            vocab_size: c.vocab.len(),
            embed_dim: 8,
            hidden: vec![16, 16],
        };
        let tc = crate::trainer::TrainConfig {
            lr: 0.01,
            lr_decay: 1.0,
            epochs: 150,
            bptt: 20,
            batch_size: 1,
            optimizer: crate::trainer::Optimizer::Adam,
            ..Default::default()
        };
        let out = crate::trainer::train(&cfg, &c.tokens, &c.tokens, &tc).unwrap();
        let batches = make_batches(&c, 3, 10, 5).unwrap();
        let ab = Ablator::new(&out.model, &batches).unwrap();
        let r = ab
            .report("all", 1, &(0..16).collect::<Vec<_>>(), Condition::AllTokens)
            .unwrap();
        let last = out.curve.last().unwrap();
        assert!(
            r.mean_delta_p < -0.1,
            "{} after loss {}",
            r.mean_delta_p,
            last.train_loss
        );
    }

    #[test]
    fn baselines_and_comparison() {
        let (c, m) = setup(Arch::Lstm);
        let batches = make_batches(&c, 6, 6, 9).unwrap();
        let ab = Ablator::new(&m, &batches).unwrap();
        let base = ab.random_baselines(1, 2, 3, &[0, 1], Condition::AllTokens, 4).unwrap();
        assert_eq!(base.len(), 3);
        for b in &base {
            assert!(b.units.iter().all(|&u| u >= 2));
        }
        assert_eq!(
            base,
            ab.random_baselines(1, 2, 3, &[0, 1], Condition::AllTokens, 4).unwrap()
        );
        let mut own = base[0].clone();
        let s = compare_groups(&mut own, &base[..1]).unwrap();
        assert_eq!(s.cohens_d, 0.0);
        assert_eq!(s.p_value, 1.0);
        assert!(matches!(
            ab.random_baselines(1, 5, 1, &[0, 1], Condition::AllTokens, 0),
            Err(AblationError::InsufficientUnits {
                needed: 5,
                available: 4
            })
        ));
        let mut buf = Vec::new();
        write_reports_csv(&base, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn report_is_independent_of_batch_order() {
        let (c, m) = setup(Arch::Gru);
        let batches = make_batches(&c, 5, 7, 3).unwrap();
        let mut rev = batches.clone();
        rev.reverse();
        let a = Ablator::new(&m, &batches)
            .unwrap()
            .report("g", 0, &[1, 3], Condition::AllTokens)
            .unwrap();
        let b = Ablator::new(&m, &rev)
            .unwrap()
            .report("g", 0, &[1, 3], Condition::AllTokens)
            .unwrap();
        let mut am = a.batch_means.clone();
        let mut bm = b.batch_means.clone();
        am.sort_by(f64::total_cmp);
        bm.sort_by(f64::total_cmp);
        assert_eq!(am, bm);
        assert!((a.mean_delta_p - b.mean_delta_p).abs() < 1e-15);
    }
}
