use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::ablation::Condition;
use crate::connectivity::{DistanceMetric, ZScope};
use crate::corpus::{Segmentation, TextConfig};
use crate::rnn::Arch;
use crate::timescale::{ActivationSource, ThresholdRule};
use crate::trainer::Optimizer;

/// Text normalization preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    Word,
    CharSpaced,
    CharStripped,
}

impl FromStr for TextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TextMode::Word),
            "char_spaced" => Ok(TextMode::CharSpaced),
            "char_stripped" => Ok(TextMode::CharStripped),
            other => Err(format!(
                "unknown text mode `{other}` (expected word|char_spaced|char_stripped)"
            )),
        }
    }
}

impl TextMode {
    pub fn text_config(self, sentence_per_line: bool) -> TextConfig {
        let base = match self {
            TextMode::Word => TextConfig::word(),
            TextMode::CharSpaced => TextConfig::char_spaced(),
            TextMode::CharStripped => TextConfig::char_stripped(),
        };
        TextConfig {
            sentence_per_line,
            ..base
        }
    }
}

/// Every setting of a run. Parsed from flat `key = value` text; relative
/// paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,

    pub corpus: PathBuf,
    pub text_mode: TextMode,
    pub sentence_per_line: bool,
    pub max_vocab: usize,
    pub valid_fraction: f64,

    /// Pretrained weights; when absent `train` writes `model.bin` in `out_dir`.
    pub model: Option<PathBuf>,
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub bptt: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub train_seed: u64,

    pub segmentation: Segmentation,
    pub min_shared: usize,
    pub min_context: usize,
    pub max_ppl: Option<f64>,
    pub max_trials: Option<usize>,
    pub n_random: usize,
    pub random_min_len: usize,
    pub trial_seed: u64,

    pub source: ActivationSource,
    /// Analyzed layer; defaults to the top layer.
    pub layer: Option<usize>,
    pub pre_window: usize,
    pub t_end: usize,
    pub threshold: ThresholdRule,
    pub min_r2: f64,
    pub short_cutoff: usize,
    pub long_cutoff: usize,
    pub corr_window: usize,

    pub z_thresh: f64,
    pub z_scope: ZScope,
    /// Top-K graph size; defaults to the strong-projection count.
    pub top_k: Option<usize>,
    pub metric: DistanceMetric,
    pub ts_pct: f64,
    pub radius_pct: f64,

    pub n_batches: usize,
    pub batch_len: usize,
    pub batch_seed: u64,
    pub n_random_sets: usize,
    pub baseline_seed: u64,
    pub baseline_exclude_groups: bool,
    pub conditions: Vec<Condition>,
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

struct Fields {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Fields {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, PipelineError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| PipelineError::config(key, e.to_string())),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, PipelineError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) if v == "none" => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: T::Err| PipelineError::config(key, e.to_string())),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, PipelineError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => list(&v).map_err(|e| PipelineError::config(key, e)),
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| self.base.join(v))
    }
}

impl RunConfig {
    /// Parses config text. `base` is the directory relative paths refer to.
    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        Self::parse_with(text, base, &[])
    }

    /// Like [`RunConfig::parse`], with `overrides` replacing file values.
    pub fn parse_with(text: &str, base: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), v).is_some() {
                return Err(PipelineError::config(k, "given more than once"));
            }
        }
        for (k, v) in overrides {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut f = Fields {
            map,
            base: base.to_path_buf(),
        };
        let out_dir = f
            .path("out_dir")
            .ok_or_else(|| PipelineError::config("out_dir", "required"))?;
        let corpus = f
            .path("corpus")
            .ok_or_else(|| PipelineError::config("corpus", "required"))?;
        let model = f.path("model");
        let cfg = RunConfig {
            out_dir,
            corpus,
            text_mode: f.parse("text_mode", TextMode::CharSpaced)?,
            sentence_per_line: f.parse("sentence_per_line", false)?,
            max_vocab: f.parse("max_vocab", 10_000)?,
            valid_fraction: f.parse("valid_fraction", 0.1)?,
            model,
            arch: f.parse("arch", Arch::Lstm)?,
            embed_dim: f.parse("embed_dim", 32)?,
            hidden: f.list("hidden", vec![64, 64])?,
            optimizer: f.parse("optimizer", Optimizer::Adam)?,
            lr: f.parse("lr", 0.01)?,
            lr_decay: f.parse("lr_decay", 0.5)?,
            epochs: f.parse("epochs", 10)?,
            bptt: f.parse("bptt", 50)?,
            batch_size: f.parse("batch_size", 8)?,
            clip: f.parse("clip", 5.0)?,
            init_scale: f.parse("init_scale", 0.1)?,
            forget_bias: f.parse("forget_bias", 1.0)?,
            train_seed: f.parse("train_seed", 1)?,
            segmentation: f.parse("segmentation", Segmentation::Conjunction)?,
            min_shared: f.parse("min_shared", 80)?,
            min_context: f.parse("min_context", 20)?,
            max_ppl: f.opt("max_ppl")?,
            max_trials: f.opt("max_trials")?,
            n_random: f.parse("n_random", 10)?,
            random_min_len: f.parse("random_min_len", 33)?,
            trial_seed: f.parse("trial_seed", 1)?,
            source: f.parse("source", ActivationSource::Cell)?,
            layer: f.opt("layer")?,
            pre_window: f.parse("pre_window", 10)?,
            t_end: f.parse("t_end", 79)?,
            threshold: f.parse("threshold", ThresholdRule::HalfRange)?,
            min_r2: f.parse("min_r2", 0.5)?,
            short_cutoff: f.parse("short_cutoff", 3)?,
            long_cutoff: f.parse("long_cutoff", 7)?,
            corr_window: f.parse("corr_window", 10)?,
            z_thresh: f.parse("z_thresh", 3.0)?,
            z_scope: f.parse("z_scope", ZScope::PerUnit)?,
            top_k: f.opt("top_k")?,
            metric: f.parse("metric", DistanceMetric::Correlation)?,
            ts_pct: f.parse("ts_pct", 85.0)?,
            radius_pct: f.parse("radius_pct", 30.0)?,
            n_batches: f.parse("n_batches", 20)?,
            batch_len: f.parse("batch_len", 200)?,
            batch_seed: f.parse("batch_seed", 1)?,
            n_random_sets: f.parse("n_random_sets", 10)?,
            baseline_seed: f.parse("baseline_seed", 1)?,
            baseline_exclude_groups: f.parse("baseline_exclude_groups", true)?,
            conditions: f.list("conditions", vec![Condition::AllTokens, Condition::FinalTokens])?,
        };
        if let Some(k) = f.map.keys().next() {
            return Err(PipelineError::config(k.clone(), "unknown key"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        Self::from_file_with(path, &[])
    }

    pub fn from_file_with(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with(&text, base, overrides)
    }

    /// Range and existence checks.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(PipelineError::config(key, msg))
            }
        };
        check(
            self.corpus.is_file(),
            "corpus",
            &format!("{} is not a file", self.corpus.display()),
        )?;
        if let Some(m) = &self.model {
            check(m.is_file(), "model", &format!("{} is not a file", m.display()))?;
        }
        check(
            (0.0..1.0).contains(&self.valid_fraction),
            "valid_fraction",
            "must be in [0, 1)",
        )?;
        check(self.max_vocab > 0, "max_vocab", "must be positive")?;
        check(self.embed_dim > 0, "embed_dim", "must be positive")?;
        check(
            !self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0),
            "hidden",
            "need at least one positive layer size",
        )?;
        check(self.lr > 0.0, "lr", "must be positive")?;
        check(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            "lr_decay",
            "must be in (0, 1]",
        )?;
        check(self.bptt >= 2, "bptt", "must be at least 2")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(self.clip > 0.0, "clip", "must be positive")?;
        check(self.init_scale > 0.0, "init_scale", "must be positive")?;
        check(self.min_shared > 0, "min_shared", "must be positive")?;
        check(self.max_ppl.is_none_or(|p| p > 1.0), "max_ppl", "must exceed 1")?;
        check(self.max_trials != Some(0), "max_trials", "must be positive")?;
        check(self.n_random > 0, "n_random", "must be positive")?;
        check(self.t_end >= 3, "t_end", "must be at least 3")?;
        check(self.t_end < self.min_shared, "t_end", "must be below min_shared")?;
        check((0.0..=1.0).contains(&self.min_r2), "min_r2", "must be in [0, 1]")?;
        check(
            self.short_cutoff <= self.long_cutoff,
            "short_cutoff",
            "must not exceed long_cutoff",
        )?;
        check(self.corr_window > 0, "corr_window", "must be positive")?;
        check(self.z_thresh > 0.0, "z_thresh", "must be positive")?;
        check(self.top_k != Some(0), "top_k", "must be positive")?;
        check((0.0..=100.0).contains(&self.ts_pct), "ts_pct", "must be in [0, 100]")?;
        check(
            (0.0..=100.0).contains(&self.radius_pct),
            "radius_pct",
            "must be in [0, 100]",
        )?;
        check(self.n_batches >= 2, "n_batches", "need at least 2 batches")?;
        check(self.batch_len >= 2, "batch_len", "must be at least 2")?;
        check(self.n_random_sets > 0, "n_random_sets", "must be positive")?;
        check(!self.conditions.is_empty(), "conditions", "need at least one condition")?;
        if let Some(l) = self.layer {
            if self.model.is_none() {
                check(l < self.hidden.len(), "layer", "exceeds the number of layers")?;
            }
        }
        Ok(())
    }

    /// Canonical text form: one `key = value` line per field in a fixed
    /// order. Hashing this identifies the run.
    pub fn canonical(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object().expect("config is an object");
        let mut out = String::new();
        for (k, v) in obj {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_corpus() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("c.txt"), "Some text. More text.").unwrap();
        d
    }

    #[test]
    fn defaults_and_overrides() {
        let d = dir_with_corpus();
        let c = RunConfig::parse(
            "# comment\nout_dir = out\ncorpus = c.txt\nhidden = 16, 8  # trailing\nsegmentation = token_index:5\nmax_ppl = 200\n",
            d.path(),
        )
        .unwrap();
        assert_eq!(c.out_dir, d.path().join("out"));
        assert_eq!(c.hidden, vec![16, 8]);
        assert_eq!(c.segmentation, Segmentation::TokenIndex(5));
        assert_eq!(c.max_ppl, Some(200.0));
        assert_eq!(c.threshold, ThresholdRule::HalfRange);
        assert_eq!(c.conditions, vec![Condition::AllTokens, Condition::FinalTokens]);
        assert!(c.canonical().contains("hidden = [16,8]"));
        let o = RunConfig::parse_with(
            "out_dir = out\ncorpus = c.txt\nlr = 0.5\n",
            d.path(),
            &[("lr".into(), "0.25".into()), ("epochs".into(), "3".into())],
        )
        .unwrap();
        assert_eq!((o.lr, o.epochs), (0.25, 3));
    }

    #[test]
    fn errors_name_the_field() {
        let d = dir_with_corpus();
        let field = |text: &str| match RunConfig::parse(text, d.path()) {
            Err(PipelineError::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("corpus = c.txt"), "out_dir");
        assert_eq!(field("out_dir = o\ncorpus = missing.txt"), "corpus");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\nlr = fast"), "lr");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\nlr = -1"), "lr");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\ncolour = red"), "colour");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\nlr = 1\nlr = 2"), "lr");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\njunk"), "line 3");
        assert_eq!(field("out_dir = o\ncorpus = c.txt\nt_end = 90"), "t_end");
    }
}
