//! Config-driven orchestration of the full analysis with atomic, hashed
//! outputs and a run manifest.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ablation::{compare_groups, make_batches, write_reports_csv, AblationReport, Ablator};
use crate::connectivity::{
    binarized_top_k_graph, identify_controllers, identify_integrators, k_core, mds_embed, node_table,
    projection_profiles, strong_projections, timescale_degree_correlation, write_edges_csv,
};
use crate::corpus::{
    extract_trials, sample_random_contexts, Corpus, SentenceScorer, TrialConstraints, TrialSet, Vocabulary,
};
use crate::numerics::{mean, paired_t_greater, Correlation, PairedTest};
use crate::rnn::{weights_checksum, Model, ModelConfig, FORMAT_VERSION};
use crate::timescale::{
    compare_timescales, difference_curves, fit_and_map, layer_correlation_curve, read_timescales_csv,
    run_context_experiment, summarize_distribution, summarize_timescales, trial_mean_correlation,
    write_correlation_csv, write_curves_csv, write_records_csv, DistributionSummary, ExperimentConfig, MapComparison,
    MapConfig, UnitTimescale,
};
use crate::trainer::{train, write_curve_csv, EpochStats, TrainConfig};

pub use config::{RunConfig, TextMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{} exists; pass --force to overwrite", .0.display())]
    OutputExists(PathBuf),
    #[error("[{module}] {message}")]
    Analysis { module: &'static str, message: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    fn analysis(module: &'static str) -> impl Fn(&dyn std::fmt::Display) -> Self {
        move |e| PipelineError::Analysis {
            module,
            message: e.to_string(),
        }
    }

    /// 2 for configuration problems, 1 for analysis or I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } | PipelineError::OutputExists(_) => 2,
            PipelineError::Analysis { .. } | PipelineError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MODEL_FILE: &str = "model.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CURVE_FILE: &str = "train_curve.csv";
pub const TRIALS_FILE: &str = "trials.json";
pub const TIMESCALES_FILE: &str = "timescales.csv";
pub const CORRELATION_FILE: &str = "layer_correlation.csv";
pub const DIFFERENCE_FILE: &str = "difference_curves.csv";
pub const TIMESCALE_SUMMARY_FILE: &str = "timescale_summary.json";
pub const EDGES_FILE: &str = "edges.csv";
pub const TOPK_EDGES_FILE: &str = "topk_edges.csv";
pub const NODES_FILE: &str = "nodes.json";
pub const UNIT_SETS_FILE: &str = "unit_sets.json";
pub const CONNECTIVITY_SUMMARY_FILE: &str = "connectivity_summary.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_JSON_FILE: &str = "ablation.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One configured run bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimescaleSummary {
    pub layer: usize,
    pub source: String,
    pub n_trials: usize,
    pub n_pairs: usize,
    pub t_pre: usize,
    pub t_shared: usize,
    pub t_end: usize,
    pub n_units: usize,
    pub n_included: usize,
    pub n_censored: usize,
    pub exclusions: BTreeMap<String, usize>,
    pub distribution: Option<DistributionSummary>,
    /// Same units under the other threshold rule.
    pub distribution_alt: Option<DistributionSummary>,
    /// `(layer, mean r over the first corr_window shared tokens)`.
    pub layer_mean_correlation: Vec<(usize, f64)>,
    /// Bottom layer's per-trial mean correlation exceeds the top layer's.
    pub hierarchy_test: Option<PairedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSets {
    pub layer: usize,
    pub controllers: Vec<usize>,
    pub integrators: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivitySummary {
    pub layer: usize,
    pub z_thresh: f64,
    pub n_strong: usize,
    pub top_k: usize,
    pub k_max: usize,
    pub n_controllers: usize,
    pub n_integrators: usize,
    pub degree_correlation: Option<Correlation>,
    pub degree_correlation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub weight_format_version: u32,
    pub created: String,
    pub config_sha256: String,
    pub config: String,
    pub model_checksum: String,
    pub seeds: BTreeMap<String, u64>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        Self { cfg, force }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn guard(&self, names: &[&str]) -> Result<(), PipelineError> {
        if self.force {
            return Ok(());
        }
        match names.iter().map(|n| self.out(n)).find(|p| p.exists()) {
            Some(p) => Err(PipelineError::OutputExists(p)),
            None => Ok(()),
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        write_atomic(&self.out(name), bytes)
    }

    fn read(&self, name: &str, module: &'static str, hint: &str) -> Result<String, PipelineError> {
        let p = self.out(name);
        std::fs::read_to_string(&p).map_err(|e| PipelineError::Analysis {
            module,
            message: format!("{}: {e} ({hint})", p.display()),
        })
    }

    pub fn model_path(&self) -> PathBuf {
        self.cfg.model.clone().unwrap_or_else(|| self.out(MODEL_FILE))
    }

    pub fn load_model(&self, module: &'static str) -> Result<Model, PipelineError> {
        let p = self.model_path();
        Model::load(&p).map_err(|e| PipelineError::Analysis {
            module,
            message: format!("{}: {e}", p.display()),
        })
    }

    /// The corpus under the saved vocabulary if there is one.
    pub fn load_corpus(&self, module: &'static str) -> Result<Corpus, PipelineError> {
        let vocab_path = self.out(VOCAB_FILE);
        let text_cfg = self.cfg.text_mode.text_config(self.cfg.sentence_per_line);
        let fail = PipelineError::analysis(module);
        if vocab_path.exists() {
            let v: Vocabulary =
                serde_json::from_str(&self.read(VOCAB_FILE, module, "vocabulary")?).map_err(|e| fail(&e))?;
            let raw = std::fs::read_to_string(&self.cfg.corpus).map_err(io_err(&self.cfg.corpus))?;
            Corpus::with_vocab(self.cfg.corpus.display().to_string(), raw, v).map_err(|e| fail(&e))
        } else {
            Corpus::from_file(&self.cfg.corpus, text_cfg, self.cfg.max_vocab).map_err(|e| fail(&e))
        }
    }

    fn check_vocab(corpus: &Corpus, model: &Model, module: &'static str) -> Result<(), PipelineError> {
        if corpus.vocab.len() != model.config.vocab_size || corpus.level() != model.config.level {
            return Err(PipelineError::Analysis {
                module,
                message: format!(
                    "corpus vocabulary ({} {}) does not match the model ({} {})",
                    corpus.vocab.len(),
                    corpus.level(),
                    model.config.vocab_size,
                    model.config.level
                ),
            });
        }
        Ok(())
    }

    fn analyzed_layer(&self, model: &Model) -> Result<usize, PipelineError> {
        let n = model.config.n_layers();
        let l = self.cfg.layer.unwrap_or(n - 1);
        if l >= n {
            return Err(PipelineError::config("layer", format!("model has {n} layers")));
        }
        Ok(l)
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.cfg;
        TrainConfig {
            lr: c.lr,
            lr_decay: c.lr_decay,
            epochs: c.epochs,
            bptt: c.bptt,
            batch_size: c.batch_size,
            clip: c.clip,
            seed: c.train_seed,
            init_scale: c.init_scale,
            optimizer: c.optimizer,
            forget_bias: c.forget_bias,
        }
    }

    /// Trains a model on the corpus; writes weights, vocabulary and the
    /// learning curve.
    pub fn cmd_train(&self) -> Result<Vec<EpochStats>, PipelineError> {
        if self.cfg.model.is_some() {
            return Err(PipelineError::config(
                "model",
                "a pretrained model is configured; remove it to train",
            ));
        }
        self.guard(&[MODEL_FILE, VOCAB_FILE, CURVE_FILE])?;
        let fail = PipelineError::analysis("train");
        let text_cfg = self.cfg.text_mode.text_config(self.cfg.sentence_per_line);
        let corpus = Corpus::from_file(&self.cfg.corpus, text_cfg, self.cfg.max_vocab).map_err(|e| fail(&e))?;
        let (tr, va) = corpus.train_valid_split(self.cfg.valid_fraction);
        let mc = ModelConfig {
            arch: self.cfg.arch,
            level: corpus.level(),
            vocab_size: corpus.vocab.len(),
            embed_dim: self.cfg.embed_dim,
            hidden: self.cfg.hidden.clone(),
        };
        log::info!(
            "training {} {:?} on {} tokens ({} validation)",
            mc.arch,
            mc.hidden,
            tr.len(),
            va.len()
        );
        let out = train(&mc, &corpus.tokens[tr], &corpus.tokens[va], &self.train_config()).map_err(|e| fail(&e))?;
        std::fs::create_dir_all(&self.cfg.out_dir).map_err(io_err(&self.cfg.out_dir))?;
        out.model.save(&self.out(MODEL_FILE)).map_err(|e| fail(&e))?;
        self.write(VOCAB_FILE, &json_bytes(&corpus.vocab))?;
        self.write(CURVE_FILE, &csv_bytes(|b| write_curve_csv(&out.curve, b)))?;
        Ok(out.curve)
    }

    /// Extracts trials and draws their random contexts.
    pub fn cmd_trials(&self) -> Result<TrialSet, PipelineError> {
        self.guard(&[TRIALS_FILE])?;
        let fail = PipelineError::analysis("trials");
        let corpus = self.load_corpus("trials")?;
        let model = match self.cfg.max_ppl {
            Some(_) => {
                let m = self.load_model("trials")?;
                Self::check_vocab(&corpus, &m, "trials")?;
                Some(m)
            }
            None => None,
        };
        let constraints = TrialConstraints {
            min_shared: self.cfg.min_shared,
            min_context: self.cfg.min_context,
            max_ppl: self.cfg.max_ppl,
        };
        let scorer = model.as_ref().map(|m| m as &dyn SentenceScorer);
        let mut trials = extract_trials(&corpus, self.cfg.segmentation, &constraints, scorer);
        if let Some(cap) = self.cfg.max_trials {
            trials.truncate(cap);
        }
        if trials.is_empty() {
            return Err(PipelineError::Analysis {
                module: "trials",
                message: format!("no {} trials satisfy the constraints", self.cfg.segmentation),
            });
        }
        let trials = trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                sample_random_contexts(
                    &corpus,
                    t,
                    self.cfg.n_random,
                    self.cfg.random_min_len,
                    self.cfg.trial_seed.wrapping_add(i as u64),
                )
                .map_err(|e| fail(&format!("trial {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        log::info!("{} {} trials", trials.len(), self.cfg.segmentation);
        let set = TrialSet {
            mode: self.cfg.segmentation,
            level: corpus.level(),
            constraints,
            trials,
        };
        self.write(TRIALS_FILE, &json_bytes(&set))?;
        Ok(set)
    }

    fn load_trials(&self, module: &'static str) -> Result<TrialSet, PipelineError> {
        serde_json::from_str(&self.read(TRIALS_FILE, module, "run `trials` first")?)
            .map_err(|e| PipelineError::analysis(module)(&e))
    }

    /// Runs the context experiment and maps unit timescales.
    pub fn cmd_map_timescales(&self) -> Result<TimescaleSummary, PipelineError> {
        self.guard(&[
            TIMESCALES_FILE,
            CORRELATION_FILE,
            DIFFERENCE_FILE,
            TIMESCALE_SUMMARY_FILE,
        ])?;
        let fail = PipelineError::analysis("timescale");
        let model = self.load_model("timescale")?;
        let set = self.load_trials("timescale")?;
        let layer = self.analyzed_layer(&model)?;
        let layers: Vec<usize> = (0..model.config.n_layers()).collect();
        let exp = ExperimentConfig {
            source: self.cfg.source,
            layers: layers.clone(),
            pre_window: self.cfg.pre_window,
        };
        let aligned = run_context_experiment(&model, &set.trials, &exp).map_err(|e| fail(&e))?;
        let curves = aligned
            .iter()
            .map(layer_correlation_curve)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(&e))?;
        let per_trial: Vec<Vec<f64>> = aligned
            .iter()
            .map(|a| trial_mean_correlation(a, self.cfg.corr_window))
            .collect();
        let layer_mean_correlation = layers
            .iter()
            .zip(&per_trial)
            .map(|(&l, v)| {
                let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                (l, if finite.is_empty() { f64::NAN } else { mean(&finite) })
            })
            .collect();
        let hierarchy_test = (layers.len() >= 2)
            .then(|| paired_t_greater(&per_trial[0], &per_trial[layers.len() - 1]).ok())
            .flatten();

        let diff = difference_curves(&aligned[layer], None);
        let map_cfg = MapConfig {
            t_end: self.cfg.t_end,
            threshold: self.cfg.threshold,
            min_r_squared: self.cfg.min_r2,
            ..MapConfig::default()
        };
        let records = fit_and_map(&diff, &map_cfg);
        let mut exclusions = BTreeMap::new();
        for r in &records {
            *exclusions.entry(r.reason.to_string()).or_insert(0) += 1;
        }
        let alt: Vec<usize> = records.iter().filter(|r| r.included).map(|r| r.timescale_alt).collect();
        let a = &aligned[layer];
        let summary = TimescaleSummary {
            layer,
            source: self.cfg.source.to_string(),
            n_trials: a.trials.len(),
            n_pairs: a.n_pairs(),
            t_pre: a.t_pre,
            t_shared: a.t_shared,
            t_end: self.cfg.t_end.min(a.t_shared.saturating_sub(1)),
            n_units: records.len(),
            n_included: records.iter().filter(|r| r.included).count(),
            n_censored: records.iter().filter(|r| r.included && r.censored).count(),
            exclusions,
            distribution: summarize_distribution(&records, self.cfg.short_cutoff, self.cfg.long_cutoff).ok(),
            distribution_alt: summarize_timescales(&alt, self.cfg.short_cutoff, self.cfg.long_cutoff).ok(),
            layer_mean_correlation,
            hierarchy_test,
        };
        self.write(TIMESCALES_FILE, &csv_bytes(|b| write_records_csv(&records, b)))?;
        self.write(CORRELATION_FILE, &csv_bytes(|b| write_correlation_csv(&curves, b)))?;
        self.write(DIFFERENCE_FILE, &csv_bytes(|b| write_curves_csv(&diff, b)))?;
        self.write(TIMESCALE_SUMMARY_FILE, &json_bytes(&summary))?;
        Ok(summary)
    }

    fn load_timescales(&self, module: &'static str) -> Result<Vec<UnitTimescale>, PipelineError> {
        let text = self.read(TIMESCALES_FILE, module, "run `map-timescales` first")?;
        read_timescales_csv(text.as_bytes()).map_err(|e| PipelineError::Analysis { module, message: e })
    }

    /// Strong projections, k-core controllers, MDS integrators.
    pub fn cmd_connectivity(&self) -> Result<ConnectivitySummary, PipelineError> {
        self.guard(&[
            EDGES_FILE,
            TOPK_EDGES_FILE,
            NODES_FILE,
            UNIT_SETS_FILE,
            CONNECTIVITY_SUMMARY_FILE,
        ])?;
        let fail = PipelineError::analysis("connectivity");
        let model = self.load_model("connectivity")?;
        let layer = self.analyzed_layer(&model)?;
        let ts: Vec<UnitTimescale> = self
            .load_timescales("connectivity")?
            .into_iter()
            .filter(|r| r.layer == layer)
            .collect();
        let profiles = projection_profiles(&model.weights, layer, self.cfg.z_scope).map_err(|e| fail(&e))?;
        let strong = strong_projections(&profiles, self.cfg.z_thresh);
        let k = self.cfg.top_k.unwrap_or(strong.n_edges());
        let top = if k == 0 {
            log::warn!(
                "no strong projections at |z| > {}; top-K graph is empty",
                self.cfg.z_thresh
            );
            None
        } else {
            Some(binarized_top_k_graph(&profiles, k).map_err(|e| fail(&e))?)
        };
        let core = match &top {
            Some(g) => k_core(g),
            None => k_core(&strong_projections(&profiles, f64::INFINITY)),
        };
        let controllers = identify_controllers(&core);
        let embedding = mds_embed(&profiles, self.cfg.metric).map_err(|e| fail(&e))?;
        let integrators = identify_integrators(&embedding, &ts, self.cfg.ts_pct, self.cfg.radius_pct);
        let (degree_correlation, degree_correlation_error) = match timescale_degree_correlation(&ts, &strong) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let nodes = node_table(&ts, &strong, &core, &embedding, &controllers, &integrators);
        let sets = UnitSets {
            layer,
            controllers: controllers.clone(),
            integrators: integrators.clone(),
        };
        let summary = ConnectivitySummary {
            layer,
            z_thresh: self.cfg.z_thresh,
            n_strong: strong.n_edges(),
            top_k: k,
            k_max: core.k_max,
            n_controllers: controllers.len(),
            n_integrators: integrators.len(),
            degree_correlation,
            degree_correlation_error,
        };
        self.write(EDGES_FILE, &csv_bytes(|b| write_edges_csv(&strong, b)))?;
        let top_bytes = match &top {
            Some(g) => csv_bytes(|b| write_edges_csv(g, b)),
            None => b"source,target,gate,weight,z\n".to_vec(),
        };
        self.write(TOPK_EDGES_FILE, &top_bytes)?;
        self.write(NODES_FILE, &json_bytes(&nodes))?;
        self.write(UNIT_SETS_FILE, &json_bytes(&sets))?;
        self.write(CONNECTIVITY_SUMMARY_FILE, &json_bytes(&summary))?;
        Ok(summary)
    }

    /// Ablates controller and integrator sets against random baselines.
    pub fn cmd_ablate(&self) -> Result<Vec<AblationReport>, PipelineError> {
        self.guard(&[ABLATION_CSV_FILE, ABLATION_JSON_FILE])?;
        let fail = PipelineError::analysis("ablation");
        let model = self.load_model("ablation")?;
        let corpus = self.load_corpus("ablation")?;
        Self::check_vocab(&corpus, &model, "ablation")?;
        let sets: UnitSets =
            serde_json::from_str(&self.read(UNIT_SETS_FILE, "ablation", "run `connectivity` first")?)
                .map_err(|e| fail(&e))?;
        let batches =
            make_batches(&corpus, self.cfg.n_batches, self.cfg.batch_len, self.cfg.batch_seed).map_err(|e| fail(&e))?;
        let ablator = Ablator::new(&model, &batches).map_err(|e| fail(&e))?;
        let exclude: Vec<usize> = if self.cfg.baseline_exclude_groups {
            sets.controllers
                .iter()
                .chain(&sets.integrators)
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            Vec::new()
        };
        let mut reports = Vec::new();
        for &condition in &self.cfg.conditions {
            for (name, units) in [("controllers", &sets.controllers), ("integrators", &sets.integrators)] {
                if units.is_empty() {
                    log::warn!("no {name}; skipping");
                    continue;
                }
                let mut group = ablator
                    .report(name, sets.layer, units, condition)
                    .map_err(|e| fail(&e))?;
                let hidden = model.config.hidden[sets.layer];
                let pool: &[usize] = if hidden - exclude.len() >= units.len() {
                    &exclude
                } else {
                    log::warn!(
                        "{name}: only {} units outside the groups; drawing baselines from all {hidden}",
                        hidden - exclude.len()
                    );
                    &[]
                };
                let mut base = ablator
                    .random_baselines(
                        sets.layer,
                        units.len(),
                        self.cfg.n_random_sets,
                        pool,
                        condition,
                        self.cfg.baseline_seed,
                    )
                    .map_err(|e| fail(&e))?;
                compare_groups(&mut group, &base).map_err(|e| fail(&e))?;
                for b in &mut base {
                    b.group = format!("{name}_{}", b.group);
                }
                reports.push(group);
                reports.extend(base);
            }
        }
        self.write(ABLATION_CSV_FILE, &csv_bytes(|b| write_reports_csv(&reports, b)))?;
        self.write(ABLATION_JSON_FILE, &json_bytes(&reports))?;
        Ok(reports)
    }

    /// Every stage in order, then the manifest.
    pub fn cmd_pipeline(&self) -> Result<Manifest, PipelineError> {
        self.guard(&[MANIFEST_FILE])?;
        if self.cfg.model.is_none() {
            self.cmd_train()?;
        }
        self.cmd_trials()?;
        self.cmd_map_timescales()?;
        self.cmd_connectivity()?;
        self.cmd_ablate()?;
        self.write_manifest()
    }

    pub fn write_manifest(&self) -> Result<Manifest, PipelineError> {
        let model = self.load_model("manifest")?;
        let model_checksum =
            weights_checksum(&model.config, &model.weights).map_err(|e| PipelineError::analysis("manifest")(&e))?;
        let canonical = self.cfg.canonical();
        let mut outputs = BTreeMap::new();
        let entries = std::fs::read_dir(&self.cfg.out_dir).map_err(io_err(&self.cfg.out_dir))?;
        for entry in entries {
            let entry = entry.map_err(io_err(&self.cfg.out_dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_FILE || name.ends_with(".tmp") || !entry.path().is_file() {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(io_err(&entry.path()))?;
            outputs.insert(name, sha256_hex(&bytes));
        }
        let c = &self.cfg;
        let seeds = [
            ("train_seed", c.train_seed),
            ("trial_seed", c.trial_seed),
            ("batch_seed", c.batch_seed),
            ("baseline_seed", c.baseline_seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let manifest = Manifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            weight_format_version: FORMAT_VERSION,
            created: chrono::Utc::now().to_rfc3339(),
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: canonical,
            model_checksum,
            seeds,
            outputs,
        };
        self.write(MANIFEST_FILE, &json_bytes(&manifest))?;
        Ok(manifest)
    }
}

/// Correlates two timescale tables over jointly included units and writes
/// the scatter (`layer,unit,timescale_a,timescale_b`).
pub fn cmd_compare(map_a: &Path, map_b: &Path, out: &Path, force: bool) -> Result<MapComparison, PipelineError> {
    if !force && out.exists() {
        return Err(PipelineError::OutputExists(out.to_path_buf()));
    }
    let load = |p: &Path, field: &str| -> Result<Vec<UnitTimescale>, PipelineError> {
        let f = std::fs::File::open(p).map_err(|e| PipelineError::config(field, format!("{}: {e}", p.display())))?;
        read_timescales_csv(BufReader::new(f)).map_err(|e| PipelineError::Analysis {
            module: "compare",
            message: format!("{}: {e}", p.display()),
        })
    };
    let (a, b) = (load(map_a, "map_a")?, load(map_b, "map_b")?);
    let cmp = compare_timescales(&a, &b).map_err(|e| PipelineError::analysis("compare")(&e))?;
    let mut csv = String::from("layer,unit,timescale_a,timescale_b\n");
    for (l, u, ta, tb) in &cmp.pairs {
        csv.push_str(&format!("{l},{u},{ta},{tb}\n"));
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(cmp)
}
