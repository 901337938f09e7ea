//! Config-driven pipeline stages: corpus generation, fine-tuning, unit
//! identification, reconfiguration, continual training, decoding, the beta
//! sweep and the report.
//!
//! Every artifact lives under `run_dir`. Each stage reads its inputs from
//! disk, so stages can run in separate processes; a missing input names the
//! command that produces it. After every stage `manifest.json` is rewritten
//! with the SHA-256 of each deterministic artifact. Wall-clock measurements
//! (timings sidecars, the sweep table) are listed as volatile without a hash.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_synthetic_corpus, load_dataset, save_dataset, Corpus, CorpusKind, TokenizedItem, TokenizerMode,
};
use crate::decode::{self, Beta, DecodeConfig, NamedTrace};
use crate::error::{LudError, Result};
use crate::eval::{self, AgreementSummary, DecodeStats, RunSummary};
use crate::identify::{self, identify_units, unit_statistics, ItemUnits, UnitStatistics, DEFAULT_ALPHA};
use crate::jsonl::create_parent;
use crate::model::{self, CausalLM, ModelConfig, TrainOptions, TrainingBatchItem};
use crate::reconfigure::{self, audit_loss_once, build_mixed_dataset, reconfigure_item};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    /// Training items.
    pub n_items: usize,
    /// Held-out items, generated after the training items from the same stream.
    pub n_eval: usize,
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
}

/// Model shape; the vocabulary size comes from the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    pub k: usize,
    /// Threshold used by `decode` and `report`.
    pub beta: Beta,
    /// Thresholds visited by `sweep`.
    pub betas: Vec<Beta>,
    pub max_new_tokens: usize,
    #[serde(default = "yes")]
    pub repetition_check: bool,
}

fn yes() -> bool {
    true
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// Artifact file names, relative to `run_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub corpus: PathBuf,
    pub eval_set: PathBuf,
    pub finetuned: PathBuf,
    pub finetune_log: PathBuf,
    pub traces: PathBuf,
    pub units: PathBuf,
    pub unit_stats: PathBuf,
    pub instances: PathBuf,
    pub audit: PathBuf,
    pub continual: PathBuf,
    pub continual_log: PathBuf,
    pub decode_dir: PathBuf,
    pub sweep: PathBuf,
    pub sweep_table: PathBuf,
    pub report_dir: PathBuf,
    pub manifest: PathBuf,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        ArtifactPaths {
            corpus: "corpus.jsonl".into(),
            eval_set: "eval.jsonl".into(),
            finetuned: "finetuned.ckpt".into(),
            finetune_log: "finetune_log.json".into(),
            traces: "tf_probs.jsonl".into(),
            units: "units.jsonl".into(),
            unit_stats: "unit_stats.json".into(),
            instances: "instances.jsonl".into(),
            audit: "audit.json".into(),
            continual: "continual.ckpt".into(),
            continual_log: "continual_log.json".into(),
            decode_dir: "decode".into(),
            sweep: "sweep.json".into(),
            sweep_table: "sweep.md".into(),
            report_dir: "report".into(),
            manifest: "manifest.json".into(),
        }
    }
}

impl ArtifactPaths {
    fn all(&self) -> [(&'static str, &PathBuf); 16] {
        [
            ("corpus", &self.corpus),
            ("eval_set", &self.eval_set),
            ("finetuned", &self.finetuned),
            ("finetune_log", &self.finetune_log),
            ("traces", &self.traces),
            ("units", &self.units),
            ("unit_stats", &self.unit_stats),
            ("instances", &self.instances),
            ("audit", &self.audit),
            ("continual", &self.continual),
            ("continual_log", &self.continual_log),
            ("decode_dir", &self.decode_dir),
            ("sweep", &self.sweep),
            ("sweep_table", &self.sweep_table),
            ("report_dir", &self.report_dir),
            ("manifest", &self.manifest),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelSpec,
    pub finetune: TrainOptions,
    pub continual: TrainOptions,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seed of the D + Dbar shuffle.
    #[serde(default)]
    pub mix_seed: u64,
    pub decode: DecodeSpec,
    #[serde(default)]
    pub paths: ArtifactPaths,
}

/// Per-invocation overrides from the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Replaces every seed in the config.
    pub seed: Option<u64>,
    pub beta: Option<Beta>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub run_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Desk-scale defaults. The reference setup fine-tunes a 13B model
    /// for 3 epochs at lr 3e-5 and continues for 3 to 5 epochs; a model
    /// this small needs many more epochs and a larger step size.
    pub fn desk_default(kind: CorpusKind) -> Self {
        PipelineConfig {
            run_dir: PathBuf::from("runs").join(match kind {
                CorpusKind::TemplatedCode => "code",
                CorpusKind::TemplatedText => "text",
            }),
            corpus: CorpusSpec {
                kind,
                n_items: 400,
                n_eval: 100,
                seed: 42,
                tokenizer: TokenizerMode::Char,
            },
            model: ModelSpec {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                max_seq_len: 160,
                seed: 42,
            },
            finetune: TrainOptions {
                epochs: 30,
                lr: 3e-3,
                batch_size: 8,
                seed: 42,
            },
            continual: TrainOptions {
                epochs: 20,
                lr: 1e-3,
                batch_size: 8,
                seed: 42,
            },
            alpha: DEFAULT_ALPHA,
            mix_seed: 42,
            decode: DecodeSpec {
                k: 10,
                beta: Beta::Threshold(0.9),
                betas: [0.75, 0.85, 0.9, 0.95, 0.99, 0.999, 0.9999]
                    .into_iter()
                    .map(Beta::Threshold)
                    .chain([Beta::ForceAr])
                    .collect(),
                max_new_tokens: 128,
                repetition_check: true,
            },
            paths: ArtifactPaths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| LudError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LudError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| LudError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LudError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.corpus.seed = seed;
            self.model.seed = seed;
            self.finetune.seed = seed;
            self.continual.seed = seed;
            self.mix_seed = seed;
        }
        if let Some(beta) = o.beta {
            self.decode.beta = beta;
        }
        if let Some(alpha) = o.alpha {
            self.alpha = alpha;
        }
        if let Some(k) = o.k {
            self.decode.k = k;
        }
        if let Some(dir) = &o.run_dir {
            self.run_dir = dir.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        identify::check_alpha(self.alpha)?;
        for b in self.decode.betas.iter().chain([&self.decode.beta]) {
            b.validate()?;
        }
        self.decode_config(self.decode.beta, self.decode.repetition_check)
            .validate()?;
        if self.corpus.n_items == 0 || self.corpus.n_eval == 0 {
            return Err(LudError::Config(
                "corpus.n_items and corpus.n_eval must be positive".into(),
            ));
        }
        for (name, t) in [("finetune", &self.finetune), ("continual", &self.continual)] {
            if t.batch_size == 0 || t.lr.is_nan() || t.lr <= 0.0 {
                return Err(LudError::Config(format!("{name}: batch_size and lr must be positive")));
            }
        }
        self.model_config(1).validate()?;
        let mut seen = HashSet::new();
        for (name, p) in self.paths.all() {
            if p.as_os_str().is_empty() {
                return Err(LudError::Config(format!("paths.{name} is empty")));
            }
            if !seen.insert(p) {
                return Err(LudError::Config(format!(
                    "paths.{name} duplicates another artifact path"
                )));
            }
        }
        Ok(())
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.run_dir.join(rel)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            vocab_size,
            seed: self.model.seed,
        }
    }

    pub fn decode_config(&self, beta: Beta, repetition_check: bool) -> DecodeConfig {
        DecodeConfig {
            beta,
            k: self.decode.k,
            max_new_tokens: self.decode.max_new_tokens,
            repetition_check,
        }
    }
}

// ---------------------------------------------------------------------------
// Helpers

fn require(cfg: &PipelineConfig, rel: &Path, artifact: &'static str, command: &'static str) -> Result<PathBuf> {
    let path = cfg.path(rel);
    if path.exists() {
        Ok(path)
    } else {
        Err(LudError::MissingArtifact {
            artifact,
            path,
            command,
        })
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| LudError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LudError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    load_dataset(&require(cfg, &cfg.paths.corpus, "training corpus", "gen-corpus")?)
}

fn load_eval_set(cfg: &PipelineConfig) -> Result<Corpus> {
    load_dataset(&require(cfg, &cfg.paths.eval_set, "held-out set", "gen-corpus")?)
}

fn ar_instances(corpus: &Corpus) -> Result<Vec<TrainingBatchItem>> {
    corpus
        .items
        .iter()
        .map(|it| TrainingBatchItem::from_item(it, corpus.vocabulary.bos_id()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    /// Absent for volatile files whose content includes wall-clock time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

fn is_volatile(cfg: &PipelineConfig, rel: &Path) -> bool {
    rel == cfg.paths.sweep
        || rel == cfg.paths.sweep_table
        || rel
            .file_name()
            .is_some_and(|n| n.to_string_lossy().ends_with(".timings.jsonl"))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LudError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| LudError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Rewrites the manifest from whatever artifacts currently exist.
pub fn write_manifest(cfg: &PipelineConfig) -> Result<Vec<ManifestEntry>> {
    let mut files = Vec::new();
    for (name, rel) in cfg.paths.all() {
        if name == "manifest" {
            continue;
        }
        let p = cfg.path(rel);
        if p.is_dir() {
            collect_files(&p, &mut files)?;
        } else if p.is_file() {
            files.push(p);
        }
    }
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.strip_prefix(&cfg.run_dir).unwrap_or(&f).to_path_buf();
        let bytes = fs::read(&f).map_err(|e| LudError::io(&f, e))?;
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: (!is_volatile(cfg, &rel)).then(|| hex::encode(Sha256::digest(&bytes))),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(&cfg.path(&cfg.paths.manifest), &entries)?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Stages

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_size: usize,
    pub unigram_entropy_bits: f64,
}

/// Generates `n_items + n_eval` items; the first `n_items` are the training
/// corpus and the rest the held-out set, both sharing one vocabulary.
pub fn gen_corpus(cfg: &PipelineConfig) -> Result<CorpusSummary> {
    let c = &cfg.corpus;
    let mut all = generate_synthetic_corpus(c.kind, c.n_items + c.n_eval, c.seed, c.tokenizer)?;
    let held_out: Vec<TokenizedItem> = all.items.split_off(c.n_items);
    let eval = Corpus {
        vocabulary: all.vocabulary.clone(),
        items: held_out,
        entropy_class: all.entropy_class,
    };
    save_dataset(&all, &cfg.path(&cfg.paths.corpus))?;
    save_dataset(&eval, &cfg.path(&cfg.paths.eval_set))?;
    write_manifest(cfg)?;
    Ok(CorpusSummary {
        n_train: all.items.len(),
        n_eval: eval.items.len(),
        vocab_size: all.vocabulary.len(),
        unigram_entropy_bits: all.unigram_entropy(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_instances: usize,
    pub n_parameters: usize,
    pub loss_history: Vec<f64>,
}

/// Trains a fresh model on the auto-regressive corpus `D`.
pub fn finetune(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let corpus = load_corpus(cfg)?;
    let mut m = CausalLM::new(cfg.model_config(corpus.vocabulary.len()))?;
    let instances = ar_instances(&corpus)?;
    tracing::info!(
        items = instances.len(),
        params = m.params().num_parameters(),
        "fine-tuning"
    );
    let report = model::train(&mut m, &instances, &cfg.finetune)?;
    m.save(&cfg.path(&cfg.paths.finetuned))?;
    let summary = TrainSummary {
        n_instances: instances.len(),
        n_parameters: m.params().num_parameters(),
        loss_history: report.loss_history,
    };
    write_json(&cfg.path(&cfg.paths.finetune_log), &summary)?;
    write_manifest(cfg)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifySummary {
    pub alpha: f64,
    pub n_items: usize,
    pub n_target_tokens: usize,
    pub stats: UnitStatistics,
}

/// Teacher-forced probabilities from the fine-tuned model, segmented into units.
pub fn identify(cfg: &PipelineConfig) -> Result<IdentifySummary> {
    let ckpt = require(cfg, &cfg.paths.finetuned, "fine-tuned checkpoint", "finetune")?;
    let corpus = load_corpus(cfg)?;
    let m = CausalLM::load_expecting(&ckpt, corpus.vocabulary.len())?;
    let mut traces = Vec::with_capacity(corpus.items.len());
    let mut items = Vec::with_capacity(corpus.items.len());
    for it in &corpus.items {
        let trace = m.teacher_forced_probs(it, corpus.vocabulary.bos_id())?;
        let units = identify_units(&trace, cfg.alpha)?;
        items.push(ItemUnits {
            item_id: it.item_id.clone(),
            units,
        });
        traces.push(trace);
    }
    identify::save_traces(&cfg.path(&cfg.paths.traces), &traces)?;
    identify::save_units(&cfg.path(&cfg.paths.units), &items)?;
    let summary = IdentifySummary {
        alpha: cfg.alpha,
        n_items: items.len(),
        n_target_tokens: traces.iter().map(|t| t.len()).sum(),
        stats: unit_statistics(items.iter().flat_map(|i| &i.units)),
    };
    write_json(&cfg.path(&cfg.paths.unit_stats), &summary)?;
    write_manifest(cfg)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconfigureSummary {
    pub n_items: usize,
    pub n_instances: usize,
    pub items_with_zero_count: usize,
    pub n_violations: usize,
    /// First few violation messages, for diagnosis.
    pub violations: Vec<String>,
}

/// Builds `Dbar` and audits every item; any violation fails the stage after
/// the audit file is written.
pub fn reconfigure(cfg: &PipelineConfig) -> Result<ReconfigureSummary> {
    let units_path = require(cfg, &cfg.paths.units, "lexical units", "identify")?;
    let corpus = load_corpus(cfg)?;
    let units = identify::load_units(&units_path)?;
    if units.len() != corpus.items.len() {
        return Err(LudError::ConfigMismatch(format!(
            "{} has {} items but the corpus has {}",
            units_path.display(),
            units.len(),
            corpus.items.len()
        )));
    }
    let vocab = &corpus.vocabulary;
    let mut all = Vec::new();
    let mut summary = ReconfigureSummary {
        n_items: corpus.items.len(),
        n_instances: 0,
        items_with_zero_count: 0,
        n_violations: 0,
        violations: Vec::new(),
    };
    for (it, iu) in corpus.items.iter().zip(&units) {
        if it.item_id != iu.item_id {
            return Err(LudError::ConfigMismatch(format!(
                "units for {} paired with item {}",
                iu.item_id, it.item_id
            )));
        }
        let inst = reconfigure_item(it, &iu.units, vocab)?;
        let audit = audit_loss_once(it, &TrainingBatchItem::from_item(it, vocab.bos_id())?, &inst, vocab);
        if !audit.zero_count_positions.is_empty() {
            summary.items_with_zero_count += 1;
        }
        summary.n_violations += audit.violations.len();
        for v in audit.violations {
            if summary.violations.len() < 20 {
                summary.violations.push(format!("{}: {v}", it.item_id));
            }
        }
        all.extend(inst);
    }
    summary.n_instances = all.len();
    reconfigure::save_instances(&cfg.path(&cfg.paths.instances), vocab, &all)?;
    write_json(&cfg.path(&cfg.paths.audit), &summary)?;
    write_manifest(cfg)?;
    if summary.n_violations > 0 || summary.items_with_zero_count > 0 {
        return Err(LudError::Invariant(format!(
            "reconfiguration audit: {} violations, {} items with unsupervised tokens (see {})",
            summary.n_violations,
            summary.items_with_zero_count,
            cfg.path(&cfg.paths.audit).display()
        )));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub n_original: usize,
    pub n_reconfigured: usize,
    pub loss_history: Vec<f64>,
}

/// Continues training the fine-tuned model on the shuffled mixture `D + Dbar`.
pub fn continual_train(cfg: &PipelineConfig) -> Result<ContinualSummary> {
    let inst_path = require(cfg, &cfg.paths.instances, "reconfigured instances", "reconfigure")?;
    let ckpt = require(cfg, &cfg.paths.finetuned, "fine-tuned checkpoint", "finetune")?;
    let corpus = load_corpus(cfg)?;
    let (vocab, dbar) = reconfigure::load_instances(&inst_path)?;
    if vocab != corpus.vocabulary {
        return Err(LudError::ConfigMismatch(format!(
            "{} was built with a different vocabulary",
            inst_path.display()
        )));
    }
    let mut m = CausalLM::load_expecting(&ckpt, vocab.len())?;
    let d = ar_instances(&corpus)?;
    let n_original = d.len();
    let mixed = build_mixed_dataset(d, &dbar, cfg.mix_seed)?;
    tracing::info!(original = n_original, reconfigured = dbar.len(), "continual training");
    let report = model::train(&mut m, &mixed, &cfg.continual)?;
    m.save(&cfg.path(&cfg.paths.continual))?;
    let summary = ContinualSummary {
        n_original,
        n_reconfigured: dbar.len(),
        loss_history: report.loss_history,
    };
    write_json(&cfg.path(&cfg.paths.continual_log), &summary)?;
    write_manifest(cfg)?;
    Ok(summary)
}

fn run_name(beta: Beta, k: usize, repetition_check: bool) -> String {
    format!("lud_beta-{beta}_k-{k}{}", if repetition_check { "" } else { "_norep" })
}

fn trace_paths(cfg: &PipelineConfig, name: &str) -> (PathBuf, PathBuf) {
    let dir = cfg.path(&cfg.paths.decode_dir);
    (
        dir.join(format!("{name}.jsonl")),
        dir.join(format!("{name}.timings.jsonl")),
    )
}

fn load_decoder(cfg: &PipelineConfig) -> Result<(CausalLM, Corpus)> {
    let ckpt = require(
        cfg,
        &cfg.paths.continual,
        "continually trained checkpoint",
        "continual-train",
    )?;
    let eval_set = load_eval_set(cfg)?;
    let m = CausalLM::load_expecting(&ckpt, eval_set.vocabulary.len())?;
    Ok((m, eval_set))
}

fn run_ar(cfg: &PipelineConfig, m: &CausalLM, eval_set: &Corpus) -> Result<Vec<NamedTrace>> {
    let traces = eval_set
        .items
        .iter()
        .map(|it| {
            Ok(NamedTrace {
                item_id: it.item_id.clone(),
                trace: decode::decode_ar(m, &eval_set.vocabulary, &it.prompt_ids, cfg.decode.max_new_tokens)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (p, t) = trace_paths(cfg, "ar");
    decode::save_traces(&p, &traces)?;
    decode::save_timings(&t, &traces)?;
    Ok(traces)
}

fn run_lud(cfg: &PipelineConfig, m: &CausalLM, eval_set: &Corpus, dc: &DecodeConfig) -> Result<Vec<NamedTrace>> {
    let traces = eval_set
        .items
        .iter()
        .map(|it| {
            Ok(NamedTrace {
                item_id: it.item_id.clone(),
                trace: decode::decode_lud(m, &eval_set.vocabulary, &it.prompt_ids, dc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (p, t) = trace_paths(cfg, &run_name(dc.beta, dc.k, dc.repetition_check));
    decode::save_traces(&p, &traces)?;
    decode::save_timings(&t, &traces)?;
    Ok(traces)
}

/// Summarizes one LUD run against the greedy run on the same prompts.
pub fn summarize_run(
    label: String,
    dc: &DecodeConfig,
    lud: &[NamedTrace],
    ar: Option<&[NamedTrace]>,
) -> Result<RunSummary> {
    let lud_traces = || lud.iter().map(|t| &t.trace);
    let total = DecodeStats::total(lud_traces());
    let (war, agreement) = match ar {
        Some(ar) => {
            let ar_total = DecodeStats::total(ar.iter().map(|t| &t.trace));
            let war = match (ar_total.per_token_secs(), total.per_token_secs()) {
                (Ok(a), Ok(l)) if a > 0.0 && l > 0.0 => Some(eval::war(a, l)?),
                _ => None,
            };
            let agreement = AgreementSummary::of(&eval::agreement_by_id(lud, ar)?);
            (war, Some(agreement))
        }
        None => (None, None),
    };
    Ok(RunSummary {
        label,
        beta: dc.beta,
        k: dc.k,
        repetition_check: dc.repetition_check,
        n_generations: lud.len(),
        n_tokens: total.n_tokens,
        n_forwards: total.n_forwards,
        fcr: eval::fcr(&total)?,
        mean_fcr: eval::mean_fcr(lud_traces())?,
        war,
        agreement,
        quality: None,
        histogram: eval::span_histogram(lud_traces(), dc.k)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub ar_tokens: usize,
    pub run: RunSummary,
}

/// Greedy and LUD decoding of every held-out prompt at the configured beta.
pub fn decode(cfg: &PipelineConfig) -> Result<DecodeSummary> {
    let (m, eval_set) = load_decoder(cfg)?;
    let ar = run_ar(cfg, &m, &eval_set)?;
    let dc = cfg.decode_config(cfg.decode.beta, cfg.decode.repetition_check);
    let lud = run_lud(cfg, &m, &eval_set, &dc)?;
    let run = summarize_run(run_name(dc.beta, dc.k, dc.repetition_check), &dc, &lud, Some(&ar))?;
    write_manifest(cfg)?;
    Ok(DecodeSummary {
        ar_tokens: ar.iter().map(|t| t.trace.n_tokens()).sum(),
        run,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// One row per beta in sweep order, then the main beta with the
    /// repetition rule toggled.
    pub rows: Vec<RunSummary>,
    /// Pooled FCR never increases along the beta-sorted rows with the
    /// configured repetition setting.
    pub fcr_non_increasing: bool,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| beta | k | repetition | FCR | mean FCR | WAR | exact match | prefix match | token F1 |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let a = r.agreement.clone().unwrap_or_default();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {} | {:.3} | {:.2} | {:.4} |",
                r.beta,
                r.k,
                if r.repetition_check { "on" } else { "off" },
                r.fcr,
                r.mean_fcr,
                r.war.map_or_else(|| "-".to_string(), |w| format!("{w:.4}")),
                a.exact_match_rate,
                a.mean_prefix_match_len,
                a.mean_token_f1,
            );
        }
        s
    }
}

/// Decodes the held-out set at every beta in the sweep list, plus the main
/// beta with the repetition rule flipped, against one greedy baseline.
pub fn sweep(cfg: &PipelineConfig) -> Result<SweepTable> {
    let (m, eval_set) = load_decoder(cfg)?;
    let ar = run_ar(cfg, &m, &eval_set)?;
    let rep = cfg.decode.repetition_check;
    let mut runs: Vec<DecodeConfig> = cfg.decode.betas.iter().map(|&b| cfg.decode_config(b, rep)).collect();
    runs.push(cfg.decode_config(cfg.decode.beta, !rep));
    let mut rows = Vec::with_capacity(runs.len());
    for dc in &runs {
        tracing::info!(beta = %dc.beta, repetition_check = dc.repetition_check, "sweep run");
        let lud = run_lud(cfg, &m, &eval_set, dc)?;
        rows.push(summarize_run(
            run_name(dc.beta, dc.k, dc.repetition_check),
            dc,
            &lud,
            Some(&ar),
        )?);
    }
    let mut main: Vec<&RunSummary> = rows.iter().filter(|r| r.repetition_check == rep).collect();
    main.sort_by(|a, b| a.beta.order_key().total_cmp(&b.beta.order_key()));
    let fcr_non_increasing = main.windows(2).all(|w| w[1].fcr <= w[0].fcr);
    if !fcr_non_increasing {
        tracing::warn!("sweep FCR is not monotone in beta");
    }
    let table = SweepTable {
        rows,
        fcr_non_increasing,
    };
    write_json(&cfg.path(&cfg.paths.sweep), &table)?;
    let md = cfg.path(&cfg.paths.sweep_table);
    fs::write(&md, table.to_markdown()).map_err(|e| LudError::io(&md, e))?;
    write_manifest(cfg)?;
    Ok(table)
}

/// Report over the saved traces of the main beta and every other LUD trace
/// file present. Wall-clock figures are left out so that the report is a
/// pure function of the trace files.
pub fn report(cfg: &PipelineConfig) -> Result<eval::ReportPaths> {
    let eval_set = load_eval_set(cfg)?;
    let dc = cfg.decode_config(cfg.decode.beta, cfg.decode.repetition_check);
    let main_name = run_name(dc.beta, dc.k, dc.repetition_check);
    let (main_path, _) = trace_paths(cfg, &main_name);
    if !main_path.exists() {
        return Err(LudError::MissingArtifact {
            artifact: "decode traces",
            path: main_path,
            command: "decode",
        });
    }
    let (ar_path, _) = trace_paths(cfg, "ar");
    let ar = if ar_path.exists() {
        Some(decode::load_traces(&ar_path)?)
    } else {
        None
    };

    let mut names: Vec<(Beta, bool)> = cfg
        .decode
        .betas
        .iter()
        .map(|&b| (b, dc.repetition_check))
        .chain([(dc.beta, dc.repetition_check), (dc.beta, !dc.repetition_check)])
        .collect();
    names.sort_by(|a, b| a.0.order_key().total_cmp(&b.0.order_key()).then(b.1.cmp(&a.1)));
    names.dedup();
    let mut runs = Vec::new();
    let mut main_traces = Vec::new();
    for (beta, rep) in names {
        let run_dc = cfg.decode_config(beta, rep);
        let name = run_name(beta, dc.k, rep);
        let (p, _) = trace_paths(cfg, &name);
        if !p.exists() {
            continue;
        }
        let traces = decode::load_traces(&p)?;
        let mut run = summarize_run(name.clone(), &run_dc, &traces, ar.as_deref())?;
        run.war = None;
        runs.push(run);
        if name == main_name {
            main_traces = traces;
        }
    }
    let paths = eval::emit_report(
        &runs,
        &main_traces,
        &eval_set.vocabulary,
        &cfg.path(&cfg.paths.report_dir),
    )?;
    write_manifest(cfg)?;
    Ok(paths)
}

/// Reads a previously written JSON artifact, e.g. the sweep table.
pub fn read_artifact<T: serde::de::DeserializeOwned>(cfg: &PipelineConfig, rel: &Path) -> Result<T> {
    read_json(&cfg.path(rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, kind: CorpusKind) -> PipelineConfig {
        let mut cfg = PipelineConfig::desk_default(kind);
        cfg.run_dir = dir.to_path_buf();
        cfg.corpus.n_items = 12;
        cfg.corpus.n_eval = 3;
        cfg.model = ModelSpec {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 160,
            seed: 1,
        };
        cfg.finetune.epochs = 2;
        cfg.continual.epochs = 1;
        cfg.decode.max_new_tokens = 12;
        cfg.decode.k = 4;
        cfg.alpha = 0.001;
        cfg
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = PipelineConfig::desk_default(CorpusKind::TemplatedCode);
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.paths.units = bad.paths.instances.clone();
        assert!(matches!(bad.validate(), Err(LudError::Config(_))));
        let mut bad = cfg.clone();
        bad.decode.k = 0;
        assert!(bad.validate().is_err());
        let mut c = cfg.clone();
        assert!(c
            .apply(&Overrides {
                alpha: Some(1.5),
                ..Default::default()
            })
            .is_err());
        let mut c = cfg;
        c.apply(&Overrides {
            seed: Some(9),
            beta: Some(Beta::ForceAr),
            k: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            (c.corpus.seed, c.finetune.seed, c.decode.k, c.decode.beta),
            (9, 9, 3, Beta::ForceAr)
        );
        assert!(PipelineConfig::from_toml("run_dir = 3").is_err());
    }

    #[test]
    fn stages_require_upstream_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), CorpusKind::TemplatedCode);
        let err = identify(&cfg).unwrap_err();
        assert!(
            matches!(
                err,
                LudError::MissingArtifact {
                    command: "finetune",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("lud finetune"));
        assert!(matches!(
            finetune(&cfg),
            Err(LudError::MissingArtifact {
                command: "gen-corpus",
                ..
            })
        ));
        assert!(matches!(
            reconfigure(&cfg),
            Err(LudError::MissingArtifact {
                command: "identify",
                ..
            })
        ));
        assert!(matches!(
            continual_train(&cfg),
            Err(LudError::MissingArtifact {
                command: "reconfigure",
                ..
            })
        ));
        assert!(matches!(
            decode(&cfg),
            Err(LudError::MissingArtifact {
                command: "continual-train",
                ..
            })
        ));
        assert!(matches!(report(&cfg), Err(LudError::MissingArtifact { .. })));
    }

    fn manifest_hashes(cfg: &PipelineConfig) -> Vec<(String, Option<String>)> {
        let m: Vec<ManifestEntry> = read_artifact(cfg, &cfg.paths.manifest).unwrap();
        m.into_iter().map(|e| (e.path, e.sha256)).collect()
    }

    #[test]
    fn tiny_pipeline_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            let cfg = tiny(dir, CorpusKind::TemplatedText);
            gen_corpus(&cfg).unwrap();
            finetune(&cfg).unwrap();
            let ids = identify(&cfg).unwrap();
            assert!(ids.stats.multi.count > 0);
            let rec = reconfigure(&cfg).unwrap();
            assert_eq!(rec.n_violations, 0);
            assert!(rec.n_instances > 0);
            continual_train(&cfg).unwrap();
            let table = sweep(&cfg).unwrap();
            assert_eq!(table.rows.len(), cfg.decode.betas.len() + 1);
            let ar_row = table.rows.iter().find(|r| r.beta == Beta::ForceAr).unwrap();
            assert_eq!(ar_row.fcr, 0.0);
            assert_eq!(ar_row.agreement.as_ref().unwrap().exact_match_rate, 1.0);
            report(&cfg).unwrap();
        }
        let (ca, cb) = (
            tiny(a.path(), CorpusKind::TemplatedText),
            tiny(b.path(), CorpusKind::TemplatedText),
        );
        let ha = manifest_hashes(&ca);
        assert_eq!(ha, manifest_hashes(&cb));
        assert!(ha.iter().any(|(p, h)| p == "continual.ckpt" && h.is_some()));
        assert!(ha.iter().any(|(p, h)| p == "sweep.json" && h.is_none()));
        assert!(ha.iter().any(|(p, _)| p == "report/report.html"));

        // regenerating the report from saved traces gives the same bytes
        let before = fs::read(ca.path(Path::new("report/report.html"))).unwrap();
        report(&ca).unwrap();
        assert_eq!(before, fs::read(ca.path(Path::new("report/report.html"))).unwrap());
    }
}
