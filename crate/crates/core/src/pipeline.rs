//! Stage runners behind the command-line driver.
//!
//! Every stage writes into its own directory under the output root and
//! finishes by writing `manifest.json`, which records the stage config hash
//! and the sha256 of every file it produced. A downstream stage refuses to
//! run unless each upstream manifest exists, was written for the current
//! config, and still matches the files on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    derive_user_reps, passthrough_item_reps, read_reps, train_item_encoder, write_reps, EncoderConfig, EntityKind,
    SemanticRepStore,
};
use crate::error::{Error, Result};
use crate::io::{read_events_tsv, read_json, read_jsonl, write_events_tsv, write_items, write_json, write_jsonl, write_users, LabelsFile, Meta, GENERATOR_VERSION};
use crate::metrics::{
    ablation_report, cluster_quality, format_ablation, format_report, slice_report, write_scores, AblationReport,
    ClusterQuality, MetricReport,
};
use crate::model::{AblationFlags, Corpus};
use crate::rqvae::{
    assign_semantic_ids, build_cluster_index, cluster_stats, read_semantic_ids, train_rqvae, write_semantic_ids,
    ClusterStats, Codebook, RqvaeConfig, SemanticId,
};
use crate::seed::{derive_seed, sha256_hex};
use crate::synth::{extract_cooccurrence, ActivityLabels, Dataset, InteractionEvent, ItemRecord, SynthConfig, Timestamp, UserRecord};
use crate::trainer::{validation_split, TrainConfig, Trainer};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Align,
    Quantize,
    Train,
    Eval,
    Ablate,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Align => "align",
            Stage::Quantize => "quantize",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Data => "gen",
            other => other.dir_name(),
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Align => &[Stage::Data],
            Stage::Quantize => &[Stage::Data, Stage::Align],
            Stage::Train => &[Stage::Data, Stage::Quantize],
            Stage::Eval => &[Stage::Data, Stage::Quantize, Stage::Train],
            Stage::Ablate => &[Stage::Data, Stage::Quantize],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSection {
    /// Skip contrastive alignment and quantize normalized content directly.
    pub skip: bool,
    pub encoder: EncoderConfig,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            skip: false,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizeSection {
    pub user: RqvaeConfig,
    pub item: RqvaeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub align: AlignSection,
    pub quantize: QuantizeSection,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: SynthConfig::default(),
            align: AlignSection::default(),
            quantize: QuantizeSection::default(),
            train: TrainConfig::default(),
        }
    }
}

fn short_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))[..16].to_string()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hash of everything a stage's outputs depend on, upstream included.
    pub fn stage_hash(&self, stage: Stage) -> String {
        match stage {
            Stage::Data => short_hash(&(self.seed, &self.data)),
            Stage::Align => short_hash(&(self.stage_hash(Stage::Data), &self.align)),
            Stage::Quantize => short_hash(&(self.stage_hash(Stage::Align), &self.quantize)),
            Stage::Train => short_hash(&(self.stage_hash(Stage::Quantize), &self.train)),
            Stage::Eval => short_hash(&(self.stage_hash(Stage::Train), "eval")),
            Stage::Ablate => short_hash(&(self.stage_hash(Stage::Quantize), &self.train.comparability_hash())),
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.dir_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub stage: Stage,
    pub config_hash: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<UpstreamRef>,
    /// File name to sha256, for every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Shared state of one command invocation.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub config_path: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig, config_path: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            root: root.into(),
            config,
            config_path: config_path.into(),
            force,
        }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.dir(stage).join(MANIFEST)
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<RunManifest> {
        read_json(&self.manifest_path(stage))
    }

    /// Loads and verifies the manifest of an upstream stage.
    fn check_upstream(&self, stage: Stage, wanted_by: Stage) -> Result<UpstreamRef> {
        let path = self.manifest_path(stage);
        let missing = || {
            Error::Dependency(format!(
                "`{}` needs the `{}` stage; run `{}` first ({} not found)",
                wanted_by.command(),
                stage.command(),
                stage.command(),
                path.display()
            ))
        };
        if !path.is_file() {
            return Err(missing());
        }
        let m: RunManifest = read_json(&path).map_err(|_| missing())?;
        let want = self.config.stage_hash(stage);
        if m.config_hash != want {
            return Err(Error::Dependency(format!(
                "`{}` outputs were produced for config {} but the current config hashes to {want}; rerun `{}`",
                stage.command(),
                m.config_hash,
                stage.command()
            )));
        }
        for (name, sha) in &m.outputs {
            let file = self.dir(stage).join(name);
            if !file.is_file() || file_sha256(&file)? != *sha {
                return Err(Error::Dependency(format!(
                    "`{}` output {} is missing or modified; rerun `{}`",
                    stage.command(),
                    file.display(),
                    stage.command()
                )));
            }
        }
        Ok(UpstreamRef {
            stage,
            config_hash: m.config_hash,
            outputs: m.outputs,
        })
    }

    /// Verifies upstream manifests and prepares an empty stage directory.
    fn begin(&self, stage: Stage) -> Result<StageRun> {
        let inputs = stage
            .upstream()
            .iter()
            .map(|&s| self.check_upstream(s, stage))
            .collect::<Result<Vec<_>>>()?;
        let dir = self.dir(stage);
        if dir.exists() {
            let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
            if non_empty {
                if !self.force {
                    return Err(Error::OutputExists(dir.display().to_string()));
                }
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(StageRun {
            stage,
            dir,
            inputs,
            started: now_unix(),
            outputs: Vec::new(),
        })
    }

    fn finish(&self, run: StageRun) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        for name in &run.outputs {
            outputs.insert(name.clone(), file_sha256(&run.dir.join(name))?);
        }
        let manifest = RunManifest {
            stage: run.stage,
            command: run.stage.command().to_string(),
            config_path: self.config_path.display().to_string(),
            config_hash: self.config.stage_hash(run.stage),
            seed: self.config.seed,
            inputs: run.inputs,
            outputs,
            started_unix: run.started,
            finished_unix: now_unix(),
            version: GENERATOR_VERSION.to_string(),
        };
        write_json(&run.dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    fn meta(&self, stage: Stage, kind: &str) -> Meta {
        Meta::new(kind, self.config.seed).with("config_hash", self.config.stage_hash(stage))
    }
}

struct StageRun {
    stage: Stage,
    dir: PathBuf,
    inputs: Vec<UpstreamRef>,
    started: u64,
    outputs: Vec<String>,
}

impl StageRun {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }
}

/// Dataset as read back from the `data` stage.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    pub events: Vec<InteractionEvent>,
    pub labels: ActivityLabels,
    pub split_time: Timestamp,
}

impl LoadedData {
    pub fn from_dataset(d: &Dataset) -> Self {
        Self {
            items: d.items.clone(),
            users: d.users.clone(),
            events: d.events.clone(),
            labels: d.labels.clone(),
            split_time: d.split_time,
        }
    }

    pub fn train_events(&self) -> Vec<InteractionEvent> {
        self.events.iter().filter(|e| e.timestamp < self.split_time).copied().collect()
    }

    pub fn test_events(&self) -> Vec<InteractionEvent> {
        self.events.iter().filter(|e| e.timestamp >= self.split_time).copied().collect()
    }

    fn validate(&self) -> Result<()> {
        let (nu, ni) = (self.users.len() as u32, self.items.len() as u32);
        if self.users.iter().enumerate().any(|(k, u)| u.user_id != k as u32)
            || self.items.iter().enumerate().any(|(k, i)| i.item_id != k as u32)
        {
            return Err(Error::Ingest("entity ids must be dense and ordered".into()));
        }
        if let Some(e) = self.events.iter().find(|e| e.user_id >= nu || e.item_id >= ni) {
            return Err(Error::Ingest(format!(
                "event references unknown user {} or item {}",
                e.user_id, e.item_id
            )));
        }
        if self.events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Ingest("events are not in time order".into()));
        }
        if self.labels.users.len() != self.users.len() || self.labels.items.len() != self.items.len() {
            return Err(Error::Ingest("labels do not cover every user and item".into()));
        }
        Ok(())
    }
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let (_, items) = read_jsonl::<ItemRecord>(&dir.join("items.jsonl"))?;
    let (_, users) = read_jsonl::<UserRecord>(&dir.join("users.jsonl"))?;
    let (_, events) = read_events_tsv(&dir.join("events.tsv"))?;
    let labels_file: LabelsFile = read_json(&dir.join("labels.json"))?;
    let split_time = labels_file.split_time;
    let data = LoadedData {
        items,
        users,
        events,
        labels: labels_file.into_labels()?,
        split_time,
    };
    data.validate()?;
    Ok(data)
}

/// Item and user semantic representations.
pub struct AlignOutput {
    pub items: SemanticRepStore,
    pub users: SemanticRepStore,
    pub epoch_losses: Vec<f64>,
    pub skipped: Option<String>,
}

pub fn align_reps(data: &LoadedData, section: &AlignSection, seed: u64) -> Result<AlignOutput> {
    let cfg = &section.encoder;
    let trained = if section.skip {
        Err(Error::AlignmentSkipped("disabled in config".into()))
    } else {
        let pairs = extract_cooccurrence(&data.train_events(), cfg.window, cfg.min_count)?;
        train_item_encoder(&data.items, &pairs, cfg, seed)
    };
    let (items, epoch_losses, skipped) = match trained {
        Ok(out) => (out.reps, out.epoch_losses, None),
        Err(Error::AlignmentSkipped(why)) => (passthrough_item_reps(&data.items), Vec::new(), Some(why)),
        Err(e) => return Err(e),
    };
    let users = derive_user_reps(&data.users, &items, cfg.user_decay, Some(data.split_time), seed)?;
    Ok(AlignOutput {
        items,
        users,
        epoch_losses,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindQuantizeReport {
    pub kind: EntityKind,
    pub epoch_losses: Vec<f64>,
    pub reseeded: usize,
    pub mse_by_level: Vec<f64>,
    pub top_level: ClusterStats,
    pub full: ClusterStats,
    pub quality: ClusterQuality,
}

pub struct QuantizeOutput {
    pub item_ids: Vec<SemanticId>,
    pub user_ids: Vec<SemanticId>,
    pub reports: Vec<KindQuantizeReport>,
    pub codebooks: Vec<KindCodebooks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCodebooks {
    pub kind: EntityKind,
    pub seed: u64,
    pub config: RqvaeConfig,
    pub codebooks: Vec<Codebook>,
}

pub fn quantize_reps(
    data: &LoadedData,
    items: &SemanticRepStore,
    users: &SemanticRepStore,
    section: &QuantizeSection,
    seed: u64,
) -> Result<QuantizeOutput> {
    let mut reports = Vec::new();
    let mut ids_by_kind = Vec::new();
    let mut codebooks = Vec::new();
    for (reps, cfg, cats, latents) in [
        (
            items,
            &section.item,
            data.items.iter().map(|i| i.category).collect::<Vec<_>>(),
            data.items.iter().map(|i| i.latent.clone()).collect::<Vec<_>>(),
        ),
        (
            users,
            &section.user,
            data.users.iter().map(|u| u.category).collect(),
            data.users.iter().map(|u| u.latent.clone()).collect(),
        ),
    ] {
        let kseed = derive_seed(seed, &reps.kind.to_string());
        let out = train_rqvae(reps, cfg, kseed)?;
        let ids = assign_semantic_ids(reps, &out.model)?;
        let levels = cfg.levels();
        reports.push(KindQuantizeReport {
            kind: reps.kind,
            epoch_losses: out.epoch_losses,
            reseeded: out.reseeded,
            mse_by_level: out.model.mse_by_level(&reps.reps),
            top_level: cluster_stats(&build_cluster_index(&ids, 1)?, Some(&cats))?,
            full: cluster_stats(&build_cluster_index(&ids, levels)?, Some(&cats))?,
            quality: cluster_quality(&ids, 1, &cats, &latents, 2000, 8, kseed)?,
        });
        codebooks.push(KindCodebooks {
            kind: reps.kind,
            seed: kseed,
            config: cfg.clone(),
            codebooks: out.model.codebooks.clone(),
        });
        ids_by_kind.push(ids);
    }
    let user_ids = ids_by_kind.pop().expect("two kinds");
    let item_ids = ids_by_kind.pop().expect("two kinds");
    Ok(QuantizeOutput {
        item_ids,
        user_ids,
        reports,
        codebooks,
    })
}

/// Stats features are recomputed from the labels so they always reflect
/// train-split counts.
pub fn build_corpus(data: &LoadedData, user_ids: Vec<SemanticId>, item_ids: Vec<SemanticId>) -> Result<Corpus> {
    let mut users = data.users.clone();
    let mut items = data.items.clone();
    crate::synth::attach_stats(&mut items, &mut users, &data.labels);
    Corpus::new(users, items, data.labels.clone(), user_ids, item_ids)
}

/// Data, representations, semantic IDs and corpus built in memory, as
/// `gen`, `align` and `quantize` would write them.
pub struct Prepared {
    pub data: LoadedData,
    pub align: AlignOutput,
    pub quantize: QuantizeOutput,
    pub corpus: Corpus,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let d = Dataset::generate(&cfg.data, cfg.seed)?;
    let data = LoadedData::from_dataset(&d);
    let align = align_reps(&data, &cfg.align, cfg.stage_seed(Stage::Align))?;
    let quantize = quantize_reps(&data, &align.items, &align.users, &cfg.quantize, cfg.stage_seed(Stage::Quantize))?;
    let corpus = build_corpus(&data, quantize.user_ids.clone(), quantize.item_ids.clone())?;
    Ok(Prepared {
        data,
        align,
        quantize,
        corpus,
    })
}

/// Trains one model and scores the test split.
pub struct VariantRun {
    pub report: MetricReport,
    pub scores: Vec<crate::metrics::ScoredSample>,
    pub metrics: Vec<crate::trainer::MetricsLine>,
    pub first_main: Option<f64>,
    pub last_main: Option<f64>,
}

pub fn train_and_score(data: &LoadedData, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<VariantRun> {
    let train = data.train_events();
    let (fit, valid) = validation_split(&train, data.split_time, cfg.validation_days)?;
    let mut t = Trainer::new(corpus, fit, valid, cfg, seed)?;
    t.fit()?;
    let scores = t.score(&data.test_events())?;
    Ok(VariantRun {
        report: slice_report(&scores, &cfg.hash(), &cfg.comparability_hash()),
        scores,
        metrics: t.metrics_lines(),
        first_main: t.first_main(),
        last_main: t.history().last().and_then(|h| h.train_main),
    })
}

fn read_ids(ws: &Workspace) -> Result<(Vec<SemanticId>, Vec<SemanticId>)> {
    let mut ids = read_semantic_ids(&ws.dir(Stage::Quantize).join("semantic_ids.tsv"))?;
    let users = ids
        .remove(&EntityKind::User)
        .ok_or_else(|| Error::Ingest("semantic_ids.tsv has no user rows".into()))?;
    let items = ids
        .remove(&EntityKind::Item)
        .ok_or_else(|| Error::Ingest("semantic_ids.tsv has no item rows".into()))?;
    Ok((users, items))
}

pub fn run_gen(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin(Stage::Data)?;
    let cfg = &ws.config;
    let d = Dataset::generate(&cfg.data, cfg.seed)?;
    let meta = |kind: &str| ws.meta(Stage::Data, kind);
    write_items(&run.path("items.jsonl"), &meta("items"), &d.items)?;
    write_users(&run.path("users.jsonl"), &meta("users"), &d.users)?;
    write_events_tsv(&run.path("events.tsv"), &meta("events"), &d.events)?;
    write_json(&run.path("labels.json"), &LabelsFile::from_labels(meta("labels"), d.split_time, &d.labels))?;
    ws.finish(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub encoder_hash: String,
    pub epoch_losses: Vec<f64>,
    pub skipped: Option<String>,
    pub items: usize,
    pub users: usize,
    pub dim: usize,
}

pub fn run_align(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin(Stage::Align)?;
    let data = load_data(&ws.dir(Stage::Data))?;
    let out = align_reps(&data, &ws.config.align, ws.config.stage_seed(Stage::Align))?;
    let meta = |kind: &str| ws.meta(Stage::Align, kind);
    write_reps(&run.path("item_reps.jsonl"), &meta("item_reps"), &out.items)?;
    write_reps(&run.path("user_reps.jsonl"), &meta("user_reps"), &out.users)?;
    let report = AlignReport {
        encoder_hash: ws.config.align.encoder.hash(),
        epoch_losses: out.epoch_losses,
        skipped: out.skipped,
        items: out.items.len(),
        users: out.users.len(),
        dim: out.items.dim,
    };
    write_json(&run.path("align_report.json"), &report)?;
    ws.finish(run)
}

pub fn run_quantize(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin(Stage::Quantize)?;
    let data = load_data(&ws.dir(Stage::Data))?;
    let (_, items) = read_reps(&ws.dir(Stage::Align).join("item_reps.jsonl"))?;
    let (_, users) = read_reps(&ws.dir(Stage::Align).join("user_reps.jsonl"))?;
    let out = quantize_reps(&data, &items, &users, &ws.config.quantize, ws.config.stage_seed(Stage::Quantize))?;
    write_semantic_ids(
        &run.path("semantic_ids.tsv"),
        &ws.meta(Stage::Quantize, "semantic_ids"),
        &[(EntityKind::User, &out.user_ids), (EntityKind::Item, &out.item_ids)],
    )?;
    write_json(&run.path("codebooks.json"), &out.codebooks)?;
    write_json(&run.path("cluster_report.json"), &out.reports)?;
    ws.finish(run)
}

pub fn run_train(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin(Stage::Train)?;
    let data = load_data(&ws.dir(Stage::Data))?;
    let (user_ids, item_ids) = read_ids(ws)?;
    let corpus = build_corpus(&data, user_ids, item_ids)?;
    let cfg = &ws.config.train;
    let train = data.train_events();
    let (fit, valid) = validation_split(&train, data.split_time, cfg.validation_days)?;
    let mut t = Trainer::new(&corpus, fit, valid, cfg, ws.config.stage_seed(Stage::Train))?;
    let outcome = t.fit();
    for name in ["params.bin", "adam.bin", "state.json"] {
        run.path(name);
    }
    t.save(&run.dir)?;
    write_jsonl(&run.path("metrics.jsonl"), &ws.meta(Stage::Train, "metrics"), &t.metrics_lines())?;
    // On divergence the last good state stays on disk without a manifest,
    // so downstream stages refuse it.
    outcome?;
    ws.finish(run)
}

pub fn run_eval(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin(Stage::Eval)?;
    let data = load_data(&ws.dir(Stage::Data))?;
    let (user_ids, item_ids) = read_ids(ws)?;
    let corpus = build_corpus(&data, user_ids, item_ids)?;
    let cfg = &ws.config.train;
    let train = data.train_events();
    let (fit, valid) = validation_split(&train, data.split_time, cfg.validation_days)?;
    let t = Trainer::load(&corpus, fit, valid, cfg, ws.config.stage_seed(Stage::Train), &ws.dir(Stage::Train))?;
    if !t.finished() {
        return Err(Error::Dependency("training checkpoint is incomplete; rerun `train`".into()));
    }
    let scores = t.score(&data.test_events())?;
    write_scores(&run.path("scores.tsv"), &scores)?;
    let report = slice_report(&scores, &cfg.hash(), &cfg.comparability_hash());
    write_json(&run.path("report.json"), &report)?;
    fs::write(run.path("report.txt"), format_report(&report)).map_err(|e| Error::io(&run.dir, e))?;
    ws.finish(run)
}

pub fn run_ablate(ws: &Workspace) -> Result<(RunManifest, AblationReport)> {
    let mut run = ws.begin(Stage::Ablate)?;
    let data = load_data(&ws.dir(Stage::Data))?;
    let (user_ids, item_ids) = read_ids(ws)?;
    let corpus = build_corpus(&data, user_ids, item_ids)?;
    let base = TrainConfig {
        flags: AblationFlags::default(),
        ..ws.config.train.clone()
    };
    let seed = ws.config.stage_seed(Stage::Train);
    let mut variants: Vec<(String, TrainConfig)> = vec![("full".to_string(), base.clone())];
    for (name, flags) in AblationFlags::variants() {
        variants.push((name.to_string(), TrainConfig { flags, ..base.clone() }));
    }
    let runs: Vec<Result<VariantRun>> = variants
        .par_iter()
        .map(|(_, cfg)| train_and_score(&data, &corpus, cfg, seed))
        .collect();
    let mut reports = Vec::new();
    for ((name, _), r) in variants.iter().zip(runs) {
        let r = r?;
        let slug = slug(name);
        write_json(&run.path(&format!("{slug}.report.json")), &r.report)?;
        write_scores(&run.path(&format!("{slug}.scores.tsv")), &r.scores)?;
        write_jsonl(
            &run.path(&format!("{slug}.metrics.jsonl")),
            &ws.meta(Stage::Ablate, "metrics").with("variant", name),
            &r.metrics,
        )?;
        reports.push((name.clone(), r.report));
    }
    let (full_name, full) = reports.remove(0);
    let table = ablation_report((&full_name, &full), &reports)?;
    write_json(&run.path("ablation.json"), &table)?;
    fs::write(run.path("ablation.txt"), format_ablation(&table)).map_err(|e| Error::io(&run.dir, e))?;
    Ok((ws.finish(run)?, table))
}

/// File-name form of a variant label.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') && !s.is_empty() {
            s.push('_');
        }
    }
    s.trim_end_matches('_').to_string()
}
