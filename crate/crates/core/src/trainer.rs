//! CTR training loop, checkpoints and scoring.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::EntityKind;
use crate::autograd::{adam_step, AdamConfig, AdamState, Graph, StepOutcome, Tensor};
use crate::cgae::TransferConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::metrics::{slice_report, MetricReport, ScoredSample, Slice};
use crate::model::{AblationFlags, ClusterCache, Corpus, LossTerms, LossWeights, Model, ModelConfig};
use crate::seed::{rng_for, sha256_hex};
use crate::synth::{InteractionEvent, Timestamp, DAY_SECONDS};

const PARAMS_MAGIC: &[u8; 8] = b"TSPARAMS";
const ADAM_MAGIC: &[u8; 8] = b"TSADAMST";
pub const CHECKPOINT_VERSION: u32 = 1;
const SCORE_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_ortho: f64,
    pub transfer: TransferConfig,
    pub model: ModelConfig,
    pub flags: AblationFlags,
    /// Append one pairable event to batches that have no tail entity with a
    /// head partner.
    pub guarantee_pairs: bool,
    /// Trailing days of the train split held out for per-epoch metrics.
    pub validation_days: u32,
    /// Also rebuild the cluster-mean cache every this many steps within an
    /// epoch; 0 rebuilds at epoch starts only.
    pub cache_refresh_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            lr: 1e-3,
            lambda_ortho: 0.1,
            transfer: TransferConfig::default(),
            model: ModelConfig::default(),
            flags: AblationFlags::default(),
            guarantee_pairs: true,
            validation_days: 1,
            cache_refresh_steps: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_ortho >= 0.0) || self.transfer.lambda_head < 0.0 || self.transfer.lambda_tail < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    /// Hash of everything except the ablation flags.
    pub fn comparability_hash(&self) -> String {
        hash_of(&TrainConfig {
            flags: AblationFlags::default(),
            ..self.clone()
        })
    }

    pub fn weights(&self) -> LossWeights {
        let mut transfer = self.transfer.clone();
        if self.flags.no_cluster_emb {
            transfer.lambda_head = 0.0;
            transfer.lambda_tail = 0.0;
        }
        LossWeights {
            transfer,
            lambda_ortho: self.lambda_ortho,
        }
    }
}

fn hash_of<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))[..16].to_string()
}

/// Validation metrics and train losses after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the initialization.
    pub epoch: usize,
    pub steps: u64,
    pub train_main: Option<f64>,
    pub train_total: Option<f64>,
    pub train_transfer: Option<f64>,
    pub train_ortho: Option<f64>,
    pub pairs: usize,
    pub validation: MetricReport,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub slice: String,
    pub train_main: Option<f64>,
    pub train_total: Option<f64>,
    pub samples: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

impl EpochRecord {
    pub fn lines(&self) -> Vec<MetricsLine> {
        Slice::ALL
            .iter()
            .map(|&s| {
                let m = self.validation.slice(s);
                MetricsLine {
                    epoch: self.epoch,
                    slice: s.name().to_string(),
                    train_main: self.train_main,
                    train_total: self.train_total,
                    samples: m.samples,
                    positives: m.positives,
                    auc: m.auc,
                    gauc: m.gauc,
                }
            })
            .collect()
    }
}

/// Splits train events into fitting and validation parts by time.
pub fn validation_split(
    train: &[InteractionEvent],
    split_time: Timestamp,
    days: u32,
) -> Result<(Vec<InteractionEvent>, Vec<InteractionEvent>)> {
    let cut = split_time - Timestamp::from(days) * DAY_SECONDS;
    let (fit, valid): (Vec<_>, Vec<_>) = train.iter().partition(|e| e.timestamp < cut);
    if fit.is_empty() {
        return Err(Error::Split(format!("no training events before the {days}-day validation window")));
    }
    Ok((fit, valid))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    version: u32,
    seed: u64,
    config_hash: String,
    assembly_hash: String,
    epoch: usize,
    cursor: usize,
    in_epoch: bool,
    sums: EpochSums,
    first_main: Option<f64>,
    cache: Option<ClusterCache>,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct EpochSums {
    steps: u64,
    main: f64,
    total: f64,
    transfer: f64,
    ortho: f64,
    pairs: usize,
}

pub struct Trainer<'a> {
    pub corpus: &'a Corpus,
    pub config: TrainConfig,
    pub seed: u64,
    pub model: Model,
    adam: AdamState,
    adam_cfg: AdamConfig,
    fit: Vec<InteractionEvent>,
    valid: Vec<InteractionEvent>,
    pairable: Vec<usize>,
    order: Vec<usize>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        corpus: &'a Corpus,
        fit: Vec<InteractionEvent>,
        valid: Vec<InteractionEvent>,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if fit.is_empty() {
            return Err(Error::Config("no training events".into()));
        }
        let model = Model::new(&config.model, config.flags, corpus, seed)?;
        let adam = AdamState::new(&model.store);
        let pairable = fit
            .iter()
            .enumerate()
            .filter(|(_, e)| corpus.pairable(EntityKind::User, e.user_id) || corpus.pairable(EntityKind::Item, e.item_id))
            .map(|(k, _)| k)
            .collect();
        let state = TrainState {
            version: CHECKPOINT_VERSION,
            seed,
            config_hash: config.hash(),
            assembly_hash: model.assembly_hash(),
            epoch: 0,
            cursor: 0,
            in_epoch: false,
            sums: EpochSums::default(),
            first_main: None,
            cache: None,
            history: Vec::new(),
        };
        Ok(Self {
            corpus,
            adam_cfg: AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            config: config.clone(),
            seed,
            model,
            adam,
            fit,
            valid,
            pairable,
            order: Vec::new(),
            state,
        })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    /// `L_main` of the very first batch.
    pub fn first_main(&self) -> Option<f64> {
        self.state.first_main
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs && !self.state.in_epoch
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.fit.len()).collect();
        order.shuffle(&mut rng_for(self.seed, &format!("epoch-{epoch}")));
        order
    }

    /// Records initialization metrics once.
    fn ensure_initial(&mut self) -> Result<()> {
        if self.state.history.is_empty() {
            let record = self.evaluate_record(0, EpochSums::default())?;
            self.state.history.push(record);
        }
        Ok(())
    }

    pub fn begin_epoch(&mut self) -> Result<()> {
        self.ensure_initial()?;
        if self.state.in_epoch {
            return Ok(());
        }
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.state.in_epoch = true;
        self.state.sums = EpochSums::default();
        self.state.cache = self.model.cluster_cache(self.corpus, self.state.epoch)?;
        self.order = self.epoch_order(self.state.epoch);
        Ok(())
    }

    /// One optimizer step on the next batch; `None` once the epoch is spent.
    pub fn step(&mut self) -> Result<Option<LossTerms>> {
        if !self.state.in_epoch {
            return Err(Error::Config("step outside an epoch".into()));
        }
        if self.order.is_empty() {
            self.order = self.epoch_order(self.state.epoch);
        }
        let start = self.state.cursor;
        if start >= self.order.len() {
            return Ok(None);
        }
        let end = (start + self.config.batch_size).min(self.order.len());
        let step_no = start / self.config.batch_size;
        let refresh = self.config.cache_refresh_steps;
        if refresh > 0 && step_no > 0 && step_no % refresh == 0 {
            self.state.cache = self.model.cluster_cache(self.corpus, self.state.epoch)?;
        }
        let mut rng = rng_for(self.seed, &format!("pairs-{}-{}", self.state.epoch, step_no));
        let mut batch: Vec<InteractionEvent> = self.order[start..end].iter().map(|&k| self.fit[k]).collect();
        if self.config.guarantee_pairs && self.config.weights().transfer.enabled() {
            let has = batch.iter().any(|e| {
                self.corpus.pairable(EntityKind::User, e.user_id) || self.corpus.pairable(EntityKind::Item, e.item_id)
            });
            if !has {
                if let Some(&k) = self.pairable.choose(&mut rng) {
                    batch.push(self.fit[k]);
                }
            }
        }
        let weights = self.config.weights();
        let mut g = Graph::new();
        let lg = self
            .model
            .loss(&mut g, self.corpus, self.state.cache.as_ref(), &batch, &weights, &mut rng)?;
        let terms = lg.terms;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                epoch: self.state.epoch,
                step: step_no,
                detail: format!("loss is {}", terms.total),
            });
        }
        g.backward(lg.total)?;
        self.model.store.zero_grad();
        g.accumulate_into(&mut self.model.store);
        if let StepOutcome::Skipped { param, .. } = adam_step(&mut self.model.store, &mut self.adam, &self.adam_cfg) {
            return Err(Error::Divergence {
                epoch: self.state.epoch,
                step: step_no,
                detail: format!("non-finite gradient in {param}"),
            });
        }
        self.state.first_main.get_or_insert(terms.main);
        let s = &mut self.state.sums;
        s.steps += 1;
        s.main += terms.main;
        s.total += terms.total;
        s.transfer += terms.transfer;
        s.ortho += terms.ortho;
        s.pairs += terms.pairs;
        self.state.cursor = end;
        Ok(Some(terms))
    }

    pub fn end_epoch(&mut self) -> Result<&EpochRecord> {
        if !self.state.in_epoch {
            return Err(Error::Config("end_epoch outside an epoch".into()));
        }
        let record = self.evaluate_record(self.state.epoch, self.state.sums)?;
        self.state.history.push(record);
        self.state.in_epoch = false;
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Runs every remaining epoch; resumes mid-epoch after a reload.
    pub fn fit(&mut self) -> Result<()> {
        self.ensure_initial()?;
        if self.state.in_epoch {
            while self.step()?.is_some() {}
            self.end_epoch()?;
        }
        while self.state.epoch < self.config.epochs {
            self.begin_epoch()?;
            while self.step()?.is_some() {}
            self.end_epoch()?;
        }
        Ok(())
    }

    fn evaluate_record(&self, epoch: usize, sums: EpochSums) -> Result<EpochRecord> {
        let mean = |x: f64| (sums.steps > 0).then(|| x / sums.steps as f64);
        let validation = if self.valid.is_empty() {
            slice_report(&[], &self.config.hash(), &self.config.comparability_hash())
        } else {
            let samples = self.score(&self.valid)?;
            slice_report(&samples, &self.config.hash(), &self.config.comparability_hash())
        };
        Ok(EpochRecord {
            epoch,
            steps: sums.steps,
            train_main: mean(sums.main),
            train_total: mean(sums.total),
            train_transfer: mean(sums.transfer),
            train_ortho: mean(sums.ortho),
            pairs: sums.pairs,
            validation,
        })
    }

    /// Scores events with the current parameters.
    pub fn score(&self, events: &[InteractionEvent]) -> Result<Vec<ScoredSample>> {
        let cache = self.model.cluster_cache(self.corpus, self.state.epoch)?;
        score_events(&self.model, self.corpus, cache.as_ref(), events)
    }

    pub fn metrics_lines(&self) -> Vec<MetricsLine> {
        self.state.history.iter().flat_map(EpochRecord::lines).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_params(&dir.join("params.bin"), &self.model)?;
        write_adam(&dir.join("adam.bin"), &self.adam)?;
        write_json(&dir.join("state.json"), &self.state)
    }

    /// Restores a trainer saved by [`Trainer::save`] under the same corpus,
    /// events, config and seed.
    pub fn load(
        corpus: &'a Corpus,
        fit: Vec<InteractionEvent>,
        valid: Vec<InteractionEvent>,
        config: &TrainConfig,
        seed: u64,
        dir: &Path,
    ) -> Result<Self> {
        let mut t = Self::new(corpus, fit, valid, config, seed)?;
        let state: TrainState = read_json(&dir.join("state.json"))?;
        if state.version != CHECKPOINT_VERSION {
            return Err(Error::Ingest(format!("checkpoint version {} unsupported", state.version)));
        }
        if state.config_hash != t.state.config_hash || state.seed != seed {
            return Err(Error::Config(format!(
                "checkpoint was written for config {} seed {}, not {} seed {seed}",
                state.config_hash, state.seed, t.state.config_hash
            )));
        }
        if state.assembly_hash != t.state.assembly_hash {
            return Err(Error::Ingest("checkpoint parameter layout differs from the model".into()));
        }
        read_params(&dir.join("params.bin"), &mut t.model)?;
        t.adam = read_adam(&dir.join("adam.bin"), &t.model)?;
        t.state = state;
        if t.state.in_epoch {
            t.order = t.epoch_order(t.state.epoch);
        }
        Ok(t)
    }
}

/// Scores `events` in parallel chunks; output order follows input order.
pub fn score_events(
    model: &Model,
    corpus: &Corpus,
    cache: Option<&ClusterCache>,
    events: &[InteractionEvent],
) -> Result<Vec<ScoredSample>> {
    let chunks: Vec<Result<Vec<f64>>> = events
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| model.predict(corpus, cache, chunk))
        .collect();
    let mut out = Vec::with_capacity(events.len());
    let mut it = events.iter();
    for chunk in chunks {
        for score in chunk? {
            let e = it.next().expect("one score per event");
            out.push(ScoredSample {
                user_id: e.user_id,
                item_id: e.item_id,
                score,
                label: e.label,
                user_tail: corpus.user_tail[e.user_id as usize],
                item_tail: corpus.item_tail[e.item_id as usize],
            });
        }
    }
    Ok(out)
}

fn write_params(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for p in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols as u64).to_le_bytes());
        for x in &p.value.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

fn write_adam(path: &Path, adam: &AdamState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAM_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&adam.step.to_le_bytes());
    buf.extend_from_slice(&(adam.m.len() as u64).to_le_bytes());
    for (m, v) in adam.m.iter().zip(&adam.v) {
        buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for x in m.iter().chain(v) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

fn write_bytes(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    path: &'b Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'b> Reader<'b> {
    fn open(path: &'b Path, magic: &[u8; 8]) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Self { path, buf, pos: 0 };
        if r.take(8)? != magic {
            return Err(r.bad("wrong magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(r.bad(&format!("version {version} unsupported")));
        }
        Ok(r)
    }

    fn bad(&self, what: &str) -> Error {
        Error::Ingest(format!("{}: {what}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad("trailing bytes"));
        }
        Ok(())
    }
}

fn read_params(path: &Path, model: &mut Model) -> Result<()> {
    let mut r = Reader::open(path, PARAMS_MAGIC)?;
    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(r.bad(&format!("{count} tensors, model has {}", model.store.len())));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("name is not utf-8"))?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let data = r.f64s(rows * cols)?;
        let p = model.store.get_mut(id);
        if p.name != name || p.value.rows != rows || p.value.cols != cols {
            return Err(Error::Ingest(format!(
                "{}: tensor {name} {rows}x{cols} does not match {} {}x{}",
                path.display(),
                p.name,
                p.value.rows,
                p.value.cols
            )));
        }
        p.value = Tensor::new(rows, cols, data)?;
    }
    r.done()
}

fn read_adam(path: &Path, model: &Model) -> Result<AdamState> {
    let mut r = Reader::open(path, ADAM_MAGIC)?;
    let step = r.u64()?;
    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(r.bad("optimizer state does not match the model"));
    }
    let mut state = AdamState {
        step,
        m: Vec::with_capacity(count),
        v: Vec::with_capacity(count),
    };
    for p in model.store.iter() {
        let n = r.u64()? as usize;
        if n != p.value.len() {
            return Err(r.bad(&format!("moment size {n} for {}", p.name)));
        }
        state.m.push(r.f64s(n)?);
        state.v.push(r.f64s(n)?);
    }
    r.done()?;
    Ok(state)
}
