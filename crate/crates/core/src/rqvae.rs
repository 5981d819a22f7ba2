//! Residual quantization of semantic representations into hierarchical
//! semantic IDs.
//!
//! Codeword indices are 0-based in memory and 1-based in `semantic_ids.tsv`.
//! When `reserve_zero` is set, the last codeword of every level is a frozen
//! zero vector, so a level can always leave the residual unchanged.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{EntityKind, SemanticRepStore};
use crate::autograd::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::seed::{rng_for, sha256_hex};

pub type SemanticId = Vec<u16>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub level: usize,
    pub vectors: Vec<Vec<f64>>,
    pub usage: Vec<u64>,
    pub reserve_zero: bool,
}

impl Codebook {
    pub fn new(level: usize, vectors: Vec<Vec<f64>>, reserve_zero: bool) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Config(format!("codebook at level {level} needs >= 2 codewords")));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("codebook at level {level} has non-finite entries")));
        }
        let usage = vec![0; vectors.len()];
        let mut cb = Self {
            level,
            vectors,
            usage,
            reserve_zero,
        };
        if reserve_zero {
            let last = cb.vectors.len() - 1;
            cb.vectors[last].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.len()
    }

    fn is_frozen(&self, index: usize) -> bool {
        self.reserve_zero && index == self.vectors.len() - 1
    }

    /// Nearest codeword by squared distance; ties go to the lowest index.
    pub fn nearest(&self, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.vectors.iter().enumerate() {
            let d: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub ids: SemanticId,
    /// `r_0 = latent` through `r_N`.
    pub residuals: Vec<Vec<f64>>,
    /// Codewords summed in level order.
    pub sum: Vec<f64>,
}

/// Greedy residual quantization. Pure: codebooks are not touched.
pub fn quantize(latent: &[f64], codebooks: &[Codebook]) -> Quantized {
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    residuals.push(latent.to_vec());
    let mut sum = vec![0.0; latent.len()];
    let mut ids = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let r = residuals.last().expect("r_0 pushed");
        let id = cb.nearest(r);
        let e = &cb.vectors[id];
        let next: Vec<f64> = r.iter().zip(e).map(|(a, b)| a - b).collect();
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
        ids.push(id as u16);
        residuals.push(next);
    }
    Quantized { ids, residuals, sum }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqvaeConfig {
    /// One entry per level.
    pub codebook_sizes: Vec<usize>,
    pub latent_dim: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reserve_zero: bool,
}

impl Default for RqvaeConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![16, 16, 16],
            latent_dim: 8,
            beta: 0.25,
            ema_decay: 0.99,
            lr: 5e-3,
            epochs: 40,
            batch_size: 128,
            reserve_zero: true,
        }
    }
}

impl RqvaeConfig {
    pub fn levels(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))[..16].to_string()
    }

    fn validate(&self) -> Result<()> {
        if self.codebook_sizes.is_empty() || self.codebook_sizes.iter().any(|&m| m < 2) {
            return Err(Error::Config("every level needs a codebook of size >= 2".into()));
        }
        if self.codebook_sizes.iter().any(|&m| m > u16::MAX as usize) {
            return Err(Error::Config("codebook size exceeds u16".into()));
        }
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub kind: EntityKind,
    pub config: RqvaeConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub encoder: Dense,
    pub decoder: Dense,
    pub codebooks: Vec<Codebook>,
}

#[derive(Debug, Clone)]
pub struct RqvaeOutcome {
    pub model: QuantizerModel,
    pub epoch_losses: Vec<f64>,
    pub reseeded: usize,
}

impl QuantizerModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.eval(&self.store, x)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        self.decoder.eval(&self.store, z)
    }

    pub fn quantize_rep(&self, x: &[f64]) -> Quantized {
        quantize(&self.encode(x), &self.codebooks)
    }

    /// Reconstruction + commitment loss over the rows of `x`. `targets` holds
    /// the quantized sums. With `frozen_latent` the straight-through shift is
    /// the constant `targets - frozen_latent` instead of `sg(targets - z)`;
    /// both have the same value and gradient at the point where
    /// `frozen_latent` was computed, but only the former is smooth.
    pub fn loss_graph(&self, g: &mut Graph, x: Var, targets: &Tensor, frozen_latent: Option<&Tensor>) -> Result<Var> {
        let z = self.encoder.forward_rows(g, &self.store, x)?;
        let q = g.constant(targets.clone());
        let shift = match frozen_latent {
            None => {
                let zs = g.stop_gradient(z);
                g.sub(q, zs)?
            }
            Some(z0) => {
                let mut t = targets.clone();
                for (a, b) in t.data.iter_mut().zip(&z0.data) {
                    *a -= b;
                }
                g.constant(t)
            }
        };
        let zq = g.add(z, shift)?;
        let xhat = self.decoder.forward_rows(g, &self.store, zq)?;
        let diff = g.sub(x, xhat)?;
        let sq = g.square(diff);
        let recon = g.mean(sq);
        let cdiff = g.sub(z, q)?;
        let csq = g.square(cdiff);
        let commit = g.mean(csq);
        let commit = g.scale(commit, self.config.beta);
        g.add(recon, commit)
    }

    /// Mean squared reconstruction error when decoding the partial sum of
    /// the first `k` codewords, for `k = 1..=N`.
    pub fn mse_by_level(&self, reps: &[Vec<f64>]) -> Vec<f64> {
        let n = self.codebooks.len();
        let mut out = vec![0.0; n];
        for x in reps {
            let q = self.quantize_rep(x);
            let mut partial = vec![0.0; q.sum.len()];
            for (k, (cb, &id)) in self.codebooks.iter().zip(&q.ids).enumerate() {
                for (p, e) in partial.iter_mut().zip(&cb.vectors[id as usize]) {
                    *p += e;
                }
                let xh = self.decode(&partial);
                out[k] += x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
            }
        }
        out.iter().map(|s| s / reps.len().max(1) as f64).collect()
    }
}

struct EmaStats {
    count: Vec<f64>,
    sum: Vec<Vec<f64>>,
}

/// Per-level initial codewords: random distinct data residuals at that
/// level, so level `k` starts from the residuals left by levels `< k`.
fn init_codebooks<R: Rng>(latents: &[Vec<f64>], cfg: &RqvaeConfig, rng: &mut R) -> Result<Vec<Codebook>> {
    let mut residuals = latents.to_vec();
    let mut books = Vec::with_capacity(cfg.levels());
    for (level, &m) in cfg.codebook_sizes.iter().enumerate() {
        let free = if cfg.reserve_zero { m - 1 } else { m };
        let mut order: Vec<usize> = (0..residuals.len()).collect();
        order.shuffle(rng);
        let mut vectors: Vec<Vec<f64>> = order.iter().take(free).map(|&i| residuals[i].clone()).collect();
        if cfg.reserve_zero {
            vectors.push(vec![0.0; cfg.latent_dim]);
        }
        let cb = Codebook::new(level + 1, vectors, cfg.reserve_zero)?;
        for r in &mut residuals {
            let e = &cb.vectors[cb.nearest(r)];
            r.iter_mut().zip(e).for_each(|(a, b)| *a -= b);
        }
        books.push(cb);
    }
    Ok(books)
}

/// Trains encoder and decoder by Adam with a straight-through estimator;
/// codewords follow an exponential moving average of their assigned
/// residuals. A codeword unused for a whole epoch is reseeded to a random
/// residual at its level.
pub fn train_rqvae(reps: &SemanticRepStore, cfg: &RqvaeConfig, seed: u64) -> Result<RqvaeOutcome> {
    cfg.validate()?;
    let need = cfg.codebook_sizes[0];
    if reps.len() < need {
        return Err(Error::InsufficientData { have: reps.len(), need });
    }
    let label = format!("rqvae-{}", reps.kind);
    let mut rng = rng_for(seed, &label);
    let mut store = ParamStore::new();
    let encoder = Dense::new(&mut store, "rq.encoder", reps.dim, cfg.latent_dim, &mut rng);
    let decoder = Dense::new(&mut store, "rq.decoder", cfg.latent_dim, reps.dim, &mut rng);
    let mut model = QuantizerModel {
        kind: reps.kind,
        config: cfg.clone(),
        seed,
        store,
        encoder,
        decoder,
        codebooks: Vec::new(),
    };
    let latents: Vec<Vec<f64>> = reps.reps.iter().map(|x| model.encode(x)).collect();
    model.codebooks = init_codebooks(&latents, cfg, &mut rng)?;

    let mut ema: Vec<EmaStats> = model
        .codebooks
        .iter()
        .map(|cb| EmaStats {
            count: vec![1.0; cb.size()],
            sum: cb.vectors.clone(),
        })
        .collect();
    let mut adam = AdamState::new(&model.store);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut reseeded = 0;
    let gamma = cfg.ema_decay;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        model.codebooks.iter_mut().for_each(|cb| cb.usage.iter_mut().for_each(|u| *u = 0));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| reps.reps[i].clone()).collect();
            let quantized: Vec<Quantized> = rows.iter().map(|x| model.quantize_rep(x)).collect();
            let targets = Tensor::from_rows(&quantized.iter().map(|q| q.sum.clone()).collect::<Vec<_>>())?;

            model.store.zero_grad();
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&rows)?);
            let loss = model.loss_graph(&mut g, x, &targets, None)?;
            g.backward(loss)?;
            g.accumulate_into(&mut model.store);
            if let crate::autograd::StepOutcome::Skipped { param, .. } = adam_step(&mut model.store, &mut adam, &adam_cfg) {
                return Err(Error::Divergence {
                    epoch,
                    step: batches,
                    detail: format!("non-finite gradient in {param}"),
                });
            }
            total += g.scalar(loss);
            batches += 1;

            for (level, (cb, st)) in model.codebooks.iter_mut().zip(&mut ema).enumerate() {
                let m = cb.size();
                let mut n = vec![0.0; m];
                let mut s = vec![vec![0.0; cfg.latent_dim]; m];
                for q in &quantized {
                    let id = q.ids[level] as usize;
                    n[id] += 1.0;
                    s[id].iter_mut().zip(&q.residuals[level]).for_each(|(a, b)| *a += b);
                    cb.usage[id] += 1;
                }
                for i in 0..m {
                    if cb.is_frozen(i) {
                        continue;
                    }
                    st.count[i] = gamma * st.count[i] + (1.0 - gamma) * n[i];
                    for (acc, v) in st.sum[i].iter_mut().zip(&s[i]) {
                        *acc = gamma * *acc + (1.0 - gamma) * v;
                    }
                    if st.count[i] > 0.0 {
                        let c = st.count[i];
                        cb.vectors[i] = st.sum[i].iter().map(|v| v / c).collect();
                    }
                }
            }
        }
        epoch_losses.push(total / batches.max(1) as f64);

        let all: Vec<Quantized> = reps.reps.iter().map(|x| model.quantize_rep(x)).collect();
        for (level, (cb, st)) in model.codebooks.iter_mut().zip(&mut ema).enumerate() {
            for i in 0..cb.size() {
                if cb.usage[i] > 0 || cb.is_frozen(i) {
                    continue;
                }
                let pick = all.choose(&mut rng).expect("reps non-empty");
                cb.vectors[i] = pick.residuals[level].clone();
                st.count[i] = 1.0;
                st.sum[i] = cb.vectors[i].clone();
                reseeded += 1;
            }
        }
    }
    for cb in &mut model.codebooks {
        cb.usage.iter_mut().for_each(|u| *u = 0);
    }
    for x in &reps.reps {
        let q = model.quantize_rep(x);
        for (cb, &id) in model.codebooks.iter_mut().zip(&q.ids) {
            cb.usage[id as usize] += 1;
        }
    }
    Ok(RqvaeOutcome {
        model,
        epoch_losses,
        reseeded,
    })
}

/// Semantic ID of every entity, indexed by entity id.
pub fn assign_semantic_ids(reps: &SemanticRepStore, model: &QuantizerModel) -> Result<Vec<SemanticId>> {
    if reps.dim != model.input_dim() {
        return Err(Error::Config(format!(
            "representation dim {} does not match quantizer input dim {}",
            reps.dim,
            model.input_dim()
        )));
    }
    Ok(reps.reps.iter().map(|x| model.quantize_rep(x).ids).collect())
}

/// Partition of entities by semantic-ID prefix of length `level`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterIndex {
    pub level: usize,
    pub clusters: BTreeMap<SemanticId, Vec<u32>>,
    pub keys: Vec<SemanticId>,
}

impl ClusterIndex {
    pub fn key_of(&self, entity: u32) -> Result<&SemanticId> {
        self.keys
            .get(entity as usize)
            .ok_or_else(|| Error::OutOfVocabulary(format!("entity {entity} has no semantic id")))
    }

    /// Members of the cluster containing `entity`, itself included.
    pub fn members_of(&self, entity: u32) -> Result<&[u32]> {
        let key = self.key_of(entity)?;
        Ok(&self.clusters[key])
    }

    pub fn num_entities(&self) -> usize {
        self.keys.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }
}

pub fn build_cluster_index(ids: &[SemanticId], level: usize) -> Result<ClusterIndex> {
    let n = ids.first().map_or(0, Vec::len);
    if level == 0 || level > n {
        return Err(Error::Config(format!("cluster level must be in [1, {n}], got {level}")));
    }
    let mut clusters: BTreeMap<SemanticId, Vec<u32>> = BTreeMap::new();
    let mut keys = Vec::with_capacity(ids.len());
    for (e, id) in ids.iter().enumerate() {
        if id.len() != n {
            return Err(Error::Config(format!("entity {e} has a semantic id of length {}", id.len())));
        }
        let key = id[..level].to_vec();
        clusters.entry(key.clone()).or_default().push(e as u32);
        keys.push(key);
    }
    Ok(ClusterIndex { level, clusters, keys })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub level: usize,
    pub entities: usize,
    pub clusters: usize,
    pub collision_rate: f64,
    pub mean_cluster_size: f64,
    pub size_histogram: BTreeMap<usize, usize>,
    pub category_purity: Option<f64>,
}

/// Fraction of entities whose category is the majority category of their
/// cluster.
pub fn purity(index: &ClusterIndex, categories: &[u32]) -> f64 {
    let mut hits = 0usize;
    for members in index.clusters.values() {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &m in members {
            *counts.entry(categories[m as usize]).or_default() += 1;
        }
        hits += counts.values().max().copied().unwrap_or(0);
    }
    hits as f64 / index.num_entities().max(1) as f64
}

/// Purity after randomly permuting category labels, averaged over `rounds`.
pub fn shuffled_purity(index: &ClusterIndex, categories: &[u32], rounds: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, "purity-shuffle");
    let mut cats = categories.to_vec();
    let mut total = 0.0;
    for _ in 0..rounds {
        cats.shuffle(&mut rng);
        total += purity(index, &cats);
    }
    total / rounds.max(1) as f64
}

pub fn cluster_stats(index: &ClusterIndex, categories: Option<&[u32]>) -> Result<ClusterStats> {
    let entities = index.num_entities();
    if entities == 0 {
        return Err(Error::Config("empty cluster index".into()));
    }
    if let Some(c) = categories {
        if c.len() != entities {
            return Err(Error::Dimension {
                lhs: format!("{entities} entities"),
                rhs: format!("{} categories", c.len()),
            });
        }
    }
    let clusters = index.num_clusters();
    let mut size_histogram = BTreeMap::new();
    for m in index.clusters.values() {
        *size_histogram.entry(m.len()).or_insert(0) += 1;
    }
    Ok(ClusterStats {
        level: index.level,
        entities,
        clusters,
        collision_rate: 1.0 - clusters as f64 / entities as f64,
        mean_cluster_size: entities as f64 / clusters as f64,
        size_histogram,
        category_purity: categories.map(|c| purity(index, c)),
    })
}

pub fn write_semantic_ids(path: &Path, meta: &crate::io::Meta, tables: &[(EntityKind, &[SemanticId])]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let levels = tables.iter().find_map(|(_, ids)| ids.first()).map_or(0, Vec::len);
    writeln!(w, "#meta\tkind={}\tgenerator_version={}\tseed={}", meta.kind, meta.generator_version, meta.seed).map_err(io)?;
    let cols: Vec<String> = (1..=levels).map(|k| format!("id{k}")).collect();
    writeln!(w, "entity_kind\tentity_id\t{}", cols.join("\t")).map_err(io)?;
    for (kind, ids) in tables {
        for (e, id) in ids.iter().enumerate() {
            let parts: Vec<String> = id.iter().map(|c| (c + 1).to_string()).collect();
            writeln!(w, "{kind}\t{e}\t{}", parts.join("\t")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads `semantic_ids.tsv` back into 0-based per-kind tables.
pub fn read_semantic_ids(path: &Path) -> Result<BTreeMap<EntityKind, Vec<SemanticId>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, what: &str| Error::Ingest(format!("{}:{n}: {what}", path.display()));
    let mut out: BTreeMap<EntityKind, Vec<SemanticId>> = BTreeMap::new();
    let mut header = false;
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let n = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            if !line.starts_with("entity_kind\tentity_id") {
                return Err(bad(n, "expected column header"));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(bad(n, "expected entity_kind, entity_id and at least one id"));
        }
        let kind: EntityKind = f[0].parse().map_err(|_| bad(n, "bad entity_kind"))?;
        let e: usize = f[1].parse().map_err(|_| bad(n, "bad entity_id"))?;
        let id = f[2..]
            .iter()
            .map(|s| match s.parse::<u16>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(bad(n, "codeword ids are 1-based integers")),
            })
            .collect::<Result<SemanticId>>()?;
        let table = out.entry(kind).or_default();
        if e != table.len() {
            return Err(bad(n, "entity ids must be dense and ordered per kind"));
        }
        table.push(id);
    }
    Ok(out)
}
