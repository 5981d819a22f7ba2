//! Contrastive alignment of item content representations on co-occurrence
//! pairs, and user representations pooled from aligned item vectors.
//!
//! Similarities are dot products of unit vectors, i.e. cosines scaled by
//! the temperature.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, norm, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::seed::{gauss, rng_for, sha256_hex};
use crate::synth::{ItemId, ItemRecord, Timestamp, UserRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        })
    }
}

impl std::str::FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(EntityKind::User),
            "item" => Ok(EntityKind::Item),
            other => Err(Error::Ingest(format!("unknown entity kind '{other}'"))),
        }
    }
}

/// Plain-value contrastive batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    /// `negatives[i]` holds the K negatives of anchor `i`.
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub temperature: f64,
}

impl AlignmentBatch {
    fn validate(&self) -> Result<usize> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let n = self.anchors.len();
        if n == 0 || self.positives.len() != n || self.negatives.len() != n {
            return Err(Error::Config("anchors, positives and negatives must have equal non-zero length".into()));
        }
        let dim = self.anchors[0].len();
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(Error::Dimension {
                    lhs: format!("dim {dim}"),
                    rhs: format!("dim {}", v.len()),
                });
            }
        }
        Ok(dim)
    }
}

/// One InfoNCE term: `lse([a.p, a.n_1, ..]/tau) - a.p/tau`. `negatives` is
/// an optional `K x d` matrix node.
pub fn info_nce_term(g: &mut Graph, anchor: Var, positive: Var, negatives: Option<Var>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let d = g.dot(anchor, positive)?;
    let pos = g.scale(d, 1.0 / tau);
    let logits = match negatives {
        Some(m) if g.value(m).rows > 0 => {
            let n = g.matvec(m, anchor)?;
            let n = g.scale(n, 1.0 / tau);
            g.concat(&[pos, n])?
        }
        _ => pos,
    };
    let lse = g.log_sum_exp(logits)?;
    g.sub(lse, pos)
}

/// Mean InfoNCE over a batch of anchors.
pub fn info_nce(
    g: &mut Graph,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Option<Var>],
    tau: f64,
) -> Result<Var> {
    if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Config("info_nce needs matching non-empty anchor/positive/negative lists".into()));
    }
    let terms = anchors
        .iter()
        .zip(positives)
        .zip(negatives)
        .map(|((&a, &p), &n)| info_nce_term(g, a, p, n, tau))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&terms)?;
    Ok(g.mean(stacked))
}

/// Builds the graph for a plain [`AlignmentBatch`] with every vector as a
/// trainable leaf. Returns the loss and the leaves (anchors, positives,
/// negative matrices).
pub fn info_nce_batch(g: &mut Graph, batch: &AlignmentBatch) -> Result<(Var, Vec<Var>, Vec<Var>, Vec<Option<Var>>)> {
    batch.validate()?;
    let anchors: Vec<Var> = batch.anchors.iter().map(|v| g.variable(Tensor::vector(v.clone()))).collect();
    let positives: Vec<Var> = batch.positives.iter().map(|v| g.variable(Tensor::vector(v.clone()))).collect();
    let negatives = batch
        .negatives
        .iter()
        .map(|negs| {
            if negs.is_empty() {
                Ok(None)
            } else {
                Ok(Some(g.variable(Tensor::from_rows(negs)?)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = info_nce(g, &anchors, &positives, &negatives, batch.temperature)?;
    Ok((loss, anchors, positives, negatives))
}

/// Unit-norm representation per entity, indexed by dense entity id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRepStore {
    pub kind: EntityKind,
    pub dim: usize,
    pub reps: Vec<Vec<f64>>,
}

impl SemanticRepStore {
    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.reps.get(id as usize).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        return e;
    }
    v.iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub rep_dim: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub window: usize,
    pub min_count: u32,
    /// Exponential recency decay for user pooling.
    pub user_decay: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            rep_dim: 16,
            temperature: 0.2,
            epochs: 10,
            batch_size: 128,
            lr: 5e-3,
            window: 3,
            min_count: 1,
            user_decay: 0.9,
        }
    }
}

impl EncoderConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))[..16].to_string()
    }
}

/// Two-layer item encoder, `tanh` between layers.
#[derive(Debug, Clone)]
pub struct ItemEncoder {
    pub store: ParamStore,
    pub net: Mlp,
}

impl ItemEncoder {
    pub fn new(input_dim: usize, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "item-encoder");
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "encoder",
            &[input_dim, cfg.hidden_dim, cfg.rep_dim],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        Self { store, net }
    }

    pub fn encode(&self, content: &[f64]) -> Vec<f64> {
        unit(&self.net.eval(&self.store, content))
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub encoder: ItemEncoder,
    pub reps: SemanticRepStore,
    pub epoch_losses: Vec<f64>,
}

/// Trains the encoder with in-batch negatives: for anchor `i`, the
/// positives of every other anchor in the batch are its negatives. Each
/// co-occurrence pair is used in both directions.
pub fn train_item_encoder(
    catalog: &[ItemRecord],
    pairs: &[(ItemId, ItemId, u32)],
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<AlignmentOutcome> {
    if catalog.is_empty() {
        return Err(Error::Config("empty catalog".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {}", cfg.temperature)));
    }
    if pairs.is_empty() {
        return Err(Error::AlignmentSkipped("no co-occurrence pairs".into()));
    }
    let input_dim = catalog[0].content_rep.len();
    let mut enc = ItemEncoder::new(input_dim, cfg, seed);
    let mut adam = AdamState::new(&enc.store);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut directed: Vec<(ItemId, ItemId)> = pairs.iter().flat_map(|&(a, b, _)| [(a, b), (b, a)]).collect();
    let mut rng = rng_for(seed, "align-batches");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(2);
    for _ in 0..cfg.epochs {
        directed.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in directed.chunks(bs) {
            enc.store.zero_grad();
            let mut g = Graph::new();
            let a_rows: Vec<Vec<f64>> = chunk.iter().map(|&(a, _)| catalog[a as usize].content_rep.clone()).collect();
            let p_rows: Vec<Vec<f64>> = chunk.iter().map(|&(_, p)| catalog[p as usize].content_rep.clone()).collect();
            let a_in = g.constant(Tensor::from_rows(&a_rows)?);
            let p_in = g.constant(Tensor::from_rows(&p_rows)?);
            let a_out = enc.net.forward_rows(&mut g, &enc.store, a_in)?;
            let p_out = enc.net.forward_rows(&mut g, &enc.store, p_in)?;
            let a_unit = g.normalize_rows(a_out)?;
            let p_unit = g.normalize_rows(p_out)?;
            let mut terms = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let a = g.row(a_unit, i)?;
                let p = g.row(p_unit, i)?;
                let others: Vec<usize> = (0..chunk.len()).filter(|&j| j != i).collect();
                let negs = if others.is_empty() {
                    None
                } else {
                    Some(g.gather_rows(p_unit, &others)?)
                };
                terms.push(info_nce_term(&mut g, a, p, negs, cfg.temperature)?);
            }
            let stacked = g.concat(&terms)?;
            let loss = g.mean(stacked);
            g.backward(loss)?;
            g.accumulate_into(&mut enc.store);
            adam_step(&mut enc.store, &mut adam, &adam_cfg);
            total += g.scalar(loss);
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let reps = encode_catalog(&enc, catalog, cfg.rep_dim);
    Ok(AlignmentOutcome {
        encoder: enc,
        reps,
        epoch_losses,
    })
}

pub fn encode_catalog(enc: &ItemEncoder, catalog: &[ItemRecord], dim: usize) -> SemanticRepStore {
    SemanticRepStore {
        kind: EntityKind::Item,
        dim,
        reps: catalog.iter().map(|it| enc.encode(&it.content_rep)).collect(),
    }
}

/// Normalized raw content representations; used when alignment is skipped.
pub fn passthrough_item_reps(catalog: &[ItemRecord]) -> SemanticRepStore {
    SemanticRepStore {
        kind: EntityKind::Item,
        dim: catalog.first().map_or(0, |i| i.content_rep.len()),
        reps: catalog.iter().map(|i| unit(&i.content_rep)).collect(),
    }
}

/// Recency-weighted mean of clicked-item representations. The most recent
/// click has weight 1, the one before it `decay`, then `decay^2`, and so on.
/// Users without clicks before `cutoff` fall back to a fixed random
/// projection of their profile features.
pub fn derive_user_reps(
    users: &[UserRecord],
    item_reps: &SemanticRepStore,
    decay: f64,
    cutoff: Option<Timestamp>,
    seed: u64,
) -> Result<SemanticRepStore> {
    let dim = item_reps.dim;
    let profile_dim = users.first().map_or(0, |u| u.profile_features.len());
    let mut rng = rng_for(seed, "profile-projection");
    let proj: Vec<Vec<f64>> = (0..dim).map(|_| (0..profile_dim).map(|_| gauss(&mut rng)).collect()).collect();
    let mut reps = Vec::with_capacity(users.len());
    for u in users {
        let hist: Vec<ItemId> = u
            .history
            .iter()
            .filter(|&&(_, t)| cutoff.is_none_or(|c| t < c))
            .map(|&(i, _)| i)
            .collect();
        if hist.is_empty() {
            let p: Vec<f64> = proj.iter().map(|row| crate::autograd::dot(row, &u.profile_features)).collect();
            reps.push(unit(&p));
            continue;
        }
        let mut acc = vec![0.0; dim];
        let mut w = 1.0;
        for &i in hist.iter().rev() {
            let r = item_reps
                .get(i)
                .ok_or_else(|| Error::OutOfVocabulary(format!("item {i} has no representation")))?;
            for (a, x) in acc.iter_mut().zip(r) {
                *a += w * x;
            }
            w *= decay;
        }
        reps.push(unit(&acc));
    }
    Ok(SemanticRepStore {
        kind: EntityKind::User,
        dim,
        reps,
    })
}

#[derive(Serialize, Deserialize)]
struct RepLine {
    id: u32,
    vector: Vec<f64>,
}

pub fn write_reps(path: &std::path::Path, meta: &crate::io::Meta, store: &SemanticRepStore) -> Result<()> {
    let lines: Vec<RepLine> = store
        .reps
        .iter()
        .enumerate()
        .map(|(id, v)| RepLine {
            id: id as u32,
            vector: v.clone(),
        })
        .collect();
    let meta = meta.clone().with("entity_kind", store.kind).with("dim", store.dim);
    crate::io::write_jsonl(path, &meta, &lines)
}

pub fn read_reps(path: &std::path::Path) -> Result<(crate::io::Meta, SemanticRepStore)> {
    let (meta, lines): (_, Vec<RepLine>) = crate::io::read_jsonl(path)?;
    let kind: EntityKind = meta
        .extra
        .get("entity_kind")
        .ok_or_else(|| Error::Ingest(format!("{}: meta lacks entity_kind", path.display())))?
        .parse()?;
    let mut reps = Vec::with_capacity(lines.len());
    for (k, l) in lines.into_iter().enumerate() {
        if l.id as usize != k {
            return Err(Error::Ingest(format!("{}: ids must be dense and ordered", path.display())));
        }
        reps.push(l.vector);
    }
    let dim = reps.first().map_or(0, Vec::len);
    Ok((meta, SemanticRepStore { kind, dim, reps }))
}
