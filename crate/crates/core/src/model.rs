//! CTR model assembly: dual embeddings per entity kind, instance and cluster
//! views, view fusion and the ranking network, plus the batched forward
//! pass and the per-term training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::EntityKind;
use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::cgae::{mix, ortho_rows, transfer_loss, DualEmbeddingTable, PairIndex, TransferConfig, TransferEntry};
use crate::error::{Error, Result};
use crate::hfa::{
    compute_cluster_means, constant_column, fuse_views, history_before, item_features, target_attention,
    user_features, ClusterMeans, FeatureLayout, RetrievalIndex,
};
use crate::nn::{Activation, Dense, Mlp};
use crate::rqvae::{build_cluster_index, ClusterIndex, SemanticId};
use crate::seed::{rng_for, sha256_hex};
use crate::synth::{ActivityLabels, InteractionEvent, ItemId, ItemRecord, UserId, UserRecord, ACTIVITY_DIM};

/// Width of the pairwise activity features fed to the view gate.
pub const CROSS_DIM: usize = 2;

/// Structural switches that remove one component each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_individual_emb: bool,
    pub no_cluster_emb: bool,
    pub no_cgae_gate: bool,
    pub no_instance_view: bool,
    pub no_cluster_view: bool,
    pub no_hfa_gate: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_individual_emb && self.no_cluster_emb {
            return Err(Error::Config("cannot drop both the individual and the cluster embedding".into()));
        }
        if self.no_instance_view && self.no_cluster_view {
            return Err(Error::Config("cannot drop both the instance and the cluster view".into()));
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    /// The six single-component variants, in table order.
    pub fn variants() -> [(&'static str, AblationFlags); 6] {
        let f = AblationFlags::default();
        [
            ("w/o individual emb.", AblationFlags { no_individual_emb: true, ..f }),
            ("w/o cluster emb.", AblationFlags { no_cluster_emb: true, ..f }),
            ("w/o CGAE gate", AblationFlags { no_cgae_gate: true, ..f }),
            ("w/o instance-level feature", AblationFlags { no_instance_view: true, ..f }),
            ("w/o cluster-level feature", AblationFlags { no_cluster_view: true, ..f }),
            ("w/o HFA gate", AblationFlags { no_hfa_gate: true, ..f }),
        ]
    }

    fn has_cluster(&self) -> bool {
        !self.no_cluster_emb
    }

    fn has_individual(&self) -> bool {
        !self.no_individual_emb
    }

    /// The activity gate exists only when both embeddings do.
    fn has_cgae_gate(&self) -> bool {
        self.has_cluster() && self.has_individual() && !self.no_cgae_gate
    }

    fn has_views(&self) -> (bool, bool) {
        (!self.no_instance_view, !self.no_cluster_view)
    }

    fn has_hfa_gate(&self) -> bool {
        !self.no_instance_view && !self.no_cluster_view && !self.no_hfa_gate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub fusion_dim: usize,
    pub ranker_hidden: usize,
    pub gate_hidden: usize,
    pub seq_len: usize,
    pub cluster_seq_len: usize,
    /// Divide attention logits by `sqrt(emb_dim)`.
    pub attention_scale: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            fusion_dim: 32,
            ranker_hidden: 64,
            gate_hidden: 8,
            seq_len: 50,
            cluster_seq_len: 100,
            attention_scale: false,
            init_std: 0.01,
        }
    }
}

/// Everything the model reads besides its parameters.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pub items: Vec<ItemRecord>,
    pub labels: ActivityLabels,
    pub user_ids: Vec<SemanticId>,
    pub item_ids: Vec<SemanticId>,
    pub user_clusters: ClusterIndex,
    pub item_clusters: ClusterIndex,
    pub item_top: Vec<u16>,
    pub retrieval: RetrievalIndex,
    pub user_pairs: PairIndex,
    pub item_pairs: PairIndex,
    pub user_tail: Vec<bool>,
    pub item_tail: Vec<bool>,
    /// Standardized copies of the activity and stats features, as the model
    /// sees them.
    pub user_act: Vec<Vec<f64>>,
    pub item_act: Vec<Vec<f64>>,
    pub user_stats: Vec<Vec<f64>>,
    pub item_stats: Vec<Vec<f64>>,
}

/// Per-column z-scores over the rows; constant columns are only centered.
pub fn standardize(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = rows.len().max(1) as f64;
    let width = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; width];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    rows.iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((x, m), k)| (x - m) * k).collect())
        .collect()
}

impl Corpus {
    pub fn new(
        users: Vec<UserRecord>,
        items: Vec<ItemRecord>,
        labels: ActivityLabels,
        user_ids: Vec<SemanticId>,
        item_ids: Vec<SemanticId>,
    ) -> Result<Self> {
        if user_ids.len() != users.len() || item_ids.len() != items.len() {
            return Err(Error::Ingest(format!(
                "semantic ids cover {} users / {} items, dataset has {} / {}",
                user_ids.len(),
                item_ids.len(),
                users.len(),
                items.len()
            )));
        }
        if labels.users.len() != users.len() || labels.items.len() != items.len() {
            return Err(Error::Ingest("labels do not cover every user and item".into()));
        }
        if users.iter().any(|u| u.stats_features.is_empty()) || items.iter().any(|i| i.stats_features.is_empty()) {
            return Err(Error::Ingest("stats features missing; attach them before training".into()));
        }
        let levels = user_ids.first().map_or(0, Vec::len);
        let user_clusters = build_cluster_index(&user_ids, levels)?;
        let item_clusters = build_cluster_index(&item_ids, item_ids.first().map_or(0, Vec::len))?;
        let item_top: Vec<u16> = item_ids.iter().map(|id| id[0]).collect();
        let histories: Vec<&[(ItemId, i64)]> = users.iter().map(|u| u.history.as_slice()).collect();
        let retrieval = RetrievalIndex::new(&user_clusters, &histories, &item_top)?;
        let user_tail: Vec<bool> = labels.users.iter().map(|a| a.tail).collect();
        let item_tail: Vec<bool> = labels.items.iter().map(|a| a.tail).collect();
        let user_act = standardize(&labels.users.iter().map(|a| a.activity.as_slice()).collect::<Vec<_>>());
        let item_act = standardize(&labels.items.iter().map(|a| a.activity.as_slice()).collect::<Vec<_>>());
        let user_stats = standardize(&users.iter().map(|u| u.stats_features.as_slice()).collect::<Vec<_>>());
        let item_stats = standardize(&items.iter().map(|i| i.stats_features.as_slice()).collect::<Vec<_>>());
        Ok(Self {
            user_act,
            item_act,
            user_stats,
            item_stats,
            user_pairs: PairIndex::new(&user_ids, &user_tail),
            item_pairs: PairIndex::new(&item_ids, &item_tail),
            users,
            items,
            labels,
            user_ids,
            item_ids,
            user_clusters,
            item_clusters,
            item_top,
            retrieval,
            user_tail,
            item_tail,
        })
    }

    fn user_static(&self, u: UserId) -> [&[f64]; 2] {
        [&self.users[u as usize].profile_features, &self.user_stats[u as usize]]
    }

    fn item_static(&self, i: ItemId) -> [&[f64]; 2] {
        [&self.items[i as usize].content_rep, &self.item_stats[i as usize]]
    }

    fn user_act(&self, u: UserId) -> &[f64] {
        &self.user_act[u as usize]
    }

    fn item_act(&self, i: ItemId) -> &[f64] {
        &self.item_act[i as usize]
    }

    pub fn layout(&self, emb_dim: usize) -> FeatureLayout {
        FeatureLayout::new(
            self.users.first().map_or(0, |u| u.profile_features.len()),
            self.items.first().map_or(0, |i| i.content_rep.len()),
            self.users.first().map_or(0, |u| u.stats_features.len()),
            emb_dim,
        )
    }

    /// A user is pairable when it is tail and some head shares its cluster.
    pub fn pairable(&self, kind: EntityKind, entity: u32) -> bool {
        match kind {
            EntityKind::User => {
                self.user_tail[entity as usize] && self.user_pairs.has_partner(&self.user_ids[entity as usize])
            }
            EntityKind::Item => {
                self.item_tail[entity as usize] && self.item_pairs.has_partner(&self.item_ids[entity as usize])
            }
        }
    }
}

/// Per-epoch snapshot of cluster mean features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCache {
    pub users: ClusterMeans,
    pub items: ClusterMeans,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub layout: FeatureLayout,
    pub store: ParamStore,
    pub users: DualEmbeddingTable,
    pub items: DualEmbeddingTable,
    pub user_gate: Option<Mlp>,
    pub item_gate: Option<Mlp>,
    pub no_context_inst: Option<ParamId>,
    pub no_context_clust: Option<ParamId>,
    pub proj_inst: Option<Dense>,
    pub proj_clust: Option<Dense>,
    pub view_gate: Option<Mlp>,
    pub ranker: Mlp,
}

/// Values of one training step's loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub main: f64,
    pub transfer: f64,
    pub ortho: f64,
    pub total: f64,
    pub pairs: usize,
}

pub struct LossGraph {
    pub total: Var,
    pub main: Var,
    pub transfer: Option<Var>,
    pub ortho: Option<Var>,
    pub terms: LossTerms,
    /// Transfer-term cluster leaves per kind and the head flag of each row.
    pub transfer_rows: Vec<(EntityKind, Var, Vec<bool>)>,
}

/// Training-loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub transfer: TransferConfig,
    pub lambda_ortho: f64,
}

struct Embedded {
    /// Fused embedding matrix, one row per listed entity.
    e: Var,
    c: Option<Var>,
    d: Option<Var>,
}

impl Model {
    pub fn new(config: &ModelConfig, flags: AblationFlags, corpus: &Corpus, seed: u64) -> Result<Self> {
        flags.validate()?;
        // One stream per component: variants that drop a component keep
        // identical initial values for everything else.
        let stream = |name: &str| rng_for(seed, &format!("init/{name}"));
        let mut store = ParamStore::new();
        let m = config.emb_dim;
        let layout = corpus.layout(m);
        let (wc, wi) = (flags.has_cluster(), flags.has_individual());
        let users = DualEmbeddingTable::new(&mut store, EntityKind::User, &corpus.user_ids, m, config.init_std, wc, wi, seed)?;
        let items = DualEmbeddingTable::new(&mut store, EntityKind::Item, &corpus.item_ids, m, config.init_std, wc, wi, seed)?;
        let gate = |store: &mut ParamStore, name: &str, input: usize| {
            Mlp::new(store, name, &[input, config.gate_hidden, 1], Activation::Tanh, Activation::Sigmoid, &mut stream(name))
        };
        let (user_gate, item_gate) = if flags.has_cgae_gate() {
            (
                Some(gate(&mut store, "user.gate", ACTIVITY_DIM)),
                Some(gate(&mut store, "item.gate", ACTIVITY_DIM)),
            )
        } else {
            (None, None)
        };
        let (inst, clust) = flags.has_views();
        let width = layout.view_width();
        let no_context_inst = inst.then(|| store.add("attention.no_context_inst", Tensor::zeros(1, m)));
        let no_context_clust = clust.then(|| store.add("attention.no_context_clust", Tensor::zeros(1, m)));
        let proj_inst = inst.then(|| Dense::new(&mut store, "view.inst", width, config.fusion_dim, &mut stream("view.inst")));
        let proj_clust = clust.then(|| Dense::new(&mut store, "view.clust", width, config.fusion_dim, &mut stream("view.clust")));
        let view_gate = flags
            .has_hfa_gate()
            .then(|| gate(&mut store, "view.gate", 2 * ACTIVITY_DIM + CROSS_DIM));
        let ranker = Mlp::new(
            &mut store,
            "ranker",
            &[config.fusion_dim, config.ranker_hidden, 1],
            Activation::Relu,
            Activation::Identity,
            &mut stream("ranker"),
        );
        // Zero output layer: every prediction starts at 0.5.
        let out = *ranker.last();
        store.get_mut(out.w).value = Tensor::zeros(out.out_dim, out.in_dim);
        Ok(Self {
            config: config.clone(),
            flags,
            layout,
            store,
            users,
            items,
            user_gate,
            item_gate,
            no_context_inst,
            no_context_clust,
            proj_inst,
            proj_clust,
            view_gate,
            ranker,
        })
    }

    /// Hash of the parameter names and shapes.
    pub fn assembly_hash(&self) -> String {
        let shapes: Vec<(String, usize, usize)> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.rows, p.value.cols))
            .collect();
        sha256_hex(&serde_json::to_vec(&shapes).expect("shapes serialize"))[..16].to_string()
    }

    fn table(&self, kind: EntityKind) -> &DualEmbeddingTable {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    fn gate(&self, kind: EntityKind) -> Option<&Mlp> {
        match kind {
            EntityKind::User => self.user_gate.as_ref(),
            EntityKind::Item => self.item_gate.as_ref(),
        }
    }

    /// Fused embedding of one entity from current parameter values.
    pub fn fused_value(&self, corpus: &Corpus, kind: EntityKind, entity: u32) -> Vec<f64> {
        let t = self.table(kind);
        match (t.cluster_value(&self.store, entity), t.individual_value(&self.store, entity)) {
            (Some(c), Some(d)) => {
                let r = match self.gate(kind) {
                    Some(g) => {
                        let act = match kind {
                            EntityKind::User => corpus.user_act(entity),
                            EntityKind::Item => corpus.item_act(entity),
                        };
                        g.eval(&self.store, act)[0]
                    }
                    None => 0.5,
                };
                c.iter().zip(d).map(|(c, d)| r * c + (1.0 - r) * d).collect()
            }
            (Some(c), None) => c.to_vec(),
            (None, Some(d)) => d.to_vec(),
            (None, None) => unreachable!("validated: at least one table"),
        }
    }

    /// Cluster means of `H_u` and `H_i` at the current parameters, or `None`
    /// when the cluster view is disabled.
    pub fn cluster_cache(&self, corpus: &Corpus, epoch: usize) -> Result<Option<ClusterCache>> {
        if self.flags.no_cluster_view {
            return Ok(None);
        }
        let hu = (0..corpus.users.len() as u32)
            .map(|u| {
                let [p, s] = corpus.user_static(u);
                user_features(&self.layout, p, s, &self.fused_value(corpus, EntityKind::User, u))
            })
            .collect::<Result<Vec<_>>>()?;
        let hi = (0..corpus.items.len() as u32)
            .map(|i| {
                let [c, s] = corpus.item_static(i);
                item_features(&self.layout, c, s, &self.fused_value(corpus, EntityKind::Item, i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(ClusterCache {
            users: compute_cluster_means(&corpus.user_clusters, &hu, epoch)?,
            items: compute_cluster_means(&corpus.item_clusters, &hi, epoch)?,
        }))
    }

    fn embed(&self, g: &mut Graph, corpus: &Corpus, kind: EntityKind, entities: &[u32]) -> Result<Embedded> {
        let t = self.table(kind);
        let look = t.lookup_rows(g, &self.store, entities)?;
        let e = match (look.c, look.d) {
            (Some(c), Some(d)) => {
                let r = match self.gate(kind) {
                    Some(gate) => {
                        let mut data = Vec::with_capacity(entities.len() * ACTIVITY_DIM);
                        for &e in entities {
                            data.extend_from_slice(match kind {
                                EntityKind::User => corpus.user_act(e),
                                EntityKind::Item => corpus.item_act(e),
                            });
                        }
                        let act = g.constant(Tensor::new(entities.len(), ACTIVITY_DIM, data)?);
                        gate.forward_rows(g, &self.store, act)?
                    }
                    None => constant_column(g, entities.len(), 0.5),
                };
                mix(g, c, d, r)?
            }
            (Some(c), None) => c,
            (None, Some(d)) => d,
            (None, None) => unreachable!("validated: at least one table"),
        };
        Ok(Embedded {
            e,
            c: look.c,
            d: look.d,
        })
    }

    fn attend_or_default(&self, g: &mut Graph, mat: Var, slots: &[usize], target: Var, fallback: Var) -> Result<Var> {
        if slots.is_empty() {
            return Ok(fallback);
        }
        let seq = g.gather_rows(mat, slots)?;
        Ok(target_attention(g, seq, target, self.config.attention_scale)?.0)
    }

    /// Ranking logits (`n x 1`) for `events`. Returns the logits together
    /// with the fused item and user lookups used for the batch.
    fn forward(
        &self,
        g: &mut Graph,
        corpus: &Corpus,
        cache: Option<&ClusterCache>,
        events: &[InteractionEvent],
    ) -> Result<(Var, Vec<ItemId>, Embedded, Vec<UserId>, Embedded, Vec<usize>)> {
        if events.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let (want_inst, want_clust) = self.flags.has_views();
        if want_clust && cache.is_none() {
            return Err(Error::Config("cluster view needs a cluster cache".into()));
        }
        let mut item_slot = vec![usize::MAX; corpus.items.len()];
        let mut item_list: Vec<ItemId> = Vec::new();
        let mut slot_of = |i: ItemId, list: &mut Vec<ItemId>| -> usize {
            let s = &mut item_slot[i as usize];
            if *s == usize::MAX {
                *s = list.len();
                list.push(i);
            }
            *s
        };
        let mut user_slot = vec![usize::MAX; corpus.users.len()];
        let mut user_list: Vec<UserId> = Vec::new();

        struct Plan {
            user: usize,
            target: usize,
            hist: Vec<usize>,
            retrieved: Vec<usize>,
            cross: [f64; CROSS_DIM],
        }
        let mut plans = Vec::with_capacity(events.len());
        for ev in events {
            let (u, i) = (ev.user_id as usize, ev.item_id as usize);
            if u >= corpus.users.len() || i >= corpus.items.len() {
                return Err(Error::OutOfVocabulary(format!("event ({u}, {i}) outside the corpus")));
            }
            if user_slot[u] == usize::MAX {
                user_slot[u] = user_list.len();
                user_list.push(ev.user_id);
            }
            let target = slot_of(ev.item_id, &mut item_list);
            let top = corpus.item_top[i];
            let window = history_before(&corpus.users[u].history, ev.timestamp, self.config.seq_len);
            let matches = window.iter().filter(|&&(h, _)| corpus.item_top[h as usize] == top).count();
            let hist = if want_inst {
                window.iter().map(|&(h, _)| slot_of(h, &mut item_list)).collect()
            } else {
                Vec::new()
            };
            let ukey = &corpus.user_clusters.keys[u];
            let found = corpus.retrieval.hard_retrieve(ukey, top, ev.timestamp, self.config.cluster_seq_len);
            let cross = [
                (matches as f64).ln_1p() / (self.config.seq_len.max(1) as f64).ln_1p(),
                (found.len() as f64).ln_1p() / (self.config.cluster_seq_len.max(1) as f64).ln_1p(),
            ];
            let retrieved = if want_clust {
                found.iter().map(|&h| slot_of(h, &mut item_list)).collect()
            } else {
                Vec::new()
            };
            plans.push(Plan {
                user: user_slot[u],
                target,
                hist,
                retrieved,
                cross,
            });
        }

        let items = self.embed(g, corpus, EntityKind::Item, &item_list)?;
        let users = self.embed(g, corpus, EntityKind::User, &user_list)?;
        let n = events.len();
        let tslots: Vec<usize> = plans.iter().map(|p| p.target).collect();
        let uslots: Vec<usize> = plans.iter().map(|p| p.user).collect();

        let mut projected = Vec::new();
        if want_inst {
            let fallback = g.param(&self.store, self.no_context_inst.expect("instance view has a fallback"));
            let mut pooled = Vec::with_capacity(n);
            for p in &plans {
                let t = g.row(items.e, p.target)?;
                pooled.push(self.attend_or_default(g, items.e, &p.hist, t, fallback)?);
            }
            let s = g.stack_rows(&pooled)?;
            let (ufeat, ifeat) = static_blocks(corpus, events);
            let ufeat = g.constant(ufeat);
            let ifeat = g.constant(ifeat);
            let ue = g.gather_rows(users.e, &uslots)?;
            let ie = g.gather_rows(items.e, &tslots)?;
            let h = g.concat_cols(&[ufeat, ue, ifeat, ie, s])?;
            let proj = self.proj_inst.as_ref().expect("instance view has a projection");
            projected.push(proj.forward_rows(g, &self.store, h)?);
        }
        if want_clust {
            let cache = cache.expect("checked above");
            let fallback = g.param(&self.store, self.no_context_clust.expect("cluster view has a fallback"));
            let mut pooled = Vec::with_capacity(n);
            for p in &plans {
                let t = g.row(items.e, p.target)?;
                pooled.push(self.attend_or_default(g, items.e, &p.retrieved, t, fallback)?);
            }
            let s = g.stack_rows(&pooled)?;
            let width = self.layout.user_width() + self.layout.item_width();
            let mut data = Vec::with_capacity(n * width);
            for ev in events {
                data.extend_from_slice(cache.users.get(&corpus.user_clusters.keys[ev.user_id as usize])?);
                data.extend_from_slice(cache.items.get(&corpus.item_clusters.keys[ev.item_id as usize])?);
            }
            let means = g.constant(Tensor::new(n, width, data)?);
            let h = g.concat_cols(&[means, s])?;
            let proj = self.proj_clust.as_ref().expect("cluster view has a projection");
            projected.push(proj.forward_rows(g, &self.store, h)?);
        }
        let f = match projected.as_slice() {
            [only] => *only,
            [inst, clust] => {
                let alpha = match &self.view_gate {
                    Some(gate) => {
                        let mut data = Vec::with_capacity(n * (2 * ACTIVITY_DIM + CROSS_DIM));
                        for (ev, p) in events.iter().zip(&plans) {
                            data.extend_from_slice(corpus.user_act(ev.user_id));
                            data.extend_from_slice(corpus.item_act(ev.item_id));
                            data.extend_from_slice(&p.cross);
                        }
                        let act = g.constant(Tensor::new(n, 2 * ACTIVITY_DIM + CROSS_DIM, data)?);
                        gate.forward_rows(g, &self.store, act)?
                    }
                    None => constant_column(g, n, 0.5),
                };
                fuse_views(g, *inst, *clust, alpha)?
            }
            _ => unreachable!("validated: at least one view"),
        };
        let logits = self.ranker.forward_rows(g, &self.store, f)?;
        Ok((logits, item_list, items, user_list, users, tslots))
    }

    /// Click probabilities for `events`.
    pub fn predict(&self, corpus: &Corpus, cache: Option<&ClusterCache>, events: &[InteractionEvent]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (logits, ..) = self.forward(&mut g, corpus, cache, events)?;
        Ok(g.data(logits).iter().map(|&z| crate::autograd::sigmoid(z)).collect())
    }

    /// `L_main + L_trans + lambda_ortho * L_ortho` over a batch. Pair
    /// sampling draws from `rng`.
    pub fn loss<R: Rng>(
        &self,
        g: &mut Graph,
        corpus: &Corpus,
        cache: Option<&ClusterCache>,
        events: &[InteractionEvent],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<LossGraph> {
        let (logits, item_list, items, user_list, users, tslots) = self.forward(g, corpus, cache, events)?;
        let mut bce = Vec::with_capacity(events.len());
        for (k, ev) in events.iter().enumerate() {
            let z = g.row(logits, k)?;
            bce.push(g.bce_with_logits(z, f64::from(ev.label))?);
        }
        let all = g.concat(&bce)?;
        let main = g.mean(all);
        let mut terms = LossTerms {
            main: g.scalar(main),
            ..LossTerms::default()
        };

        let mut unique_targets: Vec<usize> = tslots.clone();
        unique_targets.sort_unstable();
        unique_targets.dedup();
        let target_items: Vec<ItemId> = unique_targets.iter().map(|&s| item_list[s]).collect();

        let mut transfer = None;
        let mut transfer_rows = Vec::new();
        let tcfg = &weights.transfer;
        if tcfg.enabled() && self.flags.has_cluster() {
            let mut parts = Vec::new();
            let kinds = [
                (EntityKind::User, tcfg.users, user_list.clone()),
                (EntityKind::Item, tcfg.items, target_items.clone()),
            ];
            for (kind, on, mut entities) in kinds {
                if !on {
                    continue;
                }
                entities.sort_unstable();
                let (ids, tail, pairs_idx) = match kind {
                    EntityKind::User => (&corpus.user_ids, &corpus.user_tail, &corpus.user_pairs),
                    EntityKind::Item => (&corpus.item_ids, &corpus.item_tail, &corpus.item_pairs),
                };
                let pairs = pairs_idx.mine(&entities, ids, tail, rng);
                if pairs.is_empty() {
                    continue;
                }
                let mut list = entities.clone();
                for &(h, _) in &pairs {
                    if list.binary_search(&h).is_err() {
                        let at = list.partition_point(|&x| x < h);
                        list.insert(at, h);
                    }
                }
                let table = self.table(kind);
                let rows = list.iter().map(|&e| table.cluster_of(e)).collect::<Result<Vec<_>>>()?;
                let c = g.param_rows(&self.store, table.cluster.expect("has cluster table"), &rows)?;
                let entries: Vec<TransferEntry> = list
                    .iter()
                    .zip(&rows)
                    .map(|(&e, &r)| TransferEntry {
                        head: !tail[e as usize],
                        cluster: r,
                    })
                    .collect();
                let pos = |e: u32| list.binary_search(&e).expect("listed");
                let idx: Vec<(usize, usize)> = pairs.iter().map(|&(h, t)| (pos(h), pos(t))).collect();
                let out = transfer_loss(g, c, &entries, &idx, tcfg)?;
                terms.pairs += out.pairs;
                parts.push(out.loss);
                transfer_rows.push((kind, c, entries.iter().map(|e| e.head).collect()));
            }
            transfer = match parts.as_slice() {
                [] => None,
                [a] => Some(*a),
                [a, b] => Some(g.add(*a, *b)?),
                _ => unreachable!("two kinds at most"),
            };
        }

        let mut ortho = None;
        if weights.lambda_ortho > 0.0 {
            let mut vals = Vec::new();
            if let (Some(c), Some(d)) = (users.c, users.d) {
                let (o, used) = ortho_rows(g, c, d)?;
                if used > 0 {
                    vals.push(o);
                }
            }
            if let (Some(c), Some(d)) = (items.c, items.d) {
                let c = g.gather_rows(c, &unique_targets)?;
                let d = g.gather_rows(d, &unique_targets)?;
                let (o, used) = ortho_rows(g, c, d)?;
                if used > 0 {
                    vals.push(o);
                }
            }
            ortho = match vals.as_slice() {
                [] => None,
                [a] => Some(*a),
                [a, b] => {
                    let s = g.add(*a, *b)?;
                    Some(g.scale(s, 0.5))
                }
                _ => unreachable!("two kinds at most"),
            };
        }

        let mut total = main;
        if let Some(t) = transfer {
            terms.transfer = g.scalar(t);
            total = g.add(total, t)?;
        }
        if let Some(o) = ortho {
            terms.ortho = g.scalar(o);
            let w = g.scale(o, weights.lambda_ortho);
            total = g.add(total, w)?;
        }
        terms.total = g.scalar(total);
        Ok(LossGraph {
            total,
            main,
            transfer,
            ortho,
            terms,
            transfer_rows,
        })
    }
}

fn static_blocks(corpus: &Corpus, events: &[InteractionEvent]) -> (Tensor, Tensor) {
    let mut u = Vec::new();
    let mut i = Vec::new();
    for ev in events {
        for part in corpus.user_static(ev.user_id) {
            u.extend_from_slice(part);
        }
        for part in corpus.item_static(ev.item_id) {
            i.extend_from_slice(part);
        }
    }
    let n = events.len();
    let (uw, iw) = (u.len() / n, i.len() / n);
    (
        Tensor {
            rows: n,
            cols: uw,
            data: u,
        },
        Tensor {
            rows: n,
            cols: iw,
            data: i,
        },
    )
}
