//! Dual embeddings: a cluster row shared by every entity with the same full
//! semantic ID, and an individual row per entity, fused by an activity gate.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{info_nce_term, EntityKind};
use crate::autograd::{norm, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rqvae::SemanticId;
use crate::seed::{gauss, rng_for};

/// Norm guard of the orthogonality term.
pub const ORTHO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEmbeddingTable {
    pub kind: EntityKind,
    pub dim: usize,
    pub cluster: Option<ParamId>,
    pub individual: Option<ParamId>,
    /// Cluster row of every entity.
    pub cluster_row: Vec<usize>,
    /// Full semantic ID of every cluster row.
    pub cluster_keys: Vec<SemanticId>,
}

/// Rows returned by a lookup; `None` when the table was removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualLookup {
    pub c: Option<Var>,
    pub d: Option<Var>,
}

impl DualEmbeddingTable {
    /// Rows are drawn from `N(0, init_std^2)`, each table from its own
    /// stream of `seed`, so dropping one table leaves the other unchanged.
    pub fn new(
        store: &mut ParamStore,
        kind: EntityKind,
        ids: &[SemanticId],
        dim: usize,
        init_std: f64,
        with_cluster: bool,
        with_individual: bool,
        seed: u64,
    ) -> Result<Self> {
        if !with_cluster && !with_individual {
            return Err(Error::Config("a dual embedding table needs at least one of its tables".into()));
        }
        let mut rows: BTreeMap<&SemanticId, usize> = BTreeMap::new();
        for id in ids {
            let next = rows.len();
            rows.entry(id).or_insert(next);
        }
        // Renumber in key order so row indices do not depend on entity order.
        let cluster_keys: Vec<SemanticId> = rows.keys().map(|k| (*k).clone()).collect();
        let ordinal: BTreeMap<&SemanticId, usize> = cluster_keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let cluster_row = ids.iter().map(|id| ordinal[id]).collect();
        let init = |store: &mut ParamStore, name: String, n: usize| {
            let mut rng = rng_for(seed, &name);
            let data = (0..n * dim).map(|_| init_std * gauss(&mut rng)).collect();
            store.add(name, Tensor { rows: n, cols: dim, data })
        };
        let cluster = with_cluster.then(|| init(store, format!("{kind}.cluster_emb"), cluster_keys.len()));
        let individual = with_individual.then(|| init(store, format!("{kind}.individual_emb"), ids.len()));
        Ok(Self {
            kind,
            dim,
            cluster,
            individual,
            cluster_row,
            cluster_keys,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.cluster_row.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_keys.len()
    }

    pub fn cluster_of(&self, entity: u32) -> Result<usize> {
        self.cluster_row
            .get(entity as usize)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(format!("{} {entity} is not in the embedding table", self.kind)))
    }

    /// Trainable rows for a list of entities, one row per entry.
    pub fn lookup_rows(&self, g: &mut Graph, store: &ParamStore, entities: &[u32]) -> Result<DualLookup> {
        let crow = entities.iter().map(|&e| self.cluster_of(e)).collect::<Result<Vec<_>>>()?;
        let c = match self.cluster {
            Some(p) => Some(g.param_rows(store, p, &crow)?),
            None => None,
        };
        let d = match self.individual {
            Some(p) => {
                let rows: Vec<usize> = entities.iter().map(|&e| e as usize).collect();
                Some(g.param_rows(store, p, &rows)?)
            }
            None => None,
        };
        Ok(DualLookup { c, d })
    }

    pub fn lookup_dual(&self, g: &mut Graph, store: &ParamStore, entity: u32) -> Result<DualLookup> {
        self.lookup_rows(g, store, &[entity])
    }

    pub fn cluster_value<'a>(&self, store: &'a ParamStore, entity: u32) -> Option<&'a [f64]> {
        let p = self.cluster?;
        Some(store.value(p).row(self.cluster_row[entity as usize]))
    }

    pub fn individual_value<'a>(&self, store: &'a ParamStore, entity: u32) -> Option<&'a [f64]> {
        let p = self.individual?;
        Some(store.value(p).row(entity as usize))
    }
}

/// `e = r*c + (1-r)*d` row by row; `r` is `n x 1`.
pub fn mix(g: &mut Graph, c: Var, d: Var, r: Var) -> Result<Var> {
    let a = g.mul_rows(c, r)?;
    let s = g.one_minus(r);
    let b = g.mul_rows(d, s)?;
    g.add(a, b)
}

/// Activity-gated fusion: `r = gate(f_act)` in (0, 1), `e = r*c + (1-r)*d`.
pub fn gate_fuse(g: &mut Graph, store: &ParamStore, gate: &Mlp, c: Var, d: Var, act: Var) -> Result<(Var, Var)> {
    if g.data(act).iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite activity features".into()));
    }
    let r = gate.forward_rows(g, store, act)?;
    let e = mix(g, c, d, r)?;
    Ok((e, r))
}

/// `cos(c, d)^2`; zero with the degenerate flag set when either norm is
/// below [`ORTHO_EPS`].
pub fn ortho_loss(g: &mut Graph, c: Var, d: Var) -> Result<(Var, bool)> {
    if norm(g.data(c)) < ORTHO_EPS || norm(g.data(d)) < ORTHO_EPS {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let cos = g.cosine_similarity(c, d)?;
    Ok((g.square(cos), false))
}

/// Mean of `cos(c_r, d_r)^2` over the rows of two `n x m` matrices, skipping
/// degenerate rows. Returns the loss and the number of rows used.
pub fn ortho_rows(g: &mut Graph, c: Var, d: Var) -> Result<(Var, usize)> {
    let (tc, td) = (g.value(c), g.value(d));
    let keep: Vec<usize> = (0..tc.rows)
        .filter(|&r| norm(tc.row(r)) >= ORTHO_EPS && norm(td.row(r)) >= ORTHO_EPS)
        .collect();
    if keep.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let (c, d) = if keep.len() == tc.rows {
        (c, d)
    } else {
        (g.gather_rows(c, &keep)?, g.gather_rows(d, &keep)?)
    };
    let cn = g.normalize_rows(c)?;
    let dn = g.normalize_rows(d)?;
    let cos = g.row_dot(cn, dn)?;
    let sq = g.square(cos);
    Ok((g.mean(sq), keep.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Weight of the head-anchored term.
    pub lambda_head: f64,
    /// Weight of the tail-anchored term.
    pub lambda_tail: f64,
    pub temperature: f64,
    pub users: bool,
    pub items: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            lambda_head: 0.1,
            lambda_tail: 1.0,
            temperature: 0.1,
            users: true,
            items: true,
        }
    }
}

impl TransferConfig {
    pub fn enabled(&self) -> bool {
        self.lambda_head > 0.0 || self.lambda_tail > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferEntry {
    pub head: bool,
    pub cluster: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TransferOutput {
    pub loss: Var,
    pub pairs: usize,
}

/// Asymmetric contrastive transfer over cluster rows `c_rows` (one row per
/// entry). For each `(head, tail)` pair of entry indices:
///
/// `lambda_head * L(c_head, sg(c_tail)) + lambda_tail * L(c_tail, sg(c_head))`
///
/// averaged over pairs, with cosine similarity. Negatives are the stopped
/// rows of other clusters in the batch, one per cluster. A term with zero
/// weight is not built at all, so its anchors get exactly zero gradient.
pub fn transfer_loss(
    g: &mut Graph,
    c_rows: Var,
    entries: &[TransferEntry],
    pairs: &[(usize, usize)],
    cfg: &TransferConfig,
) -> Result<TransferOutput> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("transfer temperature must be > 0, got {}", cfg.temperature)));
    }
    if g.value(c_rows).rows != entries.len() {
        return Err(Error::Dimension {
            lhs: format!("{} entries", entries.len()),
            rhs: format!("{} rows", g.value(c_rows).rows),
        });
    }
    if pairs.is_empty() || !cfg.enabled() {
        return Ok(TransferOutput {
            loss: g.constant(Tensor::scalar(0.0)),
            pairs: 0,
        });
    }
    let cn = g.normalize_rows(c_rows)?;
    let stopped = g.stop_gradient(cn);
    let mut pool: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        pool.entry(e.cluster).or_insert(i);
    }
    let mut head_terms = Vec::new();
    let mut tail_terms = Vec::new();
    for &(h, t) in pairs {
        let (ch, ct) = (entries[h].cluster, entries[t].cluster);
        let neg_idx: Vec<usize> = pool
            .iter()
            .filter(|(&cl, _)| cl != ch && cl != ct)
            .map(|(_, &i)| i)
            .collect();
        let negs = if neg_idx.is_empty() {
            None
        } else {
            Some(g.gather_rows(stopped, &neg_idx)?)
        };
        if cfg.lambda_head > 0.0 {
            let a = g.row(cn, h)?;
            let p = g.row(stopped, t)?;
            head_terms.push(info_nce_term(g, a, p, negs, cfg.temperature)?);
        }
        if cfg.lambda_tail > 0.0 {
            let a = g.row(cn, t)?;
            let p = g.row(stopped, h)?;
            tail_terms.push(info_nce_term(g, a, p, negs, cfg.temperature)?);
        }
    }
    let mut parts = Vec::new();
    for (terms, w) in [(head_terms, cfg.lambda_head), (tail_terms, cfg.lambda_tail)] {
        if terms.is_empty() {
            continue;
        }
        let v = g.concat(&terms)?;
        let m = g.mean(v);
        parts.push(g.scale(m, w));
    }
    let loss = match parts.as_slice() {
        [a] => *a,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!("at least one weight is positive"),
    };
    Ok(TransferOutput {
        loss,
        pairs: pairs.len(),
    })
}

/// Head entities per full semantic ID and per parent prefix, for pairing.
#[derive(Debug, Clone, Default)]
pub struct PairIndex {
    full: BTreeMap<SemanticId, Vec<u32>>,
    parent: BTreeMap<SemanticId, Vec<u32>>,
}

impl PairIndex {
    pub fn new(ids: &[SemanticId], tail: &[bool]) -> Self {
        let mut idx = Self::default();
        for (e, id) in ids.iter().enumerate() {
            if tail[e] {
                continue;
            }
            idx.full.entry(id.clone()).or_default().push(e as u32);
            if id.len() > 1 {
                idx.parent.entry(id[..id.len() - 1].to_vec()).or_default().push(e as u32);
            }
        }
        idx
    }

    /// Heads sharing the full ID of `id`, else its parent prefix, else none.
    pub fn candidates(&self, id: &SemanticId) -> &[u32] {
        if let Some(v) = self.full.get(id) {
            return v;
        }
        if id.len() > 1 {
            if let Some(v) = self.parent.get(&id[..id.len() - 1]) {
                return v;
            }
        }
        &[]
    }

    /// Pairs every tail entity in `entities` with a uniformly drawn head.
    pub fn mine<R: Rng>(&self, entities: &[u32], ids: &[SemanticId], tail: &[bool], rng: &mut R) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for &t in entities {
            if !tail[t as usize] {
                continue;
            }
            if let Some(&h) = self.candidates(&ids[t as usize]).choose(rng) {
                out.push((h, t));
            }
        }
        out
    }

    pub fn has_partner(&self, id: &SemanticId) -> bool {
        !self.candidates(id).is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(ids: &[SemanticId], std: f64) -> (ParamStore, DualEmbeddingTable) {
        let mut store = ParamStore::new();
        let t = DualEmbeddingTable::new(&mut store, EntityKind::Item, ids, 4, std, true, true, 7).unwrap();
        (store, t)
    }

    #[test]
    fn shared_cluster_rows_and_accumulation() {
        let ids: Vec<SemanticId> = vec![vec![0, 1], vec![0, 1], vec![2, 0]];
        let (mut store, t) = table(&ids, 0.1);
        assert_eq!(t.cluster_of(0).unwrap(), t.cluster_of(1).unwrap());
        assert_ne!(t.cluster_of(0).unwrap(), t.cluster_of(2).unwrap());
        assert_eq!(t.cluster_value(&store, 0), t.cluster_value(&store, 1));
        assert_ne!(t.individual_value(&store, 0), t.individual_value(&store, 1));
        assert!(matches!(t.lookup_dual(&mut Graph::new(), &store, 7), Err(Error::OutOfVocabulary(_))));

        store.zero_grad();
        let mut g = Graph::new();
        let a = t.lookup_dual(&mut g, &store, 0).unwrap();
        let b = t.lookup_dual(&mut g, &store, 0).unwrap();
        let s1 = g.sum(a.c.unwrap());
        let s2 = g.sum(b.c.unwrap());
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        g.accumulate_into(&mut store);
        let row = t.cluster_of(0).unwrap();
        let grad = store.grad(t.cluster.unwrap());
        assert_eq!(&grad[row * 4..row * 4 + 4], &[2.0; 4]);
    }

    #[test]
    fn zero_init_gives_zero_rows() {
        let (store, t) = table(&[vec![0], vec![1]], 0.0);
        assert_eq!(t.cluster_value(&store, 1).unwrap(), &[0.0; 4]);
        assert_eq!(t.individual_value(&store, 0).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn ortho_examples() {
        let cases = [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([1.0, 1.0], [1.0, 1.0], 1.0),
            ([1.0, 0.0], [1.0, 1.0], 0.5),
        ];
        for (c, d, want) in cases {
            let mut g = Graph::new();
            let (cv, dv) = (g.constant_vec(&c), g.constant_vec(&d));
            let (l, degenerate) = ortho_loss(&mut g, cv, dv).unwrap();
            assert!(!degenerate);
            assert!((g.scalar(l) - want).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (cv, dv) = (g.constant_vec(&[0.0, 0.0]), g.constant_vec(&[1.0, 0.0]));
        let (l, degenerate) = ortho_loss(&mut g, cv, dv).unwrap();
        assert!(degenerate);
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn ortho_rows_matches_single() {
        let c = vec![vec![1.0, 0.0], vec![0.3, 0.4], vec![0.0, 0.0]];
        let d = vec![vec![1.0, 1.0], vec![-2.0, 0.5], vec![1.0, 0.0]];
        let mut g = Graph::new();
        let cm = g.constant(Tensor::from_rows(&c).unwrap());
        let dm = g.constant(Tensor::from_rows(&d).unwrap());
        let (l, used) = ortho_rows(&mut g, cm, dm).unwrap();
        assert_eq!(used, 2);
        let mut want = 0.0;
        for k in 0..2 {
            let (cv, dv) = (g.constant_vec(&c[k]), g.constant_vec(&d[k]));
            let (o, _) = ortho_loss(&mut g, cv, dv).unwrap();
            want += g.scalar(o) / 2.0;
        }
        assert!((g.scalar(l) - want).abs() < 1e-15);
    }

    fn forced_gate(store: &mut ParamStore, bias: f64) -> Mlp {
        let layer = Dense::zeros(store, "gate", 3, 1);
        store.get_mut(layer.b).value.data[0] = bias;
        Mlp {
            layers: vec![layer],
            hidden: Activation::Identity,
            output: Activation::Sigmoid,
        }
    }

    #[test]
    fn gate_boundaries_and_midpoint() {
        for (bias, want) in [(800.0, [2.0, 0.0]), (-800.0, [0.0, 2.0]), (0.0, [1.0, 1.0])] {
            let mut store = ParamStore::new();
            let gate = forced_gate(&mut store, bias);
            let mut g = Graph::new();
            let c = g.constant_vec(&[2.0, 0.0]);
            let d = g.constant_vec(&[0.0, 2.0]);
            let act = g.constant_vec(&[0.1, 0.2, 0.3]);
            let (e, _) = gate_fuse(&mut g, &store, &gate, c, d, act).unwrap();
            assert_eq!(g.data(e), &want);
        }
        let mut store = ParamStore::new();
        let gate = forced_gate(&mut store, 0.0);
        let mut g = Graph::new();
        let c = g.constant_vec(&[2.0, 0.0]);
        let d = g.constant_vec(&[0.0, 2.0]);
        let act = g.constant_vec(&[f64::NAN, 0.0, 0.0]);
        assert!(matches!(gate_fuse(&mut g, &store, &gate, c, d, act), Err(Error::Domain(_))));
    }

    fn transfer_case(lh: f64, lt: f64) -> (f64, Vec<f64>) {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let entries = [
            TransferEntry { head: true, cluster: 0 },
            TransferEntry { head: false, cluster: 0 },
            TransferEntry { head: true, cluster: 1 },
        ];
        let mut g = Graph::new();
        let c = g.variable(Tensor::from_rows(&rows).unwrap());
        let cfg = TransferConfig {
            lambda_head: lh,
            lambda_tail: lt,
            temperature: 1.0,
            ..TransferConfig::default()
        };
        let out = transfer_loss(&mut g, c, &entries, &[(0, 1)], &cfg).unwrap();
        g.backward(out.loss).unwrap();
        (g.scalar(out.loss), g.grad(c))
    }

    #[test]
    fn transfer_hand_value() {
        let (l, _) = transfer_case(1.0, 1.0);
        let e = std::f64::consts::E;
        let want = 2.0 * -(e / (e + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn zero_weight_side_gets_zero_gradient() {
        let (_, grad) = transfer_case(0.0, 1.0);
        assert!(grad[0..2].iter().all(|v| v.to_bits() == 0), "{grad:?}");
        assert!(grad[2..4].iter().any(|&v| v != 0.0));
        let (_, grad) = transfer_case(1.0, 0.0);
        assert!(grad[2..4].iter().all(|v| v.to_bits() == 0));
        assert!(grad[0..2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn no_pairs_is_exact_zero() {
        let mut g = Graph::new();
        let c = g.variable(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let out = transfer_loss(
            &mut g,
            c,
            &[TransferEntry { head: true, cluster: 0 }],
            &[],
            &TransferConfig::default(),
        )
        .unwrap();
        assert_eq!(g.scalar(out.loss), 0.0);
        assert_eq!(out.pairs, 0);
    }

    #[test]
    fn pairing_prefers_full_id_then_parent() {
        let ids: Vec<SemanticId> = vec![vec![0, 0], vec![0, 0], vec![0, 1], vec![1, 1], vec![2, 2]];
        let tail = [false, true, true, true, true];
        let idx = PairIndex::new(&ids, &tail);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = idx.mine(&[1, 2, 3, 4, 0], &ids, &tail, &mut rng);
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);
    }
}
