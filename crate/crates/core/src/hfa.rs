//! Instance and cluster feature views, target attention, hard retrieval by
//! top-level item ID, and gated fusion of the two views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rqvae::{ClusterIndex, SemanticId};
use crate::seed::sha256_hex;
use crate::synth::{ItemId, Timestamp, UserId};

/// Softmax attention of `target` (`1 x m`) over the rows of `seq` (`n x m`).
/// Returns the pooled vector and the weights.
pub fn target_attention(g: &mut Graph, seq: Var, target: Var, scaled: bool) -> Result<(Var, Var)> {
    let (n, m) = g.value(seq).shape();
    if n == 0 {
        return Err(Error::Domain("attention over an empty sequence".into()));
    }
    if g.value(target).len() != m {
        return Err(Error::Dimension {
            lhs: format!("sequence width {m}"),
            rhs: format!("target length {}", g.value(target).len()),
        });
    }
    let mut logits = g.matvec(seq, target)?;
    if scaled {
        logits = g.scale(logits, 1.0 / (m as f64).sqrt());
    }
    let w = g.softmax(logits)?;
    let out = g.vecmat(w, seq)?;
    Ok((out, w))
}

/// Named slot widths of a feature vector, in concatenation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub version: u32,
    pub user: Vec<(String, usize)>,
    pub item: Vec<(String, usize)>,
    pub seq: usize,
}

pub const LAYOUT_VERSION: u32 = 1;

impl FeatureLayout {
    pub fn new(profile: usize, content: usize, stats: usize, emb: usize) -> Self {
        Self {
            version: LAYOUT_VERSION,
            user: vec![("user.profile".into(), profile), ("user.stats".into(), stats), ("user.emb".into(), emb)],
            item: vec![("item.content".into(), content), ("item.stats".into(), stats), ("item.emb".into(), emb)],
            seq: emb,
        }
    }

    pub fn user_width(&self) -> usize {
        self.user.iter().map(|s| s.1).sum()
    }

    pub fn item_width(&self) -> usize {
        self.item.iter().map(|s| s.1).sum()
    }

    /// Width of both views: `H_u`, `H_i` and one pooled sequence vector.
    pub fn view_width(&self) -> usize {
        self.user_width() + self.item_width() + self.seq
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("layout serializes"))[..16].to_string()
    }
}

fn check_slots(slots: &[(String, usize)], parts: &[&[f64]]) -> Result<()> {
    for ((name, w), p) in slots.iter().zip(parts) {
        if p.len() != *w {
            return Err(Error::Layout(format!("slot {name} expects width {w}, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Layout(format!("slot {name} has non-finite values")));
        }
    }
    Ok(())
}

/// `[profile; stats; emb]` for a user.
pub fn user_features(layout: &FeatureLayout, profile: &[f64], stats: &[f64], emb: &[f64]) -> Result<Vec<f64>> {
    check_slots(&layout.user, &[profile, stats, emb])?;
    Ok([profile, stats, emb].concat())
}

/// `[content; stats; emb]` for an item.
pub fn item_features(layout: &FeatureLayout, content: &[f64], stats: &[f64], emb: &[f64]) -> Result<Vec<f64>> {
    check_slots(&layout.item, &[content, stats, emb])?;
    Ok([content, stats, emb].concat())
}

/// `H_inst = [H_u; H_i; S]`.
pub fn build_instance_view(layout: &FeatureLayout, h_user: &[f64], h_item: &[f64], pooled: &[f64]) -> Result<Vec<f64>> {
    let slots = [
        ("H_u".to_string(), layout.user_width()),
        ("H_i".to_string(), layout.item_width()),
        ("S".to_string(), layout.seq),
    ];
    check_slots(&slots, &[h_user, h_item, pooled])?;
    Ok([h_user, h_item, pooled].concat())
}

/// Per-cluster feature means, stamped with the epoch they were taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeans {
    pub epoch: usize,
    #[serde(with = "pairs")]
    pub means: BTreeMap<SemanticId, Vec<f64>>,
}

/// JSON object keys must be strings, so maps keyed by semantic ID travel as
/// `[key, value]` lists.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::rqvae::SemanticId;

    pub fn serialize<S: Serializer>(map: &BTreeMap<SemanticId, Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<SemanticId, Vec<f64>>, D::Error> {
        Ok(Vec::<(SemanticId, Vec<f64>)>::deserialize(d)?.into_iter().collect())
    }
}

impl ClusterMeans {
    pub fn get(&self, key: &[u16]) -> Result<&[f64]> {
        self.means
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfVocabulary(format!("no cached mean for cluster {key:?}")))
    }
}

/// `H_G = sum(H_member) / |G|` for every cluster; members summed in id order.
pub fn compute_cluster_means(index: &ClusterIndex, features: &[Vec<f64>], epoch: usize) -> Result<ClusterMeans> {
    if features.len() != index.num_entities() {
        return Err(Error::Dimension {
            lhs: format!("{} entities", index.num_entities()),
            rhs: format!("{} feature rows", features.len()),
        });
    }
    let mut means = BTreeMap::new();
    for (key, members) in &index.clusters {
        let width = features[members[0] as usize].len();
        let mut acc = vec![0.0; width];
        for &m in members {
            for (a, v) in acc.iter_mut().zip(&features[m as usize]) {
                *a += v;
            }
        }
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        means.insert(key.clone(), acc);
    }
    Ok(ClusterMeans { epoch, means })
}

/// Clicks of `history` (sorted by time) strictly before `before`, the most
/// recent `cap` of them, oldest first.
pub fn history_before(history: &[(ItemId, Timestamp)], before: Timestamp, cap: usize) -> &[(ItemId, Timestamp)] {
    let end = history.partition_point(|&(_, t)| t < before);
    &history[end.saturating_sub(cap)..end]
}

/// Behaviors of every user cluster, bucketed by the top-level ID of the
/// clicked item and sorted by `(timestamp, user, item)`.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    buckets: BTreeMap<SemanticId, BTreeMap<u16, Vec<(Timestamp, UserId, ItemId)>>>,
}

impl RetrievalIndex {
    pub fn new(user_clusters: &ClusterIndex, histories: &[&[(ItemId, Timestamp)]], item_top: &[u16]) -> Result<Self> {
        let mut buckets: BTreeMap<SemanticId, BTreeMap<u16, Vec<(Timestamp, UserId, ItemId)>>> = BTreeMap::new();
        for (key, members) in &user_clusters.clusters {
            let per_top = buckets.entry(key.clone()).or_default();
            for &u in members {
                let hist = histories
                    .get(u as usize)
                    .ok_or_else(|| Error::OutOfVocabulary(format!("user {u} has no history")))?;
                for &(i, t) in hist.iter() {
                    let top = *item_top
                        .get(i as usize)
                        .ok_or_else(|| Error::OutOfVocabulary(format!("item {i} has no semantic id")))?;
                    per_top.entry(top).or_default().push((t, u, i));
                }
            }
            for v in per_top.values_mut() {
                v.sort_unstable();
            }
        }
        Ok(Self { buckets })
    }

    /// Behaviors of the cluster `user_cluster` on items whose top-level ID is
    /// `target_top`, strictly before `before`, most recent first, at most
    /// `cap`.
    pub fn hard_retrieve(&self, user_cluster: &[u16], target_top: u16, before: Timestamp, cap: usize) -> Vec<ItemId> {
        let Some(list) = self.buckets.get(user_cluster).and_then(|m| m.get(&target_top)) else {
            return Vec::new();
        };
        let end = list.partition_point(|&(t, _, _)| t < before);
        list[end.saturating_sub(cap)..end].iter().rev().map(|&(_, _, i)| i).collect()
    }
}

/// `f = alpha * clust + (1 - alpha) * inst`, row-wise; `alpha` is `n x 1`.
pub fn fuse_views(g: &mut Graph, inst: Var, clust: Var, alpha: Var) -> Result<Var> {
    if g.value(inst).shape() != g.value(clust).shape() {
        return Err(Error::Layout(format!(
            "projected views differ in shape: {:?} vs {:?}",
            g.value(inst).shape(),
            g.value(clust).shape()
        )));
    }
    crate::cgae::mix(g, clust, inst, alpha)
}

/// Constant `n x 1` column filled with `v`.
pub fn constant_column(g: &mut Graph, n: usize, v: f64) -> Var {
    g.constant(Tensor {
        rows: n,
        cols: 1,
        data: vec![v; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::nn::{Activation, Dense, Mlp};
    use crate::rqvae::build_cluster_index;
    use crate::autograd::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attend(seq: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(seq).unwrap());
        let t = g.constant_vec(target);
        let (out, _) = target_attention(&mut g, s, t, false).unwrap();
        g.data(out).to_vec()
    }

    #[test]
    fn attention_examples() {
        assert_eq!(attend(&[vec![0.3, -2.0]], &[5.0, 1.0]), vec![0.3, -2.0]);
        let out = attend(&[vec![0.0, 1.0], vec![0.0, 3.0]], &[1.0, 0.0]);
        assert_eq!(out, vec![0.0, 2.0]);
        let out = attend(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[10.0, 0.0]);
        let w = sigmoid(10.0);
        assert!((out[0] - w).abs() < 1e-15 && (out[0] - 1.0).abs() < 1e-3);
        assert!((out[1] - (1.0 - w)).abs() < 1e-15);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(0, 2));
        let t = g.constant_vec(&[1.0, 0.0]);
        assert!(target_attention(&mut g, s, t, false).is_err());
    }

    #[test]
    fn instance_view_layout() {
        let layout = FeatureLayout::new(2, 3, 1, 2);
        assert_eq!(layout.hash(), FeatureLayout::new(2, 3, 1, 2).hash());
        assert_ne!(layout.hash(), FeatureLayout::new(2, 3, 1, 3).hash());
        let hu = user_features(&layout, &[1.0, 2.0], &[3.0], &[4.0, 5.0]).unwrap();
        let hi = item_features(&layout, &[6.0, 7.0, 8.0], &[9.0], &[10.0, 11.0]).unwrap();
        let v = build_instance_view(&layout, &hu, &hi, &[12.0, 13.0]).unwrap();
        assert_eq!(v.len(), hu.len() + hi.len() + 2);
        assert_eq!(v, (1..=13).map(f64::from).collect::<Vec<_>>());
        let zeroed = user_features(&layout, &[1.0, 2.0], &[0.0], &[4.0, 5.0]).unwrap();
        let diff: Vec<usize> = (0..hu.len()).filter(|&k| hu[k] != zeroed[k]).collect();
        assert_eq!(diff, vec![2]);
        let err = item_features(&layout, &[6.0], &[9.0], &[10.0, 11.0]).unwrap_err();
        assert!(err.to_string().contains("item.content"));
    }

    #[test]
    fn cluster_means_examples() {
        let ids: Vec<SemanticId> = vec![vec![0], vec![1], vec![1], vec![2], vec![2], vec![2]];
        let feats = vec![
            vec![5.0, -1.0],
            vec![1.0, 1.0],
            vec![3.0, 3.0],
            vec![0.5, 0.25],
            vec![-2.0, 7.0],
            vec![4.0, 1.0],
        ];
        let idx = build_cluster_index(&ids, 1).unwrap();
        let m = compute_cluster_means(&idx, &feats, 3).unwrap();
        assert_eq!(m.get(&[0]).unwrap(), &[5.0, -1.0]);
        assert_eq!(m.get(&[1]).unwrap(), &[2.0, 2.0]);
        let mut grand = [0.0; 2];
        for (key, members) in &idx.clusters {
            for (g, v) in grand.iter_mut().zip(m.get(key).unwrap()) {
                *g += v * members.len() as f64 / feats.len() as f64;
            }
        }
        for k in 0..2 {
            let global: f64 = feats.iter().map(|f| f[k]).sum::<f64>() / feats.len() as f64;
            assert!((grand[k] - global).abs() < 1e-9);
        }
    }

    #[test]
    fn history_window() {
        let h = vec![(1, 10), (2, 20), (3, 30), (4, 40)];
        assert_eq!(history_before(&h, 30, 10), &h[..2]);
        assert_eq!(history_before(&h, 41, 2), &h[2..]);
        assert!(history_before(&h, 10, 5).is_empty());
    }

    fn brute_force(
        members: &[u32],
        histories: &[Vec<(ItemId, Timestamp)>],
        top: &[u16],
        target: u16,
        before: Timestamp,
        cap: usize,
    ) -> Vec<ItemId> {
        let mut all = Vec::new();
        for &u in members {
            for &(i, t) in &histories[u as usize] {
                if top[i as usize] == target && t < before {
                    all.push((t, u, i));
                }
            }
        }
        all.sort();
        all.reverse();
        all.truncate(cap);
        all.into_iter().map(|(_, _, i)| i).collect()
    }

    #[test]
    fn hard_retrieval_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let users = rng.random_range(1..40);
            let items = rng.random_range(1..60);
            let ids: Vec<SemanticId> = (0..users).map(|_| vec![rng.random_range(0..4u16)]).collect();
            let top: Vec<u16> = (0..items).map(|_| rng.random_range(0..5u16)).collect();
            let histories: Vec<Vec<(ItemId, Timestamp)>> = (0..users)
                .map(|_| {
                    let mut t = 0;
                    (0..rng.random_range(0..30))
                        .map(|_| {
                            t += rng.random_range(0..3);
                            (rng.random_range(0..items as u32), t)
                        })
                        .collect()
                })
                .collect();
            let idx = build_cluster_index(&ids, 1).unwrap();
            let refs: Vec<&[(ItemId, Timestamp)]> = histories.iter().map(Vec::as_slice).collect();
            let r = RetrievalIndex::new(&idx, &refs, &top).unwrap();
            for _ in 0..20 {
                let u = rng.random_range(0..users) as u32;
                let key = idx.key_of(u).unwrap();
                let target = rng.random_range(0..5u16);
                let before = rng.random_range(0..60);
                let cap = rng.random_range(1..8);
                assert_eq!(
                    r.hard_retrieve(key, target, before, cap),
                    brute_force(idx.members_of(u).unwrap(), &histories, &top, target, before, cap)
                );
            }
        }
    }

    #[test]
    fn retrieval_edge_cases() {
        let ids: Vec<SemanticId> = vec![vec![0], vec![0]];
        let histories = vec![vec![(0, 1), (1, 2), (0, 3)], vec![(0, 4), (0, 5)]];
        let top = vec![7, 8];
        let idx = build_cluster_index(&ids, 1).unwrap();
        let refs: Vec<&[(ItemId, Timestamp)]> = histories.iter().map(Vec::as_slice).collect();
        let r = RetrievalIndex::new(&idx, &refs, &top).unwrap();
        assert!(r.hard_retrieve(&[0], 9, 100, 10).is_empty());
        assert_eq!(r.hard_retrieve(&[0], 7, 100, 2), vec![0, 0]);
        assert_eq!(r.hard_retrieve(&[0], 7, 100, 10).len(), 4);
    }

    #[test]
    fn fusion_boundaries() {
        let mut g = Graph::new();
        let inst = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
        let clust = g.constant(Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap());
        for (a, want) in [(0.0, [2.0, 0.0]), (1.0, [0.0, 2.0]), (0.5, [1.0, 1.0])] {
            let alpha = constant_column(&mut g, 1, a);
            let f = fuse_views(&mut g, inst, clust, alpha).unwrap();
            assert_eq!(g.data(f), &want);
        }
        let wide = g.constant(Tensor::zeros(1, 3));
        let alpha = constant_column(&mut g, 1, 0.5);
        assert!(matches!(fuse_views(&mut g, inst, wide, alpha), Err(Error::Layout(_))));
    }

    #[test]
    fn zero_final_layer_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let hidden = Dense::new(&mut store, "rank.0", 4, 6, &mut rng);
        let out = Dense::zeros(&mut store, "rank.1", 6, 1);
        let ranker = Mlp {
            layers: vec![hidden, out],
            hidden: Activation::Relu,
            output: Activation::Identity,
        };
        for _ in 0..5 {
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = ranker.eval(&store, &f)[0];
            assert_eq!(sigmoid(z), 0.5);
            let mut g = Graph::new();
            let zv = g.constant_vec(&[z]);
            for y in [0.0, 1.0] {
                let l = g.bce_with_logits(zv, y).unwrap();
                assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }
}
