//! Ranking metrics, head/tail slices, ablation deltas and cluster
//! diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rqvae::{build_cluster_index, purity, shuffled_purity, SemanticId};
use crate::seed::rng_for;
use crate::synth::{ItemId, UserId};

pub const HEAD_DEFINITION: &str = "head = head user and head item";
pub const TAIL_DEFINITION: &str = "tail = tail user or tail item (long-tail sample)";
pub const GAUC_WEIGHTING: &str = "impressions per user; single-class users excluded";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub score: f64,
    pub label: u8,
    pub user_tail: bool,
    pub item_tail: bool,
}

impl ScoredSample {
    pub fn long_tail(&self) -> bool {
        self.user_tail || self.item_tail
    }

    pub fn head(&self) -> bool {
        !self.long_tail()
    }
}

/// Pair counts behind an AUC: positive-over-negative wins and ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AucCounts {
    pub wins: u128,
    pub ties: u128,
    pub positives: u128,
    pub negatives: u128,
}

impl AucCounts {
    pub fn value(&self) -> Result<f64> {
        if self.positives == 0 || self.negatives == 0 {
            return Err(Error::UndefinedMetric(format!(
                "auc needs both classes ({} positives, {} negatives)",
                self.positives, self.negatives
            )));
        }
        Ok((2 * self.wins + self.ties) as f64 / (2 * self.positives * self.negatives) as f64)
    }
}

/// Mann-Whitney pair counts from a sort by score; tied scores form one
/// group whose cross-class pairs count as ties.
pub fn auc_counts(scores: &[f64], labels: &[u8]) -> AucCounts {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut c = AucCounts::default();
    let mut neg_below: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        let (mut p, mut n) = (0u128, 0u128);
        while end < order.len() && scores[order[end]].total_cmp(&scores[order[k]]).is_eq() {
            if labels[order[end]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            end += 1;
        }
        c.wins += p * neg_below;
        c.ties += p * n;
        c.positives += p;
        c.negatives += n;
        neg_below += n;
        k = end;
    }
    c
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            lhs: format!("{} scores", scores.len()),
            rhs: format!("{} labels", labels.len()),
        });
    }
    auc_counts(scores, labels).value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaucResult {
    pub value: f64,
    pub groups_used: usize,
    pub groups_excluded: usize,
    pub samples_used: usize,
}

/// Impression-weighted mean of per-user AUC over users with both classes.
pub fn gauc(samples: &[ScoredSample]) -> Result<GaucResult> {
    let mut groups: BTreeMap<UserId, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for s in samples {
        let g = groups.entry(s.user_id).or_default();
        g.0.push(s.score);
        g.1.push(s.label);
    }
    let (mut num, mut den) = (0.0, 0usize);
    let (mut used, mut excluded) = (0, 0);
    for (scores, labels) in groups.values() {
        match auc(scores, labels) {
            Ok(a) => {
                num += a * scores.len() as f64;
                den += scores.len();
                used += 1;
            }
            Err(_) => excluded += 1,
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("gauc: no user has both classes".into()));
    }
    Ok(GaucResult {
        value: num / den as f64,
        groups_used: used,
        groups_excluded: excluded,
        samples_used: den,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub samples: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub gauc_groups: usize,
    pub gauc_groups_excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined: Option<String>,
}

pub fn slice_metrics(samples: &[ScoredSample]) -> SliceMetrics {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let mut notes = Vec::new();
    let a = auc(&scores, &labels).map_err(|e| notes.push(format!("auc: {e}"))).ok();
    let g = gauc(samples).map_err(|e| notes.push(format!("gauc: {e}"))).ok();
    SliceMetrics {
        samples: samples.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
        auc: a,
        gauc: g.as_ref().map(|g| g.value),
        gauc_groups: g.as_ref().map_or(0, |g| g.groups_used),
        gauc_groups_excluded: g.as_ref().map_or(0, |g| g.groups_excluded),
        undefined: (!notes.is_empty()).then(|| notes.join("; ")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slice {
    Total,
    Head,
    Tail,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Total, Slice::Head, Slice::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Total => "Total",
            Slice::Head => "Head",
            Slice::Tail => "Tail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    /// Hash of everything except the ablation switches; runs are compared
    /// only when these agree.
    pub comparability_hash: String,
    pub head_definition: String,
    pub tail_definition: String,
    pub gauc_weighting: String,
    pub total: SliceMetrics,
    pub head: SliceMetrics,
    pub tail: SliceMetrics,
}

impl MetricReport {
    pub fn slice(&self, s: Slice) -> &SliceMetrics {
        match s {
            Slice::Total => &self.total,
            Slice::Head => &self.head,
            Slice::Tail => &self.tail,
        }
    }
}

pub fn slice_report(samples: &[ScoredSample], config_hash: &str, comparability_hash: &str) -> MetricReport {
    let head: Vec<ScoredSample> = samples.iter().filter(|s| s.head()).copied().collect();
    let tail: Vec<ScoredSample> = samples.iter().filter(|s| s.long_tail()).copied().collect();
    MetricReport {
        config_hash: config_hash.to_string(),
        comparability_hash: comparability_hash.to_string(),
        head_definition: HEAD_DEFINITION.into(),
        tail_definition: TAIL_DEFINITION.into(),
        gauc_weighting: GAUC_WEIGHTING.into(),
        total: slice_metrics(samples),
        head: slice_metrics(&head),
        tail: slice_metrics(&tail),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"))
}

/// Fixed-width `Total / Head / Tail x AUC / GAUC` table.
pub fn format_report(report: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", "slice", "samples", "AUC", "GAUC");
    for sl in Slice::ALL {
        let m = report.slice(sl);
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", sl.name(), m.samples, cell(m.auc), cell(m.gauc));
    }
    let _ = writeln!(s, "# {}; {}", report.head_definition, report.tail_definition);
    s
}

const SCORES_HEADER: &str = "user_id\titem_id\tscore\tlabel\tflags";

fn flags(s: &ScoredSample) -> String {
    let mut f = Vec::new();
    if s.user_tail {
        f.push("user_tail");
    }
    if s.item_tail {
        f.push("item_tail");
    }
    if s.long_tail() {
        f.push("long_tail");
    }
    if f.is_empty() {
        "-".into()
    } else {
        f.join(",")
    }
}

pub fn write_scores(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "{SCORES_HEADER}").map_err(io)?;
    for s in samples {
        // `{:?}` prints the shortest string that parses back to the same f64.
        writeln!(w, "{}\t{}\t{:?}\t{}\t{}", s.user_id, s.item_id, s.score, s.label, flags(s)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, what: &str| Error::Ingest(format!("{}:{n}: {what}", path.display()));
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 {
            if line != SCORES_HEADER {
                return Err(bad(1, "expected scores header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(idx + 1, "expected 5 fields"));
        }
        let flag_set: Vec<&str> = f[4].split(',').collect();
        out.push(ScoredSample {
            user_id: f[0].parse().map_err(|_| bad(idx + 1, "bad user_id"))?,
            item_id: f[1].parse().map_err(|_| bad(idx + 1, "bad item_id"))?,
            score: f[2].parse().map_err(|_| bad(idx + 1, "bad score"))?,
            label: f[3].parse().map_err(|_| bad(idx + 1, "bad label"))?,
            user_tail: flag_set.contains(&"user_tail"),
            item_tail: flag_set.contains(&"item_tail"),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Percent change `(ablated - full) / full * 100` per slice and metric;
    /// `None` when either side is undefined.
    pub auc: BTreeMap<Slice, Option<f64>>,
    pub gauc: BTreeMap<Slice, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: String,
    pub baseline_metrics: MetricReport,
    pub rows: Vec<AblationRow>,
}

pub fn percent_delta(full: Option<f64>, ablated: Option<f64>) -> Option<f64> {
    match (full, ablated) {
        (Some(f), Some(a)) if f != 0.0 => Some((a - f) / f * 100.0),
        _ => None,
    }
}

pub fn ablation_report(
    baseline: (&str, &MetricReport),
    runs: &[(String, MetricReport)],
) -> Result<AblationReport> {
    let (name, full) = baseline;
    let mut rows = Vec::with_capacity(runs.len());
    for (variant, r) in runs {
        if r.comparability_hash != full.comparability_hash {
            return Err(Error::Comparability(format!(
                "{variant} ({}) vs {name} ({})",
                r.comparability_hash, full.comparability_hash
            )));
        }
        let mut auc = BTreeMap::new();
        let mut gauc = BTreeMap::new();
        for sl in Slice::ALL {
            auc.insert(sl, percent_delta(full.slice(sl).auc, r.slice(sl).auc));
            gauc.insert(sl, percent_delta(full.slice(sl).gauc, r.slice(sl).gauc));
        }
        rows.push(AblationRow {
            variant: variant.clone(),
            auc,
            gauc,
        });
    }
    Ok(AblationReport {
        baseline: name.to_string(),
        baseline_metrics: full.clone(),
        rows,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:+.2}%"))
}

pub fn format_ablation(report: &AblationReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<24}", "variant");
    for sl in Slice::ALL {
        let _ = write!(s, "{:>12}{:>12}", format!("{} AUC", sl.name()), format!("{} GAUC", sl.name()));
    }
    s.push('\n');
    let _ = write!(s, "{:<24}", report.baseline);
    for sl in Slice::ALL {
        let m = report.baseline_metrics.slice(sl);
        let _ = write!(s, "{:>12}{:>12}", cell(m.auc), cell(m.gauc));
    }
    s.push('\n');
    for row in &report.rows {
        let _ = write!(s, "{:<24}", row.variant);
        for sl in Slice::ALL {
            let _ = write!(s, "{:>12}{:>12}", pct(row.auc[&sl]), pct(row.gauc[&sl]));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPoint {
    /// Upper edge of the latent-distance bucket.
    pub max_distance: f64,
    /// Mean shared-prefix length over the ID length.
    pub prefix_agreement: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub level: usize,
    pub purity: f64,
    pub shuffled_purity: f64,
    pub curve: Vec<AgreementPoint>,
}

pub fn shared_prefix(a: &[u16], b: &[u16]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Purity of the `level` partition against categories, the same after a
/// label shuffle, and prefix agreement of random entity pairs bucketed into
/// `buckets` latent-distance quantiles.
pub fn cluster_quality(
    ids: &[SemanticId],
    level: usize,
    categories: &[u32],
    latents: &[Vec<f64>],
    pairs: usize,
    buckets: usize,
    seed: u64,
) -> Result<ClusterQuality> {
    let index = build_cluster_index(ids, level)?;
    if categories.len() != ids.len() || latents.len() != ids.len() {
        return Err(Error::Dimension {
            lhs: format!("{} ids", ids.len()),
            rhs: format!("{} categories / {} latents", categories.len(), latents.len()),
        });
    }
    let n = ids.len();
    let full = ids.first().map_or(1, Vec::len).max(1);
    let mut rng = rng_for(seed, "cluster-quality");
    let mut sample: Vec<(f64, f64)> = (0..pairs)
        .filter_map(|_| {
            if n < 2 {
                return None;
            }
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let d: f64 = latents[a]
                .iter()
                .zip(&latents[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            Some((d, shared_prefix(&ids[a], &ids[b]) as f64 / full as f64))
        })
        .collect();
    sample.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let buckets = buckets.max(1);
    let mut curve = Vec::new();
    if !sample.is_empty() {
        let per = sample.len().div_ceil(buckets);
        for chunk in sample.chunks(per) {
            curve.push(AgreementPoint {
                max_distance: chunk.last().expect("non-empty chunk").0,
                prefix_agreement: chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64,
                pairs: chunk.len(),
            });
        }
    }
    Ok(ClusterQuality {
        level,
        purity: purity(&index, categories),
        shuffled_purity: shuffled_purity(&index, categories, 5, seed),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(user: u32, score: f64, label: u8) -> ScoredSample {
        ScoredSample {
            user_id: user,
            item_id: 0,
            score,
            label,
            user_tail: false,
            item_tail: false,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.2, 0.4], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn gauc_examples() {
        let mut v = vec![s(1, 0.9, 1), s(1, 0.1, 0)];
        let one = gauc(&v).unwrap();
        assert_eq!(one.value, 1.0);
        v.extend([s(2, 0.5, 1), s(2, 0.5, 0), s(2, 0.5, 1), s(2, 0.5, 0), s(2, 0.5, 0), s(2, 0.5, 1)]);
        v.push(s(3, 0.7, 1));
        let r = gauc(&v).unwrap();
        assert!((r.value - 0.625).abs() < 1e-12);
        assert_eq!((r.groups_used, r.groups_excluded), (2, 1));
        assert!(matches!(gauc(&[s(1, 0.2, 1), s(2, 0.3, 0)]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn slices_are_disjoint_and_undefined_is_reported() {
        let mut v = vec![s(1, 0.9, 1), s(1, 0.1, 0)];
        let r = slice_report(&v, "h", "c");
        assert_eq!(r.tail.samples, 0);
        assert!(r.tail.auc.is_none() && r.tail.undefined.is_some());
        v.push(ScoredSample {
            user_tail: true,
            ..s(2, 0.3, 1)
        });
        v.push(ScoredSample {
            item_tail: true,
            ..s(2, 0.2, 0)
        });
        let r = slice_report(&v, "h", "c");
        assert_eq!(r.head.samples + r.tail.samples, r.total.samples);
        assert_eq!(r.tail.auc, Some(1.0));
        assert!(format_report(&r).contains("Tail"));
    }

    #[test]
    fn ablation_deltas() {
        let v = vec![s(1, 0.9, 1), s(1, 0.1, 0), s(1, 0.5, 0)];
        let full = slice_report(&v, "a", "c");
        let same = ablation_report(("full", &full), &[("copy".into(), full.clone())]).unwrap();
        assert!(same.rows[0].auc.values().all(|d| d.is_none_or(|x| x == 0.0)));
        assert_eq!(same.rows[0].auc[&Slice::Total], Some(0.0));
        let worse = slice_report(&[s(1, 0.9, 1), s(1, 0.95, 0), s(1, 0.5, 0)], "b", "c");
        let r = ablation_report(("full", &full), &[("w/o x".into(), worse.clone())]).unwrap();
        assert!((r.rows[0].auc[&Slice::Total].unwrap() - (0.5 - 1.0) / 1.0 * 100.0).abs() < 1e-12);
        assert!(format_ablation(&r).contains("-50.00%"));
        let other = slice_report(&v, "a", "different");
        assert!(matches!(
            ablation_report(("full", &full), &[("x".into(), other)]),
            Err(Error::Comparability(_))
        ));
    }

    #[test]
    fn scores_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.tsv");
        let v = vec![
            s(1, 0.1 + 0.2, 1),
            ScoredSample {
                user_tail: true,
                item_tail: true,
                ..s(4, 1e-17, 0)
            },
        ];
        write_scores(&p, &v).unwrap();
        assert_eq!(read_scores(&p).unwrap(), v);
    }

    #[test]
    fn cluster_quality_examples() {
        let ids: Vec<SemanticId> = (0..6).map(|i| vec![i, 0]).collect();
        let cats = vec![0, 1, 0, 1, 2, 2];
        let lat: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let q = cluster_quality(&ids, 2, &cats, &lat, 50, 3, 0).unwrap();
        assert_eq!(q.purity, 1.0);

        let ids: Vec<SemanticId> = vec![vec![3, 1]; 4];
        let lat = vec![vec![0.5, 0.5]; 4];
        let q = cluster_quality(&ids, 2, &[0, 0, 1, 1], &lat, 40, 2, 0).unwrap();
        assert!(q.curve.iter().all(|p| p.prefix_agreement == 1.0));
    }
}
