//! Line-oriented dataset files.
//!
//! * `*.jsonl`: first line `{"meta": {...}}`, then one JSON record per line.
//! * `events.tsv`: a `#meta` line, a column header, then
//!   `user_id<TAB>item_id<TAB>timestamp<TAB>label` rows.
//! * `*.json`: a single object with a top-level `meta` key.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{ActivityLabels, EntityActivity, InteractionEvent, ItemRecord, Timestamp, UserRecord};

pub const GENERATOR_VERSION: &str = concat!("tailshare-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: String,
    pub generator_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Meta {
    pub fn new(kind: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: Meta,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_jsonl<T: Serialize>(path: &Path, meta: &Meta, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &MetaLine { meta: meta.clone() })?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Meta, Vec<T>)> {
    let mut lines = open(path)?.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Ingest(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let meta: MetaLine = serde_json::from_str(&first)
        .map_err(|e| Error::Ingest(format!("{}: bad meta line: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), n + 2)))?,
        );
    }
    Ok((meta.meta, out))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = open(path)?;
    serde_json::from_reader(r).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

pub const EVENTS_HEADER: &str = "user_id\titem_id\ttimestamp\tlabel";

pub fn write_events_tsv(path: &Path, meta: &Meta, events: &[InteractionEvent]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "#meta\tkind={}\tgenerator_version={}\tseed={}",
        meta.kind, meta.generator_version, meta.seed
    )
    .map_err(io)?;
    writeln!(w, "{EVENTS_HEADER}").map_err(io)?;
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user_id, e.item_id, e.timestamp, e.label).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_events_tsv(path: &Path) -> Result<(Meta, Vec<InteractionEvent>)> {
    let bad = |n: usize, what: &str| Error::Ingest(format!("{}:{n}: {what}", path.display()));
    let mut meta = None;
    let mut events = Vec::new();
    let mut seen_header = false;
    for (idx, line) in open(path)?.lines().enumerate() {
        let n = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(rest) = line.strip_prefix("#meta") {
            let mut m = Meta::new("events", 0);
            for kv in rest.split('\t').filter(|s| !s.is_empty()) {
                match kv.split_once('=') {
                    Some(("kind", v)) => m.kind = v.to_string(),
                    Some(("generator_version", v)) => m.generator_version = v.to_string(),
                    Some(("seed", v)) => m.seed = v.parse().map_err(|_| bad(n, "bad seed"))?,
                    Some((k, v)) => {
                        m.extra.insert(k.to_string(), v.to_string());
                    }
                    None => return Err(bad(n, "bad meta field")),
                }
            }
            meta = Some(m);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line != EVENTS_HEADER {
                return Err(bad(n, "expected column header"));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 tab-separated fields"));
        }
        let label: u8 = f[3].parse().map_err(|_| bad(n, "bad label"))?;
        if label > 1 {
            return Err(bad(n, "label must be 0 or 1"));
        }
        events.push(InteractionEvent {
            user_id: f[0].parse().map_err(|_| bad(n, "bad user_id"))?,
            item_id: f[1].parse().map_err(|_| bad(n, "bad item_id"))?,
            timestamp: f[2].parse().map_err(|_| bad(n, "bad timestamp"))?,
            label,
        });
    }
    let meta = meta.ok_or_else(|| bad(1, "missing #meta line"))?;
    Ok((meta, events))
}

/// On-disk shape of `labels.json`: flags and activity features keyed by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub meta: Meta,
    pub split_time: Timestamp,
    pub user_threshold: u32,
    pub item_threshold: u32,
    pub reference_time: Timestamp,
    pub users: BTreeMap<u32, EntityActivity>,
    pub items: BTreeMap<u32, EntityActivity>,
}

impl LabelsFile {
    pub fn from_labels(meta: Meta, split_time: Timestamp, labels: &ActivityLabels) -> Self {
        let keyed = |v: &[EntityActivity]| v.iter().cloned().enumerate().map(|(k, e)| (k as u32, e)).collect();
        Self {
            meta,
            split_time,
            user_threshold: labels.user_threshold,
            item_threshold: labels.item_threshold,
            reference_time: labels.reference_time,
            users: keyed(&labels.users),
            items: keyed(&labels.items),
        }
    }

    pub fn into_labels(self) -> Result<ActivityLabels> {
        let dense = |m: BTreeMap<u32, EntityActivity>, what: &str| -> Result<Vec<EntityActivity>> {
            let n = m.len();
            let v: Vec<_> = m.into_iter().enumerate().map(|(k, (id, e))| (k, id, e)).collect();
            if v.iter().any(|(k, id, _)| *k as u32 != *id) {
                return Err(Error::Ingest(format!("labels.json: {what} ids are not 0..{n}")));
            }
            Ok(v.into_iter().map(|(_, _, e)| e).collect())
        };
        Ok(ActivityLabels {
            user_threshold: self.user_threshold,
            item_threshold: self.item_threshold,
            reference_time: self.reference_time,
            users: dense(self.users, "user")?,
            items: dense(self.items, "item")?,
        })
    }
}

pub fn write_items(path: &Path, meta: &Meta, items: &[ItemRecord]) -> Result<()> {
    write_jsonl(path, meta, items)
}

pub fn write_users(path: &Path, meta: &Meta, users: &[UserRecord]) -> Result<()> {
    write_jsonl(path, meta, users)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Dataset, SynthConfig};

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_users: 50,
            num_items: 40,
            num_events: 2_000,
            ..SynthConfig::default()
        };
        let d = Dataset::generate(&cfg, 3).unwrap();
        let meta = Meta::new("items", 3);
        write_items(&dir.path().join("items.jsonl"), &meta, &d.items).unwrap();
        let (m, items): (Meta, Vec<ItemRecord>) = read_jsonl(&dir.path().join("items.jsonl")).unwrap();
        assert_eq!(m, meta);
        assert_eq!(items, d.items);

        let p = dir.path().join("events.tsv");
        write_events_tsv(&p, &Meta::new("events", 3), &d.events).unwrap();
        let (m, ev) = read_events_tsv(&p).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(ev, d.events);

        let lf = LabelsFile::from_labels(Meta::new("labels", 3), d.split_time, &d.labels);
        let p = dir.path().join("labels.json");
        write_json(&p, &lf).unwrap();
        let back: LabelsFile = read_json(&p).unwrap();
        assert_eq!(back.into_labels().unwrap(), d.labels);
    }

    #[test]
    fn malformed_events_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.tsv");
        std::fs::write(&p, "#meta\tseed=1\nuser_id\titem_id\ttimestamp\tlabel\n1\t2\t3\t7\n").unwrap();
        assert!(matches!(read_events_tsv(&p), Err(Error::Ingest(_))));
        std::fs::write(&p, "user_id\titem_id\ttimestamp\tlabel\n").unwrap();
        assert!(matches!(read_events_tsv(&p), Err(Error::Ingest(_))));
    }
}
