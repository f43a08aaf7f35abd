//! Interaction data: ingest, filtering, leave-one-out splitting, in-batch
//! negative batching and a synthetic generator.

mod batch;
mod synth;

pub use batch::{make_batches, training_rows, Batch, TrainingRow};
pub use synth::{synth_generate, SynthConfig};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNKNOWN_TITLE: &str = "unknown-item";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const CATALOG_FILE: &str = "catalog.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("interaction references unknown item `{0}`")]
    UnknownItem(String),
    #[error("duplicate catalog item `{0}`")]
    DuplicateItem(String),
    #[error("no users survive filtering")]
    EmptyAfterFilter,
    #[error("user `{user}` has {len} interactions; at least {need} required")]
    TooShort {
        user: String,
        len: usize,
        need: usize,
    },
    #[error("dataset has not been split")]
    NotSplit,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub dense_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Dense item indices in timestamp order.
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Leave-one-out assignment for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserSplit {
    pub train_len: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(CorpusError::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: Vec<UserSequence>,
    pub catalog: Vec<ItemMeta>,
    splits: Option<Vec<UserSplit>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetCounts {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

#[derive(Deserialize)]
struct CatalogLine {
    item_id: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

fn clean_title(t: Option<String>) -> String {
    match t {
        Some(t) if !t.trim().is_empty() => t,
        _ => UNKNOWN_TITLE.to_string(),
    }
}

impl InteractionDataset {
    /// Builds a dataset from in-memory events `(user_id, item_id, timestamp)`,
    /// in file order.
    pub fn from_events(
        catalog: Vec<ItemMeta>,
        events: impl IntoIterator<Item = (String, String, i64)>,
    ) -> Result<Self, CorpusError> {
        let by_id: HashMap<&str, usize> = catalog
            .iter()
            .map(|m| (m.item_id.as_str(), m.dense_index))
            .collect();
        let mut order: Vec<String> = Vec::new();
        let mut per_user: HashMap<String, Vec<(i64, usize)>> = HashMap::new();
        for (user, item, ts) in events {
            let idx = *by_id
                .get(item.as_str())
                .ok_or_else(|| CorpusError::UnknownItem(item.clone()))?;
            per_user
                .entry(user.clone())
                .or_insert_with(|| {
                    order.push(user.clone());
                    Vec::new()
                })
                .push((ts, idx));
        }
        let users = order
            .into_iter()
            .map(|u| {
                let mut ev = per_user.remove(&u).unwrap_or_default();
                // stable: ties keep file order
                ev.sort_by_key(|(ts, _)| *ts);
                UserSequence {
                    user_id: u,
                    timestamps: ev.iter().map(|e| e.0).collect(),
                    items: ev.iter().map(|e| e.1).collect(),
                }
            })
            .collect();
        Ok(Self {
            users,
            catalog,
            splits: None,
        })
    }

    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            users: self.users.len(),
            items: self.catalog.len(),
            interactions: self.users.iter().map(UserSequence::len).sum(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_split(&self) -> bool {
        self.splits.is_some()
    }

    pub fn split_of(&self, user: usize) -> Result<UserSplit, CorpusError> {
        self.splits
            .as_ref()
            .map(|s| s[user])
            .ok_or(CorpusError::NotSplit)
    }

    pub fn train_items(&self, user: usize) -> Result<&[usize], CorpusError> {
        let s = self.split_of(user)?;
        Ok(&self.users[user].items[..s.train_len])
    }

    /// History and held-out target for evaluating one user.
    pub fn eval_case(&self, user: usize, split: EvalSplit) -> Result<(&[usize], usize), CorpusError> {
        let s = self.split_of(user)?;
        let items = &self.users[user].items;
        Ok(match split {
            EvalSplit::Valid => (&items[..s.train_len], s.valid),
            EvalSplit::Test => (&items[..s.train_len + 1], s.test),
        })
    }

    /// Catalog fingerprint used to reject checkpoints trained on other data.
    pub fn catalog_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for m in &self.catalog {
            h.update(m.item_id.as_bytes());
            h.update([0u8]);
            h.update(m.title.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the dataset in the ingest formats.
    pub fn save_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut ev = fs::File::create(dir.join(INTERACTIONS_FILE))?;
        writeln!(ev, "# user_id\titem_id\ttimestamp")?;
        for u in &self.users {
            for (&i, &ts) in u.items.iter().zip(&u.timestamps) {
                writeln!(ev, "{}\t{}\t{}", u.user_id, self.catalog[i].item_id, ts)?;
            }
        }
        let mut cat = fs::File::create(dir.join(CATALOG_FILE))?;
        for m in &self.catalog {
            let line = serde_json::json!({
                "item_id": m.item_id,
                "title": m.title,
                "category": m.category,
            });
            writeln!(cat, "{line}")?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        ingest(&dir.join(INTERACTIONS_FILE), &dir.join(CATALOG_FILE))
    }
}

pub fn read_catalog(path: &Path) -> Result<Vec<ItemMeta>, CorpusError> {
    let p = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CatalogLine = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: p.clone(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if seen.insert(parsed.item_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateItem(parsed.item_id));
        }
        out.push(ItemMeta {
            dense_index: out.len(),
            item_id: parsed.item_id,
            title: clean_title(parsed.title),
            category: parsed.category.unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Reads an interactions TSV and a catalog JSON-lines file.
pub fn ingest(interactions_path: &Path, catalog_path: &Path) -> Result<InteractionDataset, CorpusError> {
    let catalog = read_catalog(catalog_path)?;
    let p = interactions_path.display().to_string();
    let reader = BufReader::new(fs::File::open(interactions_path)?);
    let mut events = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: &str| CorpusError::Malformed {
            path: p.clone(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed("expected 3 tab-separated fields"));
        }
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| malformed("timestamp is not an integer"))?;
        events.push((fields[0].to_string(), fields[1].to_string(), ts));
    }
    InteractionDataset::from_events(catalog, events)
}

/// Drops users with fewer than `min_n` interactions and recompacts the
/// catalog to items that still occur.
pub fn filter_min_interactions(d: &InteractionDataset, min_n: usize) -> Result<InteractionDataset, CorpusError> {
    if min_n == 0 {
        return Err(CorpusError::Invalid("min_n must be at least 1".into()));
    }
    let users: Vec<&UserSequence> = d.users.iter().filter(|u| u.len() >= min_n).collect();
    if users.is_empty() {
        return Err(CorpusError::EmptyAfterFilter);
    }
    let mut used = vec![false; d.catalog.len()];
    for u in &users {
        for &i in &u.items {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; d.catalog.len()];
    let mut catalog = Vec::new();
    for (old, meta) in d.catalog.iter().enumerate() {
        if used[old] {
            remap[old] = catalog.len();
            catalog.push(ItemMeta {
                dense_index: catalog.len(),
                ..meta.clone()
            });
        }
    }
    let users = users
        .into_iter()
        .map(|u| UserSequence {
            user_id: u.user_id.clone(),
            items: u.items.iter().map(|&i| remap[i]).collect(),
            timestamps: u.timestamps.clone(),
        })
        .collect();
    Ok(InteractionDataset {
        users,
        catalog,
        splits: None,
    })
}

/// Last item is the test target, second-to-last the validation target, the
/// rest is training history.
pub fn leave_one_out_split(d: &InteractionDataset) -> Result<InteractionDataset, CorpusError> {
    let mut splits = Vec::with_capacity(d.users.len());
    for u in &d.users {
        let n = u.len();
        if n < 3 {
            return Err(CorpusError::TooShort {
                user: u.user_id.clone(),
                len: n,
                need: 3,
            });
        }
        splits.push(UserSplit {
            train_len: n - 2,
            valid: u.items[n - 2],
            test: u.items[n - 1],
        });
    }
    Ok(InteractionDataset {
        splits: Some(splits),
        ..d.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(n: usize) -> Vec<ItemMeta> {
        (0..n)
            .map(|i| ItemMeta {
                item_id: format!("i{i}"),
                title: format!("title {i}"),
                category: "c".into(),
                dense_index: i,
            })
            .collect()
    }

    fn dataset(lengths: &[usize]) -> InteractionDataset {
        let mut ev = Vec::new();
        for (u, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                ev.push((format!("u{u}"), format!("i{}", (u + t) % 10), t as i64));
            }
        }
        InteractionDataset::from_events(catalog(10), ev).unwrap()
    }

    #[test]
    fn ingest_sorts_by_timestamp_and_keeps_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.jsonl");
        let e = dir.path().join("e.tsv");
        fs::write(
            &c,
            "{\"item_id\":\"a\",\"title\":\"A\",\"category\":\"x\"}\n{\"item_id\":\"b\",\"title\":\"\",\"category\":\"y\"}\n",
        )
        .unwrap();
        fs::write(&e, "# header\nu1\tb\t30\nu1\ta\t10\nu1\ta\t10\nu2\ta\t5\nu1\tb\t20\n").unwrap();
        let d = ingest(&e, &c).unwrap();
        assert_eq!(d.users.len(), 2);
        assert_eq!(d.users[0].timestamps, vec![10, 10, 20, 30]);
        assert_eq!(d.users[0].items, vec![0, 0, 1, 1]);
        assert_eq!(d.catalog[1].title, UNKNOWN_TITLE);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let ev = vec![
            ("u".to_string(), "i3".to_string(), 5),
            ("u".to_string(), "i1".to_string(), 5),
            ("u".to_string(), "i2".to_string(), 1),
        ];
        let d = InteractionDataset::from_events(catalog(5), ev).unwrap();
        assert_eq!(d.users[0].items, vec![2, 3, 1]);
    }

    #[test]
    fn unknown_item_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.jsonl");
        let e = dir.path().join("e.tsv");
        fs::write(&c, "{\"item_id\":\"a\",\"title\":\"A\",\"category\":\"x\"}\n").unwrap();
        fs::write(&e, "u1\tzzz\t1\n").unwrap();
        match ingest(&e, &c) {
            Err(CorpusError::UnknownItem(id)) => assert_eq!(id, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.jsonl");
        let e = dir.path().join("e.tsv");
        fs::write(&c, "{\"item_id\":\"a\",\"title\":\"A\",\"category\":\"x\"}\n").unwrap();
        fs::write(&e, "u1\ta\t1\nu1\ta\tnot-a-number\n").unwrap();
        match ingest(&e, &c) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let d = dataset(&[3, 5, 9]);
        let f = filter_min_interactions(&d, 5).unwrap();
        assert_eq!(f.users.len(), 2);
        assert!(f.users.iter().all(|u| u.len() >= 5));
        for (i, m) in f.catalog.iter().enumerate() {
            assert_eq!(m.dense_index, i);
        }
    }

    #[test]
    fn filter_with_one_is_identity_when_catalog_fully_used() {
        let d = dataset(&[10, 10]);
        assert_eq!(filter_min_interactions(&d, 1).unwrap(), d);
    }

    #[test]
    fn filter_recompacts_items() {
        let ev = vec![
            ("a".to_string(), "i7".to_string(), 1),
            ("a".to_string(), "i2".to_string(), 2),
        ];
        let d = InteractionDataset::from_events(catalog(10), ev).unwrap();
        let f = filter_min_interactions(&d, 1).unwrap();
        assert_eq!(f.catalog.len(), 2);
        assert_eq!(f.catalog[0].item_id, "i2");
        assert_eq!(f.users[0].items, vec![1, 0]);
    }

    #[test]
    fn filter_everything_is_an_error() {
        let d = dataset(&[4, 4]);
        assert!(matches!(
            filter_min_interactions(&d, 5),
            Err(CorpusError::EmptyAfterFilter)
        ));
    }

    #[test]
    fn leave_one_out_cases() {
        let ev: Vec<_> = (0..5)
            .map(|t| ("u".to_string(), format!("i{t}"), t as i64))
            .collect();
        let d = leave_one_out_split(&InteractionDataset::from_events(catalog(5), ev).unwrap()).unwrap();
        assert_eq!(d.train_items(0).unwrap(), &[0, 1, 2]);
        assert_eq!(d.split_of(0).unwrap().valid, 3);
        assert_eq!(d.split_of(0).unwrap().test, 4);

        let d = leave_one_out_split(&dataset(&[3])).unwrap();
        let s = d.split_of(0).unwrap();
        assert_eq!((s.train_len, s.valid, s.test), (1, d.users[0].items[1], d.users[0].items[2]));

        assert!(matches!(
            leave_one_out_split(&dataset(&[2])),
            Err(CorpusError::TooShort { .. })
        ));
    }

    #[test]
    fn save_and_reload_round_trips() {
        let d = dataset(&[6, 7, 5]);
        let dir = tempfile::tempdir().unwrap();
        d.save_dir(dir.path()).unwrap();
        let back = InteractionDataset::load_dir(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
