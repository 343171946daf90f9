use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Users' chronologically ordered item sequences.
///
/// Items carry dense ids `1..=num_items` (0 is the padding id) assigned
/// in ascending order of their raw ids; `item_raw[i - 1]` recovers the
/// raw id of dense item `i`. Users are indexed densely in ascending order
/// of their raw id strings.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub users: Vec<String>,
    pub item_raw: Vec<u64>,
    pub sequences: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Build from raw `(user, item sequence)` pairs, assigning dense ids.
    pub fn from_raw(raw: BTreeMap<String, Vec<u64>>) -> Self {
        let mut item_raw: Vec<u64> = raw.values().flatten().copied().collect();
        item_raw.sort_unstable();
        item_raw.dedup();
        let dense: HashMap<u64, usize> = item_raw
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i + 1))
            .collect();
        let mut users = Vec::new();
        let mut sequences = Vec::new();
        for (user, seq) in raw {
            if seq.is_empty() {
                continue;
            }
            users.push(user);
            sequences.push(seq.iter().map(|r| dense[r]).collect());
        }
        Self {
            users,
            item_raw,
            sequences,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_raw.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn raw_item(&self, dense: usize) -> u64 {
        self.item_raw[dense - 1]
    }

    /// Sequences keyed by raw ids.
    pub fn to_raw(&self) -> BTreeMap<String, Vec<u64>> {
        self.users
            .iter()
            .cloned()
            .zip(
                self.sequences
                    .iter()
                    .map(|s| s.iter().map(|&i| self.raw_item(i)).collect()),
            )
            .collect()
    }

    /// Per-item interaction counts indexed by dense id (index 0 unused).
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items() + 1];
        for &i in self.sequences.iter().flatten() {
            counts[i] += 1;
        }
        counts
    }
}

/// Parse the interactions TSV: `user_id<TAB>item_id<TAB>timestamp` with
/// `#` comment lines and blank lines ignored.
pub fn parse_interactions(text: &str) -> Result<InteractionDataset> {
    let mut by_user: BTreeMap<String, Vec<(f64, usize, u64)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let user = fields[0].trim();
        if user.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user id".into(),
            });
        }
        let item: u64 = fields[1].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("item id `{}`: {e}", fields[1]),
        })?;
        let ts: f64 = fields[2].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("timestamp `{}`: {e}", fields[2]),
        })?;
        if !ts.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: "timestamp is not finite".into(),
            });
        }
        by_user
            .entry(user.to_string())
            .or_default()
            .push((ts, line_no, item));
    }
    let raw = by_user
        .into_iter()
        .map(|(u, mut events)| {
            // stable: equal timestamps keep file order
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
            (u, events.into_iter().map(|(_, _, i)| i).collect())
        })
        .collect();
    Ok(InteractionDataset::from_raw(raw))
}

pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

/// Write the dataset as TSV with the within-user position as timestamp.
pub fn write_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let mut out = String::from("# user_id\titem_id\ttimestamp\n");
    for (user, seq) in ds.users.iter().zip(&ds.sequences) {
        for (t, &i) in seq.iter().enumerate() {
            out.push_str(&format!("{user}\t{}\t{t}\n", ds.raw_item(i)));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Iteratively drop users and items with fewer than five interactions
/// until both minima hold at once.
pub fn five_core_filter(ds: &InteractionDataset) -> Result<InteractionDataset> {
    k_core_filter(ds, 5)
}

pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    let mut raw = ds.to_raw();
    loop {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for &i in raw.values().flatten() {
            *counts.entry(i).or_default() += 1;
        }
        let mut changed = false;
        let mut next = BTreeMap::new();
        for (user, seq) in raw {
            if seq.len() < k {
                changed = true;
                continue;
            }
            let kept: Vec<u64> = seq.iter().copied().filter(|i| counts[i] >= k).collect();
            changed |= kept.len() != seq.len();
            next.insert(user, kept);
        }
        raw = next;
        if !changed {
            break;
        }
    }
    if raw.is_empty() {
        return Err(Error::DatasetExhausted(format!(
            "no users survive {k}-core filtering"
        )));
    }
    Ok(InteractionDataset::from_raw(raw))
}

/// Leave-one-out split of one user's sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Context preceding the validation target.
    pub fn valid_context(&self) -> &[usize] {
        &self.train
    }

    /// Context preceding the test target.
    pub fn test_context(&self) -> Vec<usize> {
        let mut ctx = self.train.clone();
        ctx.push(self.valid);
        ctx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitView {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions, excluded from evaluation.
    pub short_users: Vec<usize>,
    pub num_items: usize,
}

/// Last item to test, second-to-last to validation, the rest to training.
pub fn leave_one_out_split(ds: &InteractionDataset) -> SplitView {
    let mut users = Vec::new();
    let mut short_users = Vec::new();
    for (u, seq) in ds.sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            short_users.push(u);
            continue;
        }
        users.push(UserSplit {
            user: u,
            train: seq[..n - 2].to_vec(),
            valid: seq[n - 2],
            test: seq[n - 1],
        });
    }
    SplitView {
        users,
        short_users,
        num_items: ds.num_items(),
    }
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    user: &'a str,
    train: Vec<u64>,
    valid: u64,
    test: u64,
}

/// Audit export of the split with raw ids.
pub fn split_manifest_json(ds: &InteractionDataset, split: &SplitView) -> Result<String> {
    let entries: Vec<ManifestEntry> = split
        .users
        .iter()
        .map(|s| ManifestEntry {
            user: &ds.users[s.user],
            train: s.train.iter().map(|&i| ds.raw_item(i)).collect(),
            valid: ds.raw_item(s.valid),
            test: ds.raw_item(s.test),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_seqs(ds: &InteractionDataset) -> Vec<Vec<u64>> {
        ds.to_raw().into_values().collect()
    }

    #[test]
    fn groups_by_user_in_timestamp_order() {
        let ds = parse_interactions("u1\t1\t1\nu1\t2\t2\n").unwrap();
        assert_eq!(ds.num_users(), 1);
        assert_eq!(raw_seqs(&ds), vec![vec![1, 2]]);
    }

    #[test]
    fn out_of_order_rows_are_resorted() {
        let ds = parse_interactions("u1\t2\t2\nu1\t1\t1\n").unwrap();
        assert_eq!(raw_seqs(&ds), vec![vec![1, 2]]);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let ds = parse_interactions("u\t9\t5\nu\t3\t5\nu\t7\t1\n").unwrap();
        assert_eq!(raw_seqs(&ds), vec![vec![7, 9, 3]]);
    }

    #[test]
    fn counts_by_construction() {
        let mut text = String::from("# header\n\n");
        for u in 0..3 {
            for t in 0..4 {
                text.push_str(&format!("user{u}\t{}\t{t}\n", u * 4 + t));
            }
        }
        let ds = parse_interactions(&text).unwrap();
        assert_eq!(ds.num_users(), 3);
        assert!(ds.num_items() <= 12);
        assert_eq!(ds.num_interactions(), 12);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_interactions("# c\nu1\t1\t1\nu1\tbad\t2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_interactions("u1\t1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn dataset(users: &[(&str, &[u64])]) -> InteractionDataset {
        InteractionDataset::from_raw(
            users
                .iter()
                .map(|(u, s)| (u.to_string(), s.to_vec()))
                .collect(),
        )
    }

    #[test]
    fn short_user_removed_popular_items_kept() {
        let popular: &[u64] = &[1, 2, 3, 4, 5];
        let ds = dataset(&[
            ("a", popular),
            ("b", popular),
            ("c", popular),
            ("d", popular),
            ("e", popular),
            ("short", &[1, 2, 3, 4]),
        ]);
        let out = five_core_filter(&ds).unwrap();
        assert_eq!(out.num_users(), 5);
        assert_eq!(out.item_raw, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn five_core_dataset_is_a_fixed_point() {
        let s: &[u64] = &[1, 2, 3, 4, 5];
        let ds = dataset(&[("a", s), ("b", s), ("c", s), ("d", s), ("e", s)]);
        let out = five_core_filter(&ds).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn cascade_removes_dependent_user() {
        // Round 1: "short" (4 events) goes, item 7 (4 occurrences) goes, so
        // f shrinks to [6]. Round 2: item 6 is down to 2 occurrences, f has
        // 1 event; both go and e loses its trailing 6. Round 3 is stable.
        let base: &[u64] = &[1, 2, 3, 4, 5];
        let ds = dataset(&[
            ("a", base),
            ("b", base),
            ("c", base),
            ("d", base),
            ("e", &[1, 2, 3, 4, 5, 6]),
            ("f", &[6, 7, 7, 7, 7]),
            ("short", &[6, 6, 6, 1]),
        ]);
        let out = five_core_filter(&ds).unwrap();
        assert_eq!(out.users, vec!["a", "b", "c", "d", "e"]);
        assert_eq!(out.item_raw, vec![1, 2, 3, 4, 5]);
        let counts = out.item_counts();
        assert!(counts[1..].iter().all(|&c| c >= 5));
        assert!(out.sequences.iter().all(|s| s.len() >= 5));
    }

    #[test]
    fn empty_fixed_point_is_an_error() {
        let ds = dataset(&[("a", &[1, 2, 3])]);
        assert!(matches!(five_core_filter(&ds), Err(Error::DatasetExhausted(_))));
    }

    #[test]
    fn leave_one_out_layout() {
        let ds = dataset(&[("u", &[10, 20, 30, 40, 50])]);
        let split = leave_one_out_split(&ds);
        let s = &split.users[0];
        let raw = |v: &[usize]| v.iter().map(|&i| ds.raw_item(i)).collect::<Vec<_>>();
        assert_eq!(raw(&s.train), vec![10, 20, 30]);
        assert_eq!(ds.raw_item(s.valid), 40);
        assert_eq!(raw(s.valid_context()), vec![10, 20, 30]);
        assert_eq!(ds.raw_item(s.test), 50);
        assert_eq!(raw(&s.test_context()), vec![10, 20, 30, 40]);
    }

    #[test]
    fn minimal_and_too_short_sequences() {
        let ds = dataset(&[("a", &[1, 2, 3]), ("b", &[1, 2])]);
        let split = leave_one_out_split(&ds);
        assert_eq!(split.users.len(), 1);
        assert_eq!(split.users[0].train, vec![1]);
        assert_eq!((split.users[0].valid, split.users[0].test), (2, 3));
        assert_eq!(split.short_users, vec![1]);
    }
}
