//! Hamming-distance retrieval over packed hash codes.
//!
//! The index is a flat list of bit-packed records scanned linearly; at the
//! code lengths this crate produces (K ≤ 128) a scan beats any sublinear
//! structure worth its setup cost. Ranking ties break by ascending record
//! id so results never depend on insertion order.

use std::collections::{BTreeMap, BTreeSet};

use crate::array::Array;
use crate::error::{Error, Result};

/// One database entry: a packed code plus integer labels keyed by label
/// space name ("activity", "appearance", "video-id").
#[derive(Clone, Debug, PartialEq)]
pub struct CodeRecord {
    pub id: u64,
    pub code: Vec<u8>,
    pub labels: BTreeMap<String, i64>,
}

/// A ranked match from a scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hit {
    pub id: u64,
    pub distance: u32,
}

/// Ranked hits, nearest first, ties broken by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// Mean pairwise distances between classes of one label space. Entry
/// `[i][j]` of `matrix` averages over all pairs drawn from `classes[i]`
/// and `classes[j]`; the diagonal averages distinct pairs only, and a
/// single-record class reports 0 there.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistances {
    pub classes: Vec<i64>,
    pub matrix: Array,
}

/// Mean AP@k over queries, with the surviving per-query scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MapScore {
    pub value: f64,
    pub per_query: Vec<(u64, f64)>,
}

/// Immutable after build; queries only read.
pub struct Index {
    k: usize,
    records: Vec<CodeRecord>,
    ids: BTreeSet<u64>,
}

impl Index {
    pub fn new(k: usize) -> Result<Index> {
        if k == 0 {
            return Err(Error::op("index", "code length must be positive"));
        }
        Ok(Index { k, records: Vec::new(), ids: BTreeSet::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CodeRecord] {
        &self.records
    }

    pub fn insert(&mut self, record: CodeRecord) -> Result<()> {
        self.check_code(&record.code)?;
        if !self.ids.insert(record.id) {
            return Err(Error::op("index", format!("duplicate record id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    /// Validates byte length for K bits and that the pad bits of the last
    /// byte are clear, so distances never pick up garbage.
    fn check_code(&self, code: &[u8]) -> Result<()> {
        let bytes = self.k.div_ceil(8);
        if code.len() != bytes {
            return Err(Error::op(
                "index",
                format!("code is {} bytes, {} bits need {bytes}", code.len(), self.k),
            ));
        }
        let tail_bits = self.k % 8;
        if tail_bits != 0 {
            let mask = !((1u16 << tail_bits) - 1) as u8;
            if code[bytes - 1] & mask != 0 {
                return Err(Error::op("index", "pad bits of last code byte must be zero"));
            }
        }
        Ok(())
    }
}

/// Popcount of XOR over equal-length packed codes. Pad bits must be zero
/// on both sides, which every packer in this crate guarantees.
pub fn hamming(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::op(
            "hamming",
            format!("packed lengths differ: {} vs {}", a.len(), b.len()),
        ));
    }
    Ok(xor_popcount(a, b))
}

fn xor_popcount(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn ranked_scan(index: &Index, code: &[u8], exclude_id: Option<u64>) -> Result<Vec<Hit>> {
    index.check_code(code)?;
    let mut hits: Vec<Hit> = index
        .records
        .iter()
        .filter(|r| Some(r.id) != exclude_id)
        .map(|r| Hit { id: r.id, distance: xor_popcount(&r.code, code) })
        .collect();
    hits.sort_by_key(|h| (h.distance, h.id));
    Ok(hits)
}

/// The k nearest records to `code`, fewer when the index is smaller.
pub fn query_topk(index: &Index, code: &[u8], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::op("query_topk", "k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::op("query_topk", "index is empty"));
    }
    let mut hits = ranked_scan(index, code, None)?;
    hits.truncate(k);
    Ok(RetrievalResult { hits })
}

/// Mean AP@k under one label space. A hit is relevant when its label
/// equals the query's; each AP normalizes by min(k, relevant-in-database)
/// and queries with nothing relevant drop out of the mean. With
/// `exclude_self_id` set, a database record sharing the query's id is
/// ignored entirely, ranking and relevant count both.
pub fn map_at_k(
    queries: &[CodeRecord],
    index: &Index,
    label_space: &str,
    k: usize,
    exclude_self_id: bool,
) -> Result<MapScore> {
    if queries.is_empty() {
        return Err(Error::op("map_at_k", "no queries"));
    }
    if k == 0 {
        return Err(Error::op("map_at_k", "k must be at least 1"));
    }
    let mut db_labels: BTreeMap<u64, i64> = BTreeMap::new();
    for r in &index.records {
        db_labels.insert(r.id, label_of(r, label_space, "database")?);
    }

    let mut per_query = Vec::new();
    for query in queries {
        let label = label_of(query, label_space, "query")?;
        let exclude = exclude_self_id.then_some(query.id);
        let relevant_total = db_labels
            .iter()
            .filter(|(&id, &l)| Some(id) != exclude && l == label)
            .count();
        if relevant_total == 0 {
            continue;
        }
        let hits = ranked_scan(index, &query.code, exclude)?;
        let mut seen = 0usize;
        let mut acc = 0.0;
        for (rank, hit) in hits.iter().take(k).enumerate() {
            if db_labels[&hit.id] == label {
                seen += 1;
                acc += seen as f64 / (rank + 1) as f64;
            }
        }
        per_query.push((query.id, acc / relevant_total.min(k) as f64));
    }
    if per_query.is_empty() {
        return Err(Error::op("map_at_k", "no query has relevant database records"));
    }
    let value = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(MapScore { value, per_query })
}

fn label_of(record: &CodeRecord, label_space: &str, side: &str) -> Result<i64> {
    record.labels.get(label_space).copied().ok_or_else(|| {
        Error::op(
            "map_at_k",
            format!("{side} record {} lacks label space {label_space:?}", record.id),
        )
    })
}

/// Class-to-class mean Hamming distances under one label space, classes
/// sorted ascending.
pub fn mean_hamming_by_class(index: &Index, label_space: &str) -> Result<ClassDistances> {
    if index.is_empty() {
        return Err(Error::op("mean_hamming_by_class", "index is empty"));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (pos, record) in index.records.iter().enumerate() {
        let label = record.labels.get(label_space).copied().ok_or_else(|| {
            Error::op(
                "mean_hamming_by_class",
                format!("record {} lacks label space {label_space:?}", record.id),
            )
        })?;
        members.entry(label).or_default().push(pos);
    }
    let classes: Vec<i64> = members.keys().copied().collect();
    let c = classes.len();
    let mut matrix = vec![0.0; c * c];
    for (i, ci) in classes.iter().enumerate() {
        for (j, cj) in classes.iter().enumerate() {
            let (a, b) = (&members[ci], &members[cj]);
            let (mut total, mut pairs) = (0u64, 0u64);
            if i == j {
                for (idx, &p) in a.iter().enumerate() {
                    for &q in &a[idx + 1..] {
                        total += u64::from(xor_popcount(
                            &index.records[p].code,
                            &index.records[q].code,
                        ));
                        pairs += 1;
                    }
                }
            } else {
                for &p in a {
                    for &q in b {
                        total += u64::from(xor_popcount(
                            &index.records[p].code,
                            &index.records[q].code,
                        ));
                        pairs += 1;
                    }
                }
            }
            matrix[i * c + j] = if pairs == 0 { 0.0 } else { total as f64 / pairs as f64 };
        }
    }
    Ok(ClassDistances { classes, matrix: Array::from_vec(vec![c, c], matrix)? })
}
