//! Rating/trust file parsing, id-mapped graph construction, train/test
//! splitting, popularity-debiased test subsets, and exposure tables with
//! sampled negatives.
//!
//! All functions are pure in (inputs, seed): repeated calls produce
//! byte-identical outputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rating set is empty")]
    EmptyRatings,
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("no item has {n_per_item} or more ratings in the pool")]
    EmptySubset { n_per_item: usize },
    #[error("test subset violates the popularity invariant: item {item} appears {got} times, expected {expected}")]
    UnevenSubset { item: u32, got: usize, expected: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// One parsed line of a ratings file; external string ids, rating in [1, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
}

/// One parsed line of a trust file.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialEdge {
    pub truster: String,
    pub trustee: String,
}

/// An id-mapped rating triple (internal indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

/// Id-mapped dataset: ratings plus the social and bipartite adjacency the
/// embedding stage walks over.
///
/// Bipartite node numbering puts users first: user `u` is node `u`, item `i`
/// is node `n_users + i`. Every user has social degree >= 1 (users without
/// any trust edge get a self-loop).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub ratings: Vec<Rating>,
    pub social_adj: Vec<Vec<u32>>,
    pub bipartite_adj: Vec<Vec<u32>>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub user_index: HashMap<String, u32>,
    pub item_index: HashMap<String, u32>,
}

impl Dataset {
    #[inline]
    pub fn item_node(&self, item: u32) -> u32 {
        self.n_users as u32 + item
    }

    /// Items with no interactions (isolated in the bipartite graph).
    pub fn items_without_ratings(&self) -> Vec<u32> {
        (0..self.n_items as u32)
            .filter(|&i| self.bipartite_adj[self.n_users + i as usize].is_empty())
            .collect()
    }

    /// Per-user sorted list of items seen in the given rating slices.
    pub fn seen_items(n_users: usize, slices: &[&[Rating]]) -> Vec<Vec<u32>> {
        let mut seen = vec![Vec::new(); n_users];
        for slice in slices {
            for r in *slice {
                seen[r.user as usize].push(r.item);
            }
        }
        for s in &mut seen {
            s.sort_unstable();
            s.dedup();
        }
        seen
    }
}

/// One exposure-table row. Exposed rows carry the observed rating; sampled
/// negatives carry none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureRow {
    pub user: u32,
    pub item: u32,
    pub exposed: bool,
    pub rating: Option<f64>,
}

/// Users whose unrated-item pool was smaller than the requested negative
/// count, with how many negatives they actually received.
#[derive(Debug, Clone, Default)]
pub struct NegativeCoverage {
    pub shortfalls: Vec<(u32, usize, usize)>, // (user, requested, got)
}

/// Training rows for the exposure objective: positives from observed ratings
/// plus per-user uniform negatives over unrated items.
#[derive(Debug, Clone)]
pub struct ExposureTable {
    pub rows: Vec<ExposureRow>,
    pub positive_rate: f64,
    pub coverage: NegativeCoverage,
}

/// Popularity-debiased test subset: every retained item appears exactly
/// `n_per_item` times.
#[derive(Debug, Clone)]
pub struct TestSubset {
    pub n_per_item: usize,
    pub rows: Vec<Rating>,
}

fn split_csv_line(line: &str) -> Vec<&str> {
    line.split(',').map(|f| f.trim()).collect()
}

/// Parse a ratings CSV (`user_id,item_id,rating`). Keeps duplicates; the
/// dataset builder collapses them. `has_header` skips the first line.
pub fn load_ratings(path: &Path, has_header: bool) -> Result<Vec<RatingRecord>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(&line);
        let parse_err = |message: String| DataError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty id field".to_string()));
        }
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("non-numeric rating `{}`", fields[2])))?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(parse_err(format!("rating {} outside [1, 5]", rating)));
        }
        records.push(RatingRecord {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            rating,
        });
    }
    Ok(records)
}

/// Parse a trust CSV (`truster,trustee`). Self-edges are kept.
pub fn load_social(path: &Path, has_header: bool) -> Result<Vec<SocialEdge>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(&line);
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno,
                message: format!("expected `truster,trustee`, found `{}`", line),
            });
        }
        edges.push(SocialEdge { truster: fields[0].to_string(), trustee: fields[1].to_string() });
    }
    Ok(edges)
}

/// Build the id-mapped dataset.
///
/// Internal ids follow first-appearance order over ratings, then edges; edge
/// endpoints unseen in the ratings are admitted as users with no ratings.
/// Duplicate (user, item) pairs keep their first position and the last value.
/// Trust edges are undirected; users with no trust edge get a self-loop.
pub fn build_dataset(
    ratings: &[RatingRecord],
    edges: &[SocialEdge],
) -> Result<Dataset, DataError> {
    if ratings.is_empty() {
        return Err(DataError::EmptyRatings);
    }

    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();

    let mut intern_user = |id: &str, user_index: &mut HashMap<String, u32>| -> u32 {
        *user_index.entry(id.to_string()).or_insert_with(|| {
            user_ids.push(id.to_string());
            (user_ids.len() - 1) as u32
        })
    };

    // Ratings with last-wins dedup, order-stable on first appearance.
    let mut pair_slot: HashMap<(u32, u32), usize> = HashMap::new();
    let mut deduped: Vec<Rating> = Vec::new();
    for rec in ratings {
        let u = intern_user(&rec.user_id, &mut user_index);
        let i = *item_index.entry(rec.item_id.clone()).or_insert_with(|| {
            item_ids.push(rec.item_id.clone());
            (item_ids.len() - 1) as u32
        });
        match pair_slot.get(&(u, i)) {
            Some(&slot) => deduped[slot].value = rec.rating,
            None => {
                pair_slot.insert((u, i), deduped.len());
                deduped.push(Rating { user: u, item: i, value: rec.rating });
            }
        }
    }

    let mut edge_pairs: Vec<(u32, u32)> = Vec::new();
    for e in edges {
        let a = intern_user(&e.truster, &mut user_index);
        let b = intern_user(&e.trustee, &mut user_index);
        edge_pairs.push((a, b));
    }

    let n_users = user_ids.len();
    let n_items = item_ids.len();

    let mut social_adj: Vec<Vec<u32>> = vec![Vec::new(); n_users];
    for (a, b) in edge_pairs {
        if a == b {
            if !social_adj[a as usize].contains(&a) {
                social_adj[a as usize].push(a);
            }
            continue;
        }
        if !social_adj[a as usize].contains(&b) {
            social_adj[a as usize].push(b);
        }
        if !social_adj[b as usize].contains(&a) {
            social_adj[b as usize].push(a);
        }
    }
    for (u, adj) in social_adj.iter_mut().enumerate() {
        if adj.is_empty() {
            adj.push(u as u32);
        }
    }

    let mut bipartite_adj: Vec<Vec<u32>> = vec![Vec::new(); n_users + n_items];
    for r in &deduped {
        let item_node = n_users as u32 + r.item;
        bipartite_adj[r.user as usize].push(item_node);
        bipartite_adj[item_node as usize].push(r.user);
    }

    Ok(Dataset {
        n_users,
        n_items,
        ratings: deduped,
        social_adj,
        bipartite_adj,
        user_ids,
        item_ids,
        user_index,
        item_index,
    })
}

/// Seeded shuffle, then the first `floor(train_fraction * N)` ratings go to
/// train and the remainder to the test pool.
pub fn split_train_test(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Rating>, Vec<Rating>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let mut shuffled = ds.ratings.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (train_fraction * shuffled.len() as f64).floor() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// Retain items with at least `n_per_item` pool ratings; each contributes
/// exactly `n_per_item` of them, sampled uniformly without replacement.
pub fn make_popularity_subset(
    test_pool: &[Rating],
    n_per_item: usize,
    seed: u64,
) -> Result<TestSubset, DataError> {
    assert!(n_per_item >= 1, "n_per_item must be >= 1");
    let mut by_item: HashMap<u32, Vec<Rating>> = HashMap::new();
    for r in test_pool {
        by_item.entry(r.item).or_default().push(*r);
    }
    let mut items: Vec<u32> = by_item.keys().copied().collect();
    items.sort_unstable();

    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for item in items {
        let pool = &by_item[&item];
        if pool.len() < n_per_item {
            continue;
        }
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(&mut rng);
        for &idx in indices.iter().take(n_per_item) {
            rows.push(pool[idx]);
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptySubset { n_per_item });
    }
    Ok(TestSubset { n_per_item, rows })
}

/// One exposed row per training rating plus, per user, uniform negatives
/// drawn without replacement from the items the user never rated in train
/// (`negatives_per_positive` per positive). Users whose unrated pool runs out
/// get fewer negatives, recorded in the coverage report.
pub fn build_exposure_table(
    train_ratings: &[Rating],
    n_items: usize,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<ExposureTable, DataError> {
    if train_ratings.is_empty() {
        return Err(DataError::EmptyRatings);
    }
    let mut rows: Vec<ExposureRow> = train_ratings
        .iter()
        .map(|r| ExposureRow { user: r.user, item: r.item, exposed: true, rating: Some(r.value) })
        .collect();

    let mut coverage = NegativeCoverage::default();
    if negatives_per_positive > 0 {
        let mut rated: HashMap<u32, Vec<u32>> = HashMap::new();
        for r in train_ratings {
            rated.entry(r.user).or_default().push(r.item);
        }
        let mut users: Vec<u32> = rated.keys().copied().collect();
        users.sort_unstable();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for user in users {
            let items = rated.get_mut(&user).unwrap();
            items.sort_unstable();
            items.dedup();
            let requested = items.len() * negatives_per_positive;
            let mut pool: Vec<u32> = (0..n_items as u32)
                .filter(|i| items.binary_search(i).is_err())
                .collect();
            let take = requested.min(pool.len());
            // Partial Fisher-Yates: the first `take` entries are a uniform
            // without-replacement sample.
            for k in 0..take {
                let j = rng.random_range(k..pool.len());
                pool.swap(k, j);
            }
            for &item in pool.iter().take(take) {
                rows.push(ExposureRow { user, item, exposed: false, rating: None });
            }
            if take < requested {
                coverage.shortfalls.push((user, requested, take));
            }
        }
    }

    let n_pos = rows.iter().filter(|r| r.exposed).count();
    let positive_rate = n_pos as f64 / rows.len() as f64;
    Ok(ExposureTable { rows, positive_rate, coverage })
}

fn format_rating(v: f64) -> String {
    // Bit-stable and compact: integers print without a trailing `.0`.
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{}", v)
    }
}

/// Write rows in the `user_idx,item_idx,exposure,rating` layout; negatives
/// leave the rating field empty.
pub fn write_exposure_csv<'a>(
    path: &Path,
    rows: impl Iterator<Item = &'a ExposureRow>,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, s: String| {
        w.write_all(s.as_bytes()).map_err(|e| io_err(path, e))
    };
    emit(&mut w, "user_idx,item_idx,exposure,rating\n".to_string())?;
    for row in rows {
        let rating = row.rating.map(format_rating).unwrap_or_default();
        emit(
            &mut w,
            format!("{},{},{},{}\n", row.user, row.item, u8::from(row.exposed), rating),
        )?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write a rating split in the same 4-column layout (exposure always 1).
pub fn write_ratings_csv(path: &Path, rows: &[Rating]) -> Result<(), DataError> {
    let exposure_rows: Vec<ExposureRow> = rows
        .iter()
        .map(|r| ExposureRow { user: r.user, item: r.item, exposed: true, rating: Some(r.value) })
        .collect();
    write_exposure_csv(path, exposure_rows.iter())
}

/// Read rows written by [`write_exposure_csv`].
pub fn read_exposure_csv(path: &Path) -> Result<Vec<ExposureRow>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(&line);
        let parse_err = |message: String| DataError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let user: u32 =
            fields[0].parse().map_err(|_| parse_err(format!("bad user index `{}`", fields[0])))?;
        let item: u32 =
            fields[1].parse().map_err(|_| parse_err(format!("bad item index `{}`", fields[1])))?;
        let exposed = match fields[2] {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(format!("bad exposure flag `{}`", other))),
        };
        let rating = if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse()
                    .map_err(|_| parse_err(format!("bad rating `{}`", fields[3])))?,
            )
        };
        if exposed && rating.is_none() {
            return Err(parse_err("exposed row without a rating".to_string()));
        }
        if !exposed && rating.is_some() {
            return Err(parse_err("negative row carries a rating".to_string()));
        }
        rows.push(ExposureRow { user, item, exposed, rating });
    }
    Ok(rows)
}

/// Read a rating split written by [`write_ratings_csv`].
pub fn read_ratings_csv(path: &Path) -> Result<Vec<Rating>, DataError> {
    let rows = read_exposure_csv(path)?;
    rows.into_iter()
        .map(|r| match r.rating {
            Some(value) if r.exposed => Ok(Rating { user: r.user, item: r.item, value }),
            _ => Err(DataError::Parse {
                path: path.display().to_string(),
                line: 0,
                message: "split file contains negative rows".to_string(),
            }),
        })
        .collect()
}

/// Read a `test_pop<N>.csv` subset and validate the exact-count invariant.
pub fn read_test_subset(path: &Path, n_per_item: usize) -> Result<TestSubset, DataError> {
    let rows = read_ratings_csv(path)?;
    let subset = TestSubset { n_per_item, rows };
    validate_subset(&subset)?;
    Ok(subset)
}

/// Scan-check that every item in the subset appears exactly `n_per_item`
/// times.
pub fn validate_subset(subset: &TestSubset) -> Result<(), DataError> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for r in &subset.rows {
        *counts.entry(r.item).or_default() += 1;
    }
    for (&item, &got) in counts.iter() {
        if got != subset.n_per_item {
            return Err(DataError::UnevenSubset { item, got, expected: subset.n_per_item });
        }
    }
    Ok(())
}
