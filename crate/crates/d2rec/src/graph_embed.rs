//! Pretrained node embeddings via biased second-order random walks and
//! skip-gram with negative sampling.
//!
//! User vectors come from walks over the social graph; item vectors from
//! walks over the user-item bipartite graph (item rows sliced out of the
//! joint table). Both are frozen inputs to the disentangling network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::derive_seed;
use crate::nncore::{sigmoid, DenseMatrix};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an embedding file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: truncated embedding file")]
    Truncated { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> EmbedError {
    EmbedError::Io { path: path.display().to_string(), source }
}

/// Walk and skip-gram hyperparameters. The (p, q) pair biases second-order
/// transitions: weight 1/p to return, 1 to stay at distance one, 1/q to move
/// outward.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub return_param_p: f64,
    pub inout_param_q: f64,
    pub window: usize,
    pub negatives: usize,
    pub sgns_epochs: usize,
    pub sgns_lr: f64,
    pub dim: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_length: 40,
            return_param_p: 1.0,
            inout_param_q: 1.0,
            window: 5,
            negatives: 5,
            sgns_epochs: 5,
            sgns_lr: 0.025,
            dim: 64,
        }
    }
}

/// Node vectors, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: DenseMatrix,
}

const MAGIC: &[u8; 5] = b"D2EMB";

impl EmbeddingTable {
    pub fn n_nodes(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn row(&self, node: usize) -> &[f64] {
        self.vectors.row(node)
    }

    /// Flat binary layout: magic `D2EMB`, u32 n_nodes, u32 dim
    /// (little-endian), then row-major f32 values.
    pub fn write_binary(&self, path: &Path) -> Result<(), EmbedError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
        emit(MAGIC)?;
        emit(&(self.n_nodes() as u32).to_le_bytes())?;
        emit(&(self.dim() as u32).to_le_bytes())?;
        for &v in &self.vectors.values {
            emit(&(v as f32).to_le_bytes())?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self, EmbedError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != MAGIC {
            return Err(EmbedError::BadMagic { path: path.display().to_string() });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| io_err(path, e))?;
        let n_nodes = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|e| io_err(path, e))?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(n_nodes * dim);
        for _ in 0..n_nodes * dim {
            r.read_exact(&mut word)
                .map_err(|_| EmbedError::Truncated { path: path.display().to_string() })?;
            values.push(f32::from_le_bytes(word) as f64);
        }
        Ok(Self { vectors: DenseMatrix::from_vec(n_nodes, dim, values) })
    }

    /// Human-readable export: `node_idx,v0,v1,...`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EmbedError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        for node in 0..self.n_nodes() {
            let mut line = node.to_string();
            for v in self.row(node) {
                line.push(',');
                line.push_str(&format!("{v:.6}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Generate `walks_per_node` biased walks of `walk_length` nodes from every
/// node with degree >= 1. Per-walk RNG streams are derived from the seed, so
/// the output is independent of traversal batching.
pub fn generate_walks(adjacency: &[Vec<u32>], cfg: &WalkConfig, seed: u64) -> Vec<Vec<u32>> {
    let n_nodes = adjacency.len();
    let sorted: Vec<Vec<u32>> = adjacency
        .iter()
        .map(|nbrs| {
            let mut s = nbrs.clone();
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();

    let mut walks = Vec::with_capacity(n_nodes * cfg.walks_per_node);
    for round in 0..cfg.walks_per_node {
        for start in 0..n_nodes {
            if adjacency[start].is_empty() {
                continue;
            }
            let stream = (round * n_nodes + start) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
            walks.push(single_walk(adjacency, &sorted, cfg, start as u32, &mut rng));
        }
    }
    walks
}

fn single_walk(
    adjacency: &[Vec<u32>],
    sorted: &[Vec<u32>],
    cfg: &WalkConfig,
    start: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut walk = Vec::with_capacity(cfg.walk_length);
    walk.push(start);
    if cfg.walk_length == 1 {
        return walk;
    }
    let first_nbrs = &adjacency[start as usize];
    let mut current = first_nbrs[rng.random_range(0..first_nbrs.len())];
    walk.push(current);
    let mut prev = start;
    while walk.len() < cfg.walk_length {
        let next = biased_step(adjacency, sorted, cfg, prev, current, rng);
        walk.push(next);
        prev = current;
        current = next;
    }
    walk
}

/// One second-order transition from `current`, having arrived from `prev`.
fn biased_step(
    adjacency: &[Vec<u32>],
    sorted: &[Vec<u32>],
    cfg: &WalkConfig,
    prev: u32,
    current: u32,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let nbrs = &adjacency[current as usize];
    if nbrs.len() == 1 {
        return nbrs[0];
    }
    let prev_nbrs = &sorted[prev as usize];
    let mut weights = Vec::with_capacity(nbrs.len());
    let mut total = 0.0;
    for &x in nbrs {
        let w = if x == prev {
            1.0 / cfg.return_param_p
        } else if prev_nbrs.binary_search(&x).is_ok() {
            1.0
        } else {
            1.0 / cfg.inout_param_q
        };
        total += w;
        weights.push(w);
    }
    let mut draw = rng.random_range(0.0..total);
    for (k, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return nbrs[k];
        }
    }
    *nbrs.last().unwrap()
}

/// Skip-gram with negative sampling over within-window co-occurrences.
/// Negatives come from the unigram^0.75 distribution of walk tokens.
pub fn train_skipgram(
    walks: &[Vec<u32>],
    cfg: &WalkConfig,
    n_nodes: usize,
    seed: u64,
) -> EmbeddingTable {
    train_skipgram_logged(walks, cfg, n_nodes, seed).0
}

/// Like [`train_skipgram`], also returning the mean log-sigmoid score over
/// positive (center, context) pairs measured after each epoch.
pub fn train_skipgram_logged(
    walks: &[Vec<u32>],
    cfg: &WalkConfig,
    n_nodes: usize,
    seed: u64,
) -> (EmbeddingTable, Vec<f64>) {
    assert!(!walks.is_empty(), "skip-gram training needs at least one walk");
    let dim = cfg.dim;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let bound = 0.5 / dim as f64;
    let mut target = DenseMatrix::from_vec(
        n_nodes,
        dim,
        (0..n_nodes * dim).map(|_| init_rng.random_range(-bound..bound)).collect(),
    );
    let mut context = DenseMatrix::zeros(n_nodes, dim);

    // Unigram^0.75 cumulative table over walk token counts.
    let mut counts = vec![0u64; n_nodes];
    for walk in walks {
        for &node in walk {
            counts[node as usize] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(n_nodes);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let total_weight = acc;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut objective_log = Vec::with_capacity(cfg.sgns_epochs);
    let mut center_delta = vec![0.0; dim];

    for _epoch in 0..cfg.sgns_epochs {
        for walk in walks {
            for (pos, &center) in walk.iter().enumerate() {
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window + 1).min(walk.len());
                for ctx_pos in lo..hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let ctx = walk[ctx_pos];
                    center_delta.iter_mut().for_each(|d| *d = 0.0);

                    // Positive pair plus `negatives` sampled labels. A draw
                    // that collides with the true context is skipped rather
                    // than redrawn (a one-node vocabulary could never
                    // produce anything else).
                    for neg_k in 0..=cfg.negatives {
                        let (out_node, label) = if neg_k == 0 {
                            (ctx, 1.0)
                        } else {
                            let draw = rng.random_range(0.0..total_weight);
                            let sampled = cumulative.partition_point(|&c| c <= draw) as u32;
                            if sampled == ctx {
                                continue;
                            }
                            (sampled, 0.0)
                        };
                        let dot: f64 = target
                            .row(center as usize)
                            .iter()
                            .zip(context.row(out_node as usize))
                            .map(|(&a, &b)| a * b)
                            .sum();
                        let g = cfg.sgns_lr * (label - sigmoid(dot));
                        let crow = target.row(center as usize);
                        let orow = context.row(out_node as usize);
                        for d in 0..dim {
                            center_delta[d] += g * orow[d];
                        }
                        let new_orow: Vec<f64> =
                            (0..dim).map(|d| orow[d] + g * crow[d]).collect();
                        context.row_mut(out_node as usize).copy_from_slice(&new_orow);
                    }
                    let crow = target.row_mut(center as usize);
                    for d in 0..dim {
                        crow[d] += center_delta[d];
                    }
                }
            }
        }
        objective_log.push(positive_pair_objective(&target, &context, walks, cfg.window));
    }

    (EmbeddingTable { vectors: target }, objective_log)
}

fn positive_pair_objective(
    target: &DenseMatrix,
    context: &DenseMatrix,
    walks: &[Vec<u32>],
    window: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0u64;
    for walk in walks {
        for (pos, &center) in walk.iter().enumerate() {
            let lo = pos.saturating_sub(window);
            let hi = (pos + window + 1).min(walk.len());
            for ctx_pos in lo..hi {
                if ctx_pos == pos {
                    continue;
                }
                let dot: f64 = target
                    .row(center as usize)
                    .iter()
                    .zip(context.row(walk[ctx_pos] as usize))
                    .map(|(&a, &b)| a * b)
                    .sum();
                sum += sigmoid(dot).max(1e-12).ln();
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// User vectors from walks over the social graph only.
pub fn user_embeddings(ds: &Dataset, cfg: &WalkConfig, seed: u64) -> EmbeddingTable {
    let walks = generate_walks(&ds.social_adj, cfg, derive_seed(seed, 100));
    train_skipgram(&walks, cfg, ds.n_users, derive_seed(seed, 101))
}

/// Item vectors from walks over the user-item bipartite graph; only item
/// rows are returned. Items with no interactions keep their seeded random
/// initialization.
pub fn item_embeddings(ds: &Dataset, cfg: &WalkConfig, seed: u64) -> EmbeddingTable {
    let walks = generate_walks(&ds.bipartite_adj, cfg, derive_seed(seed, 200));
    let joint = train_skipgram(&walks, cfg, ds.n_users + ds.n_items, derive_seed(seed, 201));
    let mut values = Vec::with_capacity(ds.n_items * cfg.dim);
    for item in 0..ds.n_items {
        values.extend_from_slice(joint.row(ds.n_users + item));
    }
    EmbeddingTable { vectors: DenseMatrix::from_vec(ds.n_items, cfg.dim, values) }
}
