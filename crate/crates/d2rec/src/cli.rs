//! File-based orchestration of the full pipeline. One JSON config document
//! drives every subcommand; each run copies its resolved config next to its
//! outputs so any artifact can be reproduced from the directory alone.
//!
//! Commands compose through files in the output directory:
//! `synth` writes ratings/trust/oracle, `split` the train/test partitions
//! and popularity subsets, `embed` the node-embedding tables, `train` a
//! checkpoint with history, `eval` the metric reports, `ablate` the
//! three-variant comparison, and `gradcheck` verifies the analytic
//! gradients of the full objective.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    self, build_dataset, load_ratings, load_social, read_ratings_csv, read_test_subset,
    write_ratings_csv, DataError, Dataset, Rating,
};
use crate::derive_seed;
use crate::evaluator::{evaluate, write_metrics_csv, MetricsReport, RankingProtocol, SeenItems};
use crate::graph_embed::{item_embeddings, user_embeddings, EmbeddingTable, WalkConfig};
use crate::model::{D2RecParams, ModelSidecar, RatingPredictor, ToySpec, Variant};
use crate::synth::{generate, unbiased_testset, SynthConfig};
use crate::trainer::{train, TrainConfig};

/// Exit classification: 1 usage/config, 2 runtime failure, 3 verification
/// failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: max relative error {max_rel_error} exceeds {tolerance}")]
    Verification { max_rel_error: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification { .. } => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}
runtime_from!(
    crate::graph_embed::EmbedError,
    crate::model::ModelError,
    crate::trainer::TrainError,
    crate::evaluator::EvalError,
    crate::synth::SynthError,
    std::io::Error
);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Ratings CSV (`user_id,item_id,rating`); defaults to
    /// `<out>/ratings.csv`.
    pub ratings: Option<PathBuf>,
    /// Trust CSV (`truster,trustee`); defaults to `<out>/trust.csv`.
    pub trust: Option<PathBuf>,
    pub has_header: bool,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { ratings: None, trust: None, has_header: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.6, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSection {
    pub seed: u64,
    /// Also write `theta.csv` / `beta.csv` for inspection.
    pub export_csv: bool,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self { seed: 42, export_csv: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Clamp predictions to [1, 5] at evaluation time.
    pub clamp_predictions: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { clamp_predictions: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSection {
    pub toy: ToySpec,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { toy: ToySpec::default(), h: 1e-5, tolerance: 1e-4 }
    }
}

/// The single configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub split: SplitSection,
    /// Popularity levels for the debiased test subsets.
    pub popularity: Vec<usize>,
    /// Appearances per item in the synthetic unbiased test set.
    pub unbiased_n_per_item: usize,
    pub walk: WalkConfig,
    pub embed: EmbedSection,
    pub train: TrainConfig,
    pub ranking: RankingProtocol,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            split: SplitSection::default(),
            popularity: vec![2, 3, 5, 10],
            unbiased_n_per_item: 5,
            walk: WalkConfig::default(),
            embed: EmbedSection::default(),
            train: TrainConfig::default(),
            ranking: RankingProtocol::default(),
            eval: EvalSection::default(),
            synth: SynthConfig::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        // Field-path errors: `config x.json: train.batch_size: invalid type ...`.
        serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::Usage(format!("config {}: {}: {}", path.display(), e.path(), e.inner())))
    }

    /// A single `--seed` override rederives every section seed so one flag
    /// pins the whole pipeline.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = derive_seed(seed, 1);
        self.split.seed = derive_seed(seed, 2);
        self.embed.seed = derive_seed(seed, 3);
        self.train.seed = derive_seed(seed, 4);
        self.ranking.seed = derive_seed(seed, 5);
        self.gradcheck.toy.seed = derive_seed(seed, 6);
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.popularity.iter().any(|&n| n < 1) {
            return Err(CliError::Usage("popularity: every value must be >= 1".to_string()));
        }
        if self.unbiased_n_per_item < 1 {
            return Err(CliError::Usage("unbiased_n_per_item must be >= 1".to_string()));
        }
        Ok(())
    }
}

pub const RATINGS_FILE: &str = "ratings.csv";
pub const TRUST_FILE: &str = "trust.csv";
pub const ORACLE_FILE: &str = "oracle.json";
pub const UNBIASED_FILE: &str = "test_unbiased.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_POOL_FILE: &str = "test_pool.csv";
pub const THETA_FILE: &str = "theta.emb";
pub const BETA_FILE: &str = "beta.emb";
pub const CHECKPOINT_FILE: &str = "checkpoint.d2m";
pub const SIDECAR_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_UNBIASED_FILE: &str = "metrics_unbiased.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

pub fn subset_file(n: usize) -> String {
    format!("test_pop{n}.csv")
}

fn missing(path: &Path, producer: &str) -> CliError {
    CliError::Usage(format!(
        "{} not found; run `d2rec {producer}` first (or point the config at it)",
        path.display()
    ))
}

fn ratings_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.ratings.clone().unwrap_or_else(|| out.join(RATINGS_FILE))
}

fn trust_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.trust.clone().unwrap_or_else(|| out.join(TRUST_FILE))
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    let rpath = ratings_path(cfg, out);
    if !rpath.exists() {
        return Err(missing(&rpath, "synth"));
    }
    let records = load_ratings(&rpath, cfg.paths.has_header)?;
    let tpath = trust_path(cfg, out);
    let edges = if tpath.exists() { load_social(&tpath, cfg.paths.has_header)? } else { Vec::new() };
    Ok(build_dataset(&records, &edges)?)
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("serialize config: {e}")))?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), text + "\n")?;
    Ok(())
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// `synth`: write the generated ratings/trust files, the oracle sidecar,
/// and the unbiased test set.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let (ds, oracle) = generate(&cfg.synth)?;

    let mut ratings_text = String::new();
    for r in &ds.ratings {
        ratings_text.push_str(&format!(
            "{},{},{}\n",
            ds.user_ids[r.user as usize], ds.item_ids[r.item as usize], r.value
        ));
    }
    fs::write(ratings_path(cfg, out), ratings_text)?;

    let mut trust_text = String::new();
    for (u, adj) in ds.social_adj.iter().enumerate() {
        for &v in adj {
            if v as usize >= u {
                trust_text.push_str(&format!(
                    "{},{}\n",
                    ds.user_ids[u], ds.user_ids[v as usize]
                ));
            }
        }
    }
    let n_trust_lines = trust_text.lines().count();
    fs::write(trust_path(cfg, out), trust_text)?;

    oracle.write_json(&out.join(ORACLE_FILE))?;
    let unbiased = unbiased_testset(&oracle, cfg.unbiased_n_per_item, derive_seed(cfg.synth.seed, 99));
    write_ratings_csv(&out.join(UNBIASED_FILE), &unbiased.rows)?;
    write_resolved_config(cfg, out)?;
    println!(
        "synth: {} users, {} items, {} ratings, {} trust edges ({} forced exposures)",
        ds.n_users,
        ds.n_items,
        ds.ratings.len(),
        n_trust_lines,
        oracle.forced_user_exposures + oracle.forced_item_exposures
    );
    Ok(())
}

/// `split`: train/test partition plus one popularity-debiased subset per
/// configured level. Levels with no qualifying item are skipped with a
/// warning.
pub fn cmd_split(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let ds = load_dataset(cfg, out)?;
    let (train_ratings, test_pool) = dataio::split_train_test(&ds, cfg.split.train_fraction, cfg.split.seed)?;
    if train_ratings.is_empty() {
        eprintln!("split: warning: train partition is empty (fraction {} of {} ratings)",
            cfg.split.train_fraction, ds.ratings.len());
    }
    write_ratings_csv(&out.join(TRAIN_FILE), &train_ratings)?;
    write_ratings_csv(&out.join(TEST_POOL_FILE), &test_pool)?;
    for &n in &cfg.popularity {
        match dataio::make_popularity_subset(&test_pool, n, derive_seed(cfg.split.seed, n as u64)) {
            Ok(subset) => {
                write_ratings_csv(&out.join(subset_file(n)), &subset.rows)?;
                println!("split: popularity={n}: {} rows", subset.rows.len());
            }
            Err(DataError::EmptySubset { .. }) => {
                eprintln!("split: warning: popularity={n}: no item qualifies, subset skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_resolved_config(cfg, out)?;
    println!("split: train {} rows, test pool {} rows", train_ratings.len(), test_pool.len());
    Ok(())
}

/// `embed`: pretrain the user and item embedding tables.
pub fn cmd_embed(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let ds = load_dataset(cfg, out)?;
    let mut walk = cfg.walk.clone();
    walk.dim = cfg.train.d_emb;
    let theta = user_embeddings(&ds, &walk, cfg.embed.seed);
    let beta = item_embeddings(&ds, &walk, derive_seed(cfg.embed.seed, 1));
    theta.write_binary(&out.join(THETA_FILE))?;
    beta.write_binary(&out.join(BETA_FILE))?;
    if cfg.embed.export_csv {
        theta.write_csv(&out.join("theta.csv"))?;
        beta.write_csv(&out.join("beta.csv"))?;
    }
    let untrained = ds.items_without_ratings();
    if !untrained.is_empty() {
        eprintln!("embed: warning: {} items have no interactions; their rows are random init", untrained.len());
    }
    write_resolved_config(cfg, out)?;
    println!("embed: theta {}x{}, beta {}x{}", theta.n_nodes(), theta.dim(), beta.n_nodes(), beta.dim());
    Ok(())
}

fn load_train_split(out: &Path) -> Result<Vec<Rating>, CliError> {
    let path = out.join(TRAIN_FILE);
    if !path.exists() {
        return Err(missing(&path, "split"));
    }
    Ok(read_ratings_csv(&path)?)
}

fn load_embeddings(
    cfg: &TrainConfig,
    out: &Path,
) -> Result<(Option<EmbeddingTable>, Option<EmbeddingTable>), CliError> {
    if cfg.variant == Variant::NoNetworkEmbeddings {
        return Ok((None, None));
    }
    let tpath = out.join(THETA_FILE);
    if !tpath.exists() {
        return Err(missing(&tpath, "embed"));
    }
    let bpath = out.join(BETA_FILE);
    if !bpath.exists() {
        return Err(missing(&bpath, "embed"));
    }
    Ok((Some(EmbeddingTable::read_binary(&tpath)?), Some(EmbeddingTable::read_binary(&bpath)?)))
}

fn run_training(
    cfg: &RunConfig,
    out: &Path,
    train_cfg: &TrainConfig,
    tag: Option<&str>,
) -> Result<(), CliError> {
    let ds = load_dataset(cfg, out)?;
    let train_ratings = load_train_split(out)?;
    let (theta, beta) = load_embeddings(train_cfg, out)?;
    let outcome = train(&ds, theta.as_ref(), beta.as_ref(), &train_ratings, train_cfg)?;

    let suffix = tag.map(|t| format!("_{t}")).unwrap_or_default();
    let ckpt = out.join(format!("checkpoint{suffix}.d2m"));
    let sidecar_path = out.join(format!("model{suffix}.json"));
    let history_path = out.join(format!("history{suffix}.csv"));
    outcome.params.save_checkpoint(&ckpt)?;
    let sidecar = ModelSidecar {
        variant: train_cfg.variant,
        d_emb: train_cfg.d_emb,
        d_factor: train_cfg.d_factor(),
        kappa: train_cfg.kappa,
        omega_max: train_cfg.omega_max,
        reweight_mode: train_cfg.reweight_mode,
        exposure_logit_bias: train_cfg.exposure_logit_bias,
        positive_rate: outcome.positive_rate,
        seed: train_cfg.seed,
        fine_tuned: train_cfg.fine_tune_embeddings,
    };
    sidecar.write_json(&sidecar_path)?;
    outcome.history.write_csv(&history_path)?;
    println!(
        "train{}: {} epochs, best epoch {}, best train MSE {:.6}",
        suffix,
        outcome.history.epochs.len(),
        outcome.best_epoch,
        outcome.history.epochs.get(outcome.best_epoch).map(|r| r.train_mse).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// `train`: fit the configured variant on the train split.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    run_training(cfg, out, &cfg.train, None)?;
    write_resolved_config(cfg, out)?;
    Ok(())
}

struct LoadedModel {
    params: D2RecParams,
    sidecar: ModelSidecar,
    theta: Option<EmbeddingTable>,
    beta: Option<EmbeddingTable>,
}

fn load_model(cfg: &RunConfig, out: &Path, suffix: &str) -> Result<LoadedModel, CliError> {
    let sidecar_path = out.join(format!("model{suffix}.json"));
    if !sidecar_path.exists() {
        return Err(missing(&sidecar_path, "train"));
    }
    let sidecar = ModelSidecar::read_json(&sidecar_path)?;
    let ckpt = out.join(format!("checkpoint{suffix}.d2m"));
    if !ckpt.exists() {
        return Err(missing(&ckpt, "train"));
    }
    let load_free = sidecar.variant == Variant::NoNetworkEmbeddings || sidecar.fine_tuned;
    let params = D2RecParams::load_checkpoint_with(&ckpt, sidecar.variant, load_free)?;
    let (theta, beta) = if load_free {
        (None, None)
    } else {
        let mut train_cfg = cfg.train.clone();
        train_cfg.variant = sidecar.variant;
        load_embeddings(&train_cfg, out)?
    };
    Ok(LoadedModel { params, sidecar, theta, beta })
}

fn eval_model(
    cfg: &RunConfig,
    out: &Path,
    model: &LoadedModel,
) -> Result<(Vec<MetricsReport>, Option<MetricsReport>), CliError> {
    let ds = load_dataset(cfg, out)?;
    let train_ratings = load_train_split(out)?;
    let pool_path = out.join(TEST_POOL_FILE);
    if !pool_path.exists() {
        return Err(missing(&pool_path, "split"));
    }
    let test_pool = read_ratings_csv(&pool_path)?;
    let seen = SeenItems {
        per_user: Dataset::seen_items(ds.n_users, &[&train_ratings, &test_pool]),
    };

    let model_cfg = model.sidecar.model_config();
    let fallback = EmbeddingTable { vectors: crate::nncore::DenseMatrix::zeros(0, 0) };
    let (theta_src, beta_src) = RatingPredictor::resolve_tables(
        &model.params,
        model.theta.as_ref().unwrap_or(&fallback),
        model.beta.as_ref().unwrap_or(&fallback),
    );
    let predictor = RatingPredictor {
        params: &model.params,
        cfg: &model_cfg,
        theta: theta_src,
        beta: beta_src,
        positive_rate: model.sidecar.positive_rate,
        clamp_predictions: cfg.eval.clamp_predictions,
    };

    let mut reports = Vec::new();
    for &n in &cfg.popularity {
        let path = out.join(subset_file(n));
        if !path.exists() {
            eprintln!("eval: warning: {} missing, skipped", path.display());
            continue;
        }
        let subset = read_test_subset(&path, n)?;
        let mut protocol = cfg.ranking.clone();
        protocol.seed = derive_seed(cfg.ranking.seed, n as u64);
        reports.push(evaluate(&predictor, &subset, &protocol, &seen, ds.n_items)?);
    }

    let unbiased_path = out.join(UNBIASED_FILE);
    let unbiased_report = if unbiased_path.exists() {
        let subset = read_test_subset(&unbiased_path, cfg.unbiased_n_per_item)?;
        let mut protocol = cfg.ranking.clone();
        protocol.seed = derive_seed(cfg.ranking.seed, 100_000);
        Some(evaluate(&predictor, &subset, &protocol, &seen, ds.n_items)?)
    } else {
        None
    };
    Ok((reports, unbiased_report))
}

/// `eval`: metric reports for every available popularity subset (and the
/// unbiased synthetic set when present).
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let model = load_model(cfg, out, "")?;
    let (reports, unbiased) = eval_model(cfg, out, &model)?;
    if reports.is_empty() && unbiased.is_none() {
        return Err(CliError::Usage(
            "eval: no test subset found; run `d2rec split` (or `d2rec synth`) first".to_string(),
        ));
    }
    write_metrics_csv(&out.join(METRICS_FILE), &reports)?;
    for r in &reports {
        println!(
            "eval: popularity={} mae={:.4} mse={:.4} hr@{}={:.4} ndcg@{}={:.4}",
            r.subset_popularity, r.mae, r.mse, cfg.ranking.k, r.hr_at_k, cfg.ranking.k, r.ndcg_at_k
        );
    }
    if let Some(r) = unbiased {
        write_metrics_csv(&out.join(METRICS_UNBIASED_FILE), &[r.clone()])?;
        println!(
            "eval: unbiased mae={:.4} mse={:.4} hr@{}={:.4} ndcg@{}={:.4}",
            r.mae, r.mse, cfg.ranking.k, r.hr_at_k, cfg.ranking.k, r.ndcg_at_k
        );
    }
    write_resolved_config(cfg, out)?;
    Ok(())
}

const ABLATION_VARIANTS: [(Variant, &str); 3] = [
    (Variant::Full, "full"),
    (Variant::NoNetworkEmbeddings, "nonet"),
    (Variant::NoDisentanglement, "nodisent"),
];

/// `ablate`: train all three variants with identical settings and write the
/// side-by-side MAE/MSE table.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let mut rows: Vec<(String, Vec<MetricsReport>, Option<MetricsReport>)> = Vec::new();
    for (variant, tag) in ABLATION_VARIANTS {
        let mut tcfg = cfg.train.clone();
        tcfg.variant = variant;
        run_training(cfg, out, &tcfg, Some(tag))?;
        let model = load_model(cfg, out, &format!("_{tag}"))?;
        let (reports, unbiased) = eval_model(cfg, out, &model)?;
        rows.push((tag.to_string(), reports, unbiased));
    }

    // Wide layout mirroring the per-popularity MAE/MSE comparison tables.
    let mut header = "variant".to_string();
    let labels: Vec<String> = rows[0].1.iter().map(|r| format!("pop{}", r.subset_popularity)).collect();
    for label in &labels {
        header.push_str(&format!(",mae_{label},mse_{label}"));
    }
    if rows[0].2.is_some() {
        header.push_str(",mae_unbiased,mse_unbiased");
    }
    let mut text = header + "\n";
    for (tag, reports, unbiased) in &rows {
        let mut line = tag.clone();
        for r in reports {
            line.push_str(&format!(",{:.6},{:.6}", r.mae, r.mse));
        }
        if let Some(r) = unbiased {
            line.push_str(&format!(",{:.6},{:.6}", r.mae, r.mse));
        }
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(out.join(ABLATION_FILE), text)?;
    write_resolved_config(cfg, out)?;
    println!("ablate: wrote {}", out.join(ABLATION_FILE).display());
    Ok(())
}

/// `gradcheck`: finite-difference verification of the full objective.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(out)?;
    let report = crate::model::full_gradient_check(&cfg.gradcheck.toy, cfg.gradcheck.h)?;
    println!(
        "gradcheck: max relative error {:.3e} over {} parameters (worst index {})",
        report.max_rel_error, report.n_params, report.worst_index
    );
    write_resolved_config(cfg, out)?;
    if report.max_rel_error < cfg.gradcheck.tolerance {
        println!("gradcheck: PASS (tolerance {:.1e})", cfg.gradcheck.tolerance);
        Ok(())
    } else {
        Err(CliError::Verification {
            max_rel_error: report.max_rel_error,
            tolerance: cfg.gradcheck.tolerance,
        })
    }
}

/// Convenience wrapper so tests and `main` share one entry point.
pub fn run_command(command: &str, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match command {
        "synth" => cmd_synth(cfg, out),
        "split" => cmd_split(cfg, out),
        "embed" => cmd_embed(cfg, out),
        "train" => cmd_train(cfg, out),
        "eval" => cmd_eval(cfg, out),
        "ablate" => cmd_ablate(cfg, out),
        "gradcheck" => cmd_gradcheck(cfg, out),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::defaults();
        cfg.synth = SynthConfig {
            n_users: 30,
            n_items: 40,
            target_density: 0.10,
            social_knn: 3,
            seed: 5,
            ..SynthConfig::default()
        };
        cfg.popularity = vec![2, 3];
        cfg.unbiased_n_per_item = 2;
        cfg.walk = WalkConfig {
            walks_per_node: 4,
            walk_length: 10,
            sgns_epochs: 2,
            dim: 6,
            ..WalkConfig::default()
        };
        cfg.train = TrainConfig {
            d_emb: 6,
            d_factor: Some(4),
            batch_size: 32,
            max_epochs: 2,
            patience: 2,
            lr: 0.01,
            ..TrainConfig::default()
        };
        cfg.ranking.candidates_per_positive = 20;
        cfg
    }

    fn fresh_out(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("d2rec-cli-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pipeline_composes_through_files() {
        let cfg = tiny_config();
        let out = fresh_out("pipeline");
        cmd_synth(&cfg, &out).unwrap();
        cmd_split(&cfg, &out).unwrap();
        cmd_embed(&cfg, &out).unwrap();
        cmd_train(&cfg, &out).unwrap();
        cmd_eval(&cfg, &out).unwrap();
        for file in [
            RATINGS_FILE,
            TRUST_FILE,
            ORACLE_FILE,
            UNBIASED_FILE,
            TRAIN_FILE,
            TEST_POOL_FILE,
            THETA_FILE,
            BETA_FILE,
            CHECKPOINT_FILE,
            SIDECAR_FILE,
            HISTORY_FILE,
            METRICS_FILE,
            METRICS_UNBIASED_FILE,
            RESOLVED_CONFIG_FILE,
        ] {
            assert!(out.join(file).exists(), "{file} missing");
        }
        let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
        // Header plus one row per configured popularity level.
        assert_eq!(metrics.lines().count(), 1 + cfg.popularity.len());
    }

    #[test]
    fn missing_artifacts_name_the_producer() {
        let cfg = tiny_config();
        let out = fresh_out("missing");
        let err = cmd_split(&cfg, &out).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(err.to_string().contains("synth"), "got: {err}");
        assert_eq!(err.exit_code(), 1);

        cmd_synth(&cfg, &out).unwrap();
        let err = cmd_train(&cfg, &out).unwrap_err();
        assert!(err.to_string().contains("split"), "got: {err}");

        cmd_split(&cfg, &out).unwrap();
        let err = cmd_train(&cfg, &out).unwrap_err();
        assert!(err.to_string().contains("embed"), "got: {err}");
    }

    #[test]
    fn config_schema_violation_is_usage_error() {
        let dir = fresh_out("badcfg");
        let path = dir.join("config.json");
        fs::write(&path, "{\"train\": {\"batch_size\": \"big\"}}").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("batch_size"), "got: {err}");
    }

    #[test]
    fn gradcheck_passes_on_defaults() {
        let mut cfg = tiny_config();
        cfg.gradcheck.toy = ToySpec { n_users: 4, n_items: 4, d_emb: 5, d_factor: 3, batch_size: 4, seed: 2 };
        let out = fresh_out("gradcheck");
        cmd_gradcheck(&cfg, &out).unwrap();
    }

    #[test]
    fn seed_override_rederives_sections() {
        let mut a = tiny_config();
        let mut b = tiny_config();
        a.override_seed(7);
        b.override_seed(7);
        assert_eq!(a.synth.seed, b.synth.seed);
        b.override_seed(8);
        assert_ne!(a.synth.seed, b.synth.seed);
        assert_ne!(a.synth.seed, a.split.seed);
    }
}
