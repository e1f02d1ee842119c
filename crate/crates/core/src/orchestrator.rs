//! The tiered-hardness selection loop and its baselines.
//!
//! A round selects hard items with an active-learning strategy, intermediate
//! items with per-class SMI suggestions, and easy items by highest
//! confidence, in that order and disjointly. Hard and intermediate items go
//! to an annotator together with their suggested labels; easy items keep
//! their predicted label at zero cost. The model is then retrained from
//! scratch.
//!
//! Selection and application are split ([`select_round`] / [`apply_round`])
//! so that a live labeling session can sit between them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{self, cost_from_counts, OracleConfig, OracleMode, TimingRecord};
use crate::data::{self, Dataset, PoolState};
use crate::error::{Error, Result};
use crate::kernels::DEFAULT_LAMBDA;
use crate::model::{self, Layer, ModelParams, TrainConfig};
use crate::rng::{self, derive_seed};
use crate::smi;
use crate::tier_select::{self, SelectionBatch, Tier};

// seed-derivation tags
const TAG_RUN: u64 = 0x52554e;
const TAG_TEST: u64 = 0x54455354;
const TAG_POOL: u64 = 0x504f4f4c;
const TAG_TRAIN: u64 = 0x545241494e;
const TAG_HARD: u64 = 0x48415244;
const TAG_INT: u64 = 0x494e54;
const TAG_BADGE: u64 = 0x4241444745;
const TAG_ORACLE: u64 = 0x4f5243;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Clarifier,
    AlSuggest,
    AlPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AlStrategy {
    Entropy,
    Badge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            num_classes: 20,
            per_class: 100,
            dim: 3,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic {
                num_classes,
                per_class,
                dim,
                spread,
                seed,
            } => data::generate_blobs(*num_classes, *per_class, *dim, *spread, *seed),
            DatasetSource::File { path } => data::load_dataset(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Fraction of the dataset held out for test accuracy.
    pub test_fraction: f64,
    pub seed_size: usize,
    pub b1: usize,
    pub b2: usize,
    pub b3: usize,
    pub rounds: usize,
    pub method: Method,
    pub al_strategy: AlStrategy,
    pub num_partitions: usize,
    pub c_a: f64,
    pub c_v: f64,
    pub train: TrainConfig,
    pub annotator: OracleMode,
    pub timing_noise: f64,
    pub lambda: f64,
    /// Optional floor on auto-label confidence; `None` is pure top-b3.
    pub auto_label_threshold: Option<f64>,
    /// In mlp mode, keep the round-0 hidden layer fixed and retrain only the head.
    pub freeze_hidden: bool,
    pub rng_seed: u64,
    pub runs: usize,
    pub thread_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            test_fraction: 0.25,
            seed_size: 100,
            b1: 20,
            b2: 40,
            b3: 20,
            rounds: 8,
            method: Method::Clarifier,
            al_strategy: AlStrategy::Entropy,
            num_partitions: 1,
            c_a: 3.0,
            c_v: 1.0,
            train: TrainConfig::default(),
            annotator: OracleMode::Perfect,
            timing_noise: 0.0,
            lambda: DEFAULT_LAMBDA,
            auto_label_threshold: None,
            freeze_hidden: false,
            rng_seed: 0,
            runs: 1,
            thread_count: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn total_budget(&self) -> usize {
        self.b1 + self.b2 + self.b3
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_budget() == 0 {
            return Err(Error::invalid("b1 + b2 + b3 must be >= 1"));
        }
        if self.num_partitions == 0 {
            return Err(Error::invalid("num_partitions must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "test_fraction must be in (0,1), got {}",
                self.test_fraction
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        self.oracle(0).validate()?;
        self.train.validate()
    }

    pub fn oracle(&self, seed: u64) -> OracleConfig {
        OracleConfig {
            mode: self.annotator,
            c_a: self.c_a,
            c_v: self.c_v,
            timing_noise: self.timing_noise,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStats {
    pub selected: usize,
    pub suggestion_correct: usize,
}

impl TierStats {
    pub fn suggestion_accuracy(&self) -> Option<f64> {
        (self.selected > 0).then(|| self.suggestion_correct as f64 / self.selected as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiers {
    pub hard: TierStats,
    pub intermediate: TierStats,
    pub easy: TierStats,
}

impl Tiers {
    pub fn get(&self, tier: Tier) -> &TierStats {
        match tier {
            Tier::Hard => &self.hard,
            Tier::Intermediate => &self.intermediate,
            Tier::Easy => &self.easy,
        }
    }

    fn get_mut(&mut self, tier: Tier) -> &mut TierStats {
        match tier {
            Tier::Hard => &mut self.hard,
            Tier::Intermediate => &mut self.intermediate,
            Tier::Easy => &mut self.easy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub cost_round: f64,
    pub cost_cumulative: f64,
    pub tiers: Tiers,
    /// Not serialized: results files must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Results file layout, one per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub records: Vec<RoundRecord>,
    /// The run stopped early because the unlabeled pool could not cover a round's budget.
    pub truncated: bool,
    pub timings: Vec<TimingRecord>,
}

impl RunResult {
    /// (cumulative cost, test accuracy) per round.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.cost_cumulative, r.test_accuracy))
            .collect()
    }
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub run_seed: u64,
    pub test: Vec<usize>,
    pub pool: PoolState,
    pub model: ModelParams,
    pub round: usize,
    pub cost_cumulative: f64,
    pub frozen_hidden: Option<Layer>,
}

/// One round's three disjoint batches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundSelection {
    pub hard: SelectionBatch,
    pub intermediate: SelectionBatch,
    pub easy: SelectionBatch,
}

impl RoundSelection {
    /// Items routed to the annotator, hard first.
    pub fn annotated(&self) -> impl Iterator<Item = &tier_select::SelectedItem> {
        self.hard.items.iter().chain(&self.intermediate.items)
    }

    pub fn len(&self) -> usize {
        self.hard.len() + self.intermediate.len() + self.easy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn run_seed(cfg: &ExperimentConfig, run: usize) -> u64 {
    derive_seed(cfg.rng_seed, &[TAG_RUN, run as u64])
}

fn train_for_round(
    state_seed: u64,
    round: usize,
    pool: &PoolState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    frozen: Option<&Layer>,
) -> Result<ModelParams> {
    let train_cfg = TrainConfig {
        rng_seed: derive_seed(state_seed, &[TAG_TRAIN, round as u64]),
        ..cfg.train.clone()
    };
    model::train_with_history(pool, ds, &train_cfg, frozen).map(|(m, _)| m)
}

/// Holds out the test split, seeds the labeled pool and trains the round-0
/// model. Returns the state and the round-0 record.
pub fn prepare_run(cfg: &ExperimentConfig, ds: &Dataset, run: usize) -> Result<(RunState, RoundRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = run_seed(cfg, run);
    let n_test = ((ds.len() as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= ds.len() {
        return Err(Error::invalid(format!(
            "test split of {n_test} rows out of {}",
            ds.len()
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let split = data::partition_unlabeled(&all, 1, 0, derive_seed(seed, &[TAG_TEST]))?;
    let shuffled = &split.chunks[0];
    let mut test = shuffled[..n_test].to_vec();
    test.sort_unstable();
    let mut train_idx = shuffled[n_test..].to_vec();
    train_idx.sort_unstable();

    let pool = data::split_pools_from(ds, &train_idx, cfg.seed_size, derive_seed(seed, &[TAG_POOL]))?;
    let model = train_for_round(seed, 0, &pool, ds, cfg, None)?;
    let frozen_hidden = if cfg.freeze_hidden { model.hidden.clone() } else { None };
    let test_accuracy = model.accuracy(ds, &test)?;
    let record = RoundRecord {
        round: 0,
        test_accuracy,
        cost_round: 0.0,
        cost_cumulative: 0.0,
        tiers: Tiers::default(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((
        RunState {
            run_seed: seed,
            test,
            pool,
            model,
            round: 0,
            cost_cumulative: 0.0,
            frozen_hidden,
        },
        record,
    ))
}

fn partitions(indices: &[usize], cfg: &ExperimentConfig, budget: usize, seed: u64) -> Result<data::Partitioning> {
    let parts = cfg.num_partitions.min(indices.len()).max(1);
    data::partition_unlabeled(indices, parts, budget, seed)
}

fn al_select(
    state: &RunState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    probs: &DMatrix<f64>,
    remaining: &[usize],
    budget: usize,
    seed: u64,
) -> Result<SelectionBatch> {
    let mut out = SelectionBatch::default();
    if budget == 0 {
        return Ok(out);
    }
    let parts = partitions(remaining, cfg, budget, seed)?;
    let embeddings = match cfg.al_strategy {
        AlStrategy::Badge => Some(
            state
                .model
                .grad_embeddings(&ds.rows_f64(&(0..ds.len()).collect::<Vec<_>>()), None)?,
        ),
        AlStrategy::Entropy => None,
    };
    for (p, (chunk, &b)) in parts.chunks.iter().zip(&parts.per_chunk_budget).enumerate() {
        let batch = match &embeddings {
            None => tier_select::entropy_select(probs, chunk, b)?,
            Some(emb) => tier_select::badge_select(emb, chunk, probs, b, derive_seed(seed, &[TAG_BADGE, p as u64]))?,
        };
        out.extend(batch);
    }
    Ok(out)
}

/// Chooses this round's batches without touching the pool.
pub fn select_round(state: &RunState, ds: &Dataset, cfg: &ExperimentConfig) -> Result<RoundSelection> {
    let budget = cfg.total_budget();
    let available = state.pool.unlabeled().len();
    if budget > available {
        return Err(Error::BudgetExhausted {
            requested: budget,
            available,
        });
    }
    let round = state.round as u64 + 1;
    let all: Vec<usize> = (0..ds.len()).collect();
    let probs = state.model.predict_proba(&ds.rows_f64(&all))?;
    let mut remaining = state.pool.unlabeled_vec();
    let hard_seed = derive_seed(state.run_seed, &[TAG_HARD, round]);

    if cfg.method != Method::Clarifier {
        let hard = al_select(state, ds, cfg, &probs, &remaining, budget, hard_seed)?;
        return Ok(RoundSelection {
            hard,
            ..RoundSelection::default()
        });
    }

    let hard = al_select(state, ds, cfg, &probs, &remaining, cfg.b1, hard_seed)?;
    let taken: std::collections::HashSet<usize> = hard.indices().into_iter().collect();
    remaining.retain(|i| !taken.contains(i));

    let mut intermediate = SelectionBatch::default();
    if cfg.b2 > 0 {
        let quotas = smi::compute_quotas(&state.pool, ds.num_classes(), cfg.b2)?;
        let parts = partitions(&remaining, cfg, 0, derive_seed(state.run_seed, &[TAG_INT, round]))?;
        let split = smi::split_quotas(&quotas, parts.chunks.len());
        for (chunk, q) in parts.chunks.iter().zip(&split) {
            intermediate.extend(smi::smi_select(&state.pool, ds, &state.model, chunk, q, cfg.lambda)?);
        }
        let taken: std::collections::HashSet<usize> = intermediate.indices().into_iter().collect();
        remaining.retain(|i| !taken.contains(i));
    }

    let easy = tier_select::auto_label_select(&probs, &remaining, cfg.b3, cfg.auto_label_threshold)?;
    Ok(RoundSelection {
        hard,
        intermediate,
        easy,
    })
}

/// Simulated annotation of the selection's annotated items, in order.
pub fn simulate_annotations(
    state: &RunState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    sel: &RoundSelection,
) -> Vec<TimingRecord> {
    let seed = derive_seed(state.run_seed, &[TAG_ORACLE, state.round as u64 + 1]);
    let oracle = cfg.oracle(seed);
    let mut rng = rng::seeded(seed);
    sel.annotated()
        .map(|it| {
            annotate::oracle_annotate(
                it.index,
                it.suggested_label,
                ds.label(it.index),
                ds.num_classes(),
                &oracle,
                &mut rng,
            )
        })
        .collect()
}

/// Commits labels, charges cost, retrains and evaluates.
///
/// `annotations` must correspond one-to-one, in order, with
/// [`RoundSelection::annotated`].
pub fn apply_round(
    state: &mut RunState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    sel: &RoundSelection,
    annotations: &[TimingRecord],
) -> Result<RoundRecord> {
    let start = Instant::now();
    let annotated: Vec<_> = sel.annotated().collect();
    if annotated.len() != annotations.len() {
        return Err(Error::invalid(format!(
            "{} annotations for {} annotated items",
            annotations.len(),
            annotated.len()
        )));
    }
    let mut tiers = Tiers::default();
    for (item, rec) in annotated.iter().zip(annotations) {
        if item.index != rec.item {
            return Err(Error::invalid(format!(
                "annotation for {} does not match item {}",
                rec.item, item.index
            )));
        }
        let t = tiers.get_mut(item.tier);
        t.selected += 1;
        t.suggestion_correct += usize::from(rec.suggestion_correct);
    }
    for item in &sel.easy.items {
        tiers.easy.selected += 1;
        tiers.easy.suggestion_correct += usize::from(item.suggested_label == ds.label(item.index));
    }

    for (item, rec) in annotated.iter().zip(annotations) {
        state.pool.assign(item.index, rec.final_label)?;
    }
    for item in &sel.easy.items {
        state.pool.assign(item.index, item.suggested_label)?;
    }

    let kept: Vec<&TimingRecord> = annotations.iter().filter(|r| !r.discarded).collect();
    let n = kept.len();
    let n_correct = kept.iter().filter(|r| r.suggestion_correct).count();
    let cost_round = match cfg.method {
        Method::AlPlain => cost_from_counts(0, n, cfg.c_a, cfg.c_v),
        _ => cost_from_counts(n_correct, n, cfg.c_a, cfg.c_v),
    };

    state.round += 1;
    state.model = train_for_round(
        state.run_seed,
        state.round,
        &state.pool,
        ds,
        cfg,
        state.frozen_hidden.as_ref(),
    )?;
    state.cost_cumulative += cost_round;
    Ok(RoundRecord {
        round: state.round,
        test_accuracy: state.model.accuracy(ds, &state.test)?,
        cost_round,
        cost_cumulative: state.cost_cumulative,
        tiers,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// One full simulated round.
pub fn run_round(
    state: &mut RunState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(RoundRecord, Vec<TimingRecord>)> {
    let start = Instant::now();
    let sel = select_round(state, ds, cfg)?;
    let ann = simulate_annotations(state, ds, cfg, &sel);
    let mut rec = apply_round(state, ds, cfg, &sel, &ann)?;
    rec.wall_time = start.elapsed().as_secs_f64();
    Ok((rec, ann))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn results_path(out_dir: &Path, run: usize) -> PathBuf {
    out_dir.join(format!("run_{run:03}.json"))
}

fn persist(out_dir: &Path, run: usize, cfg: &ExperimentConfig, records: &[RoundRecord]) -> Result<()> {
    let doc = ResultsFile {
        config: cfg.clone(),
        rounds: records.to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    write_atomic(&results_path(out_dir, run), &bytes)
}

/// Executes one run, persisting the results file after every round when
/// `out_dir` is given.
pub fn run_single(cfg: &ExperimentConfig, ds: &Dataset, run: usize, out_dir: Option<&Path>) -> Result<RunResult> {
    let (mut state, first) = prepare_run(cfg, ds, run)?;
    let mut records = vec![first];
    let mut timings = Vec::new();
    if let Some(dir) = out_dir {
        persist(dir, run, cfg, &records)?;
    }
    let mut truncated = false;
    for _ in 0..cfg.rounds {
        match run_round(&mut state, ds, cfg) {
            Ok((rec, ann)) => {
                records.push(rec);
                timings.extend(ann);
            }
            Err(Error::BudgetExhausted { requested, available }) => {
                log::warn!("run {run}: budget {requested} exceeds {available} unlabeled items; stopping");
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(dir) = out_dir {
            persist(dir, run, cfg, &records)?;
        }
    }
    if let Some(dir) = out_dir {
        annotate::save_timing_csv(&timings, dir.join(format!("run_{run:03}_timings.csv")))?;
        write_atomic(&dir.join(format!("run_{run:03}_model.talm")), &state.model.to_bytes())?;
    }
    Ok(RunResult {
        run,
        records,
        truncated,
        timings,
    })
}

/// Runs every configured run. Each run's seed is derived from
/// `(rng_seed, run)`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.thread_count.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|r| run_single(cfg, &ds, r, out_dir))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                num_classes: 4,
                per_class: 40,
                dim: 4,
                spread: 1.0,
                seed: 3,
            },
            test_fraction: 0.2,
            seed_size: 20,
            b1: 4,
            b2: 4,
            b3: 2,
            rounds: 2,
            train: TrainConfig {
                t_max: 30,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn round_conserves_pool() {
        let cfg = small_cfg();
        let ds = cfg.dataset.load().unwrap();
        let (mut state, first) = prepare_run(&cfg, &ds, 0).unwrap();
        assert_eq!(first.round, 0);
        let before_u = state.pool.unlabeled().len();
        let before_l = state.pool.labeled().len();
        let (rec, ann) = run_round(&mut state, &ds, &cfg).unwrap();
        assert_eq!(state.pool.unlabeled().len(), before_u - 10);
        assert_eq!(state.pool.labeled().len(), before_l + 10);
        assert_eq!(ann.len(), 8);
        assert_eq!(rec.tiers.hard.selected, 4);
        assert_eq!(rec.tiers.intermediate.selected, 4);
        assert_eq!(rec.tiers.easy.selected, 2);
    }

    #[test]
    fn auto_label_only_round_is_free() {
        let cfg = ExperimentConfig {
            b1: 0,
            b2: 0,
            b3: 5,
            ..small_cfg()
        };
        let ds = cfg.dataset.load().unwrap();
        let (mut state, _) = prepare_run(&cfg, &ds, 0).unwrap();
        let before = state.pool.labeled().len();
        let (rec, _) = run_round(&mut state, &ds, &cfg).unwrap();
        assert_eq!(rec.cost_round, 0.0);
        assert_eq!(state.pool.labeled().len(), before + 5);
    }

    #[test]
    fn budget_exhaustion_truncates() {
        let cfg = ExperimentConfig {
            b1: 40,
            b2: 40,
            b3: 40,
            rounds: 5,
            ..small_cfg()
        };
        let res = run_experiment(&cfg, None).unwrap();
        assert!(res[0].truncated);
        assert!(res[0].records.len() < 6);
    }

    #[test]
    fn zero_rounds_only_seed_record() {
        let cfg = ExperimentConfig {
            rounds: 0,
            ..small_cfg()
        };
        let res = run_experiment(&cfg, None).unwrap();
        assert_eq!(res[0].records.len(), 1);
        assert_eq!(res[0].records[0].cost_cumulative, 0.0);
    }
}
