//! Simulated annotator, verify-vs-correct labeling cost, labeling efficiency
//! and the `c_a : c_v` timing-ratio statistics.
//!
//! Two quantities are kept apart: the *accounting* cost, `c_v * n_correct +
//! c_a * (n - n_correct)`, which is deterministic, and the *measured* elapsed
//! time of each record, which carries timing noise (or, for live sessions,
//! human reaction time).

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OracleMode {
    /// Always returns the ground truth.
    Perfect,
    /// Final label flips to a uniformly chosen wrong class with probability `epsilon`.
    Noisy { epsilon: f64 },
    /// Ignores the incoming suggestion and shows the truth with probability `q`,
    /// else a uniformly chosen wrong class.
    BernoulliSuggestion { q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub c_a: f64,
    pub c_v: f64,
    /// Sigma of the multiplicative log-normal timing noise.
    pub timing_noise: f64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Perfect,
            c_a: 3.0,
            c_v: 1.0,
            timing_noise: 0.0,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            OracleMode::Noisy { epsilon } if !(0.0..1.0).contains(&epsilon) => {
                return Err(Error::invalid(format!("epsilon must be in [0,1), got {epsilon}")))
            }
            OracleMode::BernoulliSuggestion { q } if !(0.0..=1.0).contains(&q) => {
                return Err(Error::invalid(format!("q must be in [0,1], got {q}")))
            }
            _ => {}
        }
        if !(self.c_a > 0.0 && self.c_v > 0.0) {
            return Err(Error::invalid("c_a and c_v must be positive"));
        }
        if !(self.timing_noise >= 0.0) {
            return Err(Error::invalid("timing_noise must be non-negative"));
        }
        if self.c_a < self.c_v {
            log::warn!(
                "c_a ({}) < c_v ({}): correcting is modeled as cheaper than verifying",
                self.c_a,
                self.c_v
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub item: usize,
    pub suggestion_correct: bool,
    pub final_label: usize,
    /// Seconds.
    pub elapsed: f64,
    /// Final label disagrees with ground truth; excluded from statistics.
    pub discarded: bool,
}

fn wrong_class(truth: usize, num_classes: usize, rng: &mut Rng) -> usize {
    let k = rng.random_range(0..num_classes - 1);
    if k >= truth {
        k + 1
    } else {
        k
    }
}

pub fn oracle_annotate(
    item: usize,
    suggestion: usize,
    truth: usize,
    num_classes: usize,
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> TimingRecord {
    let shown = match cfg.mode {
        OracleMode::BernoulliSuggestion { q } => {
            if rng.random::<f64>() < q {
                truth
            } else {
                wrong_class(truth, num_classes, rng)
            }
        }
        _ => suggestion,
    };
    let suggestion_correct = shown == truth;
    let final_label = match cfg.mode {
        OracleMode::Noisy { epsilon } if rng.random::<f64>() < epsilon => wrong_class(truth, num_classes, rng),
        _ => truth,
    };
    let base = if suggestion_correct { cfg.c_v } else { cfg.c_a };
    let factor = if cfg.timing_noise > 0.0 {
        Normal::new(0.0, cfg.timing_noise)
            .expect("validated sigma")
            .sample(rng)
            .exp()
    } else {
        1.0
    };
    TimingRecord {
        item,
        suggestion_correct,
        final_label,
        elapsed: base * factor,
        discarded: final_label != truth,
    }
}

/// `c_v * n_correct + c_a * (n - n_correct)` over non-discarded records.
pub fn labeling_cost(records: &[TimingRecord], c_a: f64, c_v: f64) -> f64 {
    let kept = records.iter().filter(|r| !r.discarded);
    let (n, correct) = kept.fold((0usize, 0usize), |(n, c), r| {
        (n + 1, c + usize::from(r.suggestion_correct))
    });
    cost_from_counts(correct, n, c_a, c_v)
}

pub fn cost_from_counts(n_correct: usize, n: usize, c_a: f64, c_v: f64) -> f64 {
    c_v * n_correct as f64 + c_a * (n - n_correct) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean_cv: f64,
    pub median_cv: f64,
    pub mean_ca: f64,
    pub median_ca: f64,
    pub mean_ratio: f64,
    pub median_ratio: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[mid - 1] + s[mid])
    } else {
        s[mid]
    }
}

pub fn ratio_stats(records: &[TimingRecord]) -> Result<RatioStats> {
    let (cv, ca): (Vec<&TimingRecord>, Vec<&TimingRecord>) = records
        .iter()
        .filter(|r| !r.discarded)
        .partition(|r| r.suggestion_correct);
    if cv.is_empty() || ca.is_empty() {
        return Err(Error::InsufficientData(format!(
            "need at least one verified and one corrected record (have {} and {})",
            cv.len(),
            ca.len()
        )));
    }
    let cv: Vec<f64> = cv.iter().map(|r| r.elapsed).collect();
    let ca: Vec<f64> = ca.iter().map(|r| r.elapsed).collect();
    let (mean_cv, median_cv, mean_ca, median_ca) = (mean(&cv), median(&cv), mean(&ca), median(&ca));
    Ok(RatioStats {
        mean_cv,
        median_cv,
        mean_ca,
        median_ca,
        mean_ratio: mean_ca / mean_cv,
        median_ratio: median_ca / median_cv,
    })
}

/// Ratio summaries across several subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectAggregate {
    /// Average of each subject's `mean_ratio`.
    pub mean_of_mean_ratios: f64,
    /// Average of each subject's `median_ratio`.
    pub mean_of_median_ratios: f64,
    /// Ratios computed once over all subjects' records pooled together.
    pub pooled: RatioStats,
}

pub fn aggregate_subjects(subjects: &[Vec<TimingRecord>]) -> Result<SubjectAggregate> {
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subjects".into()));
    }
    let per: Vec<RatioStats> = subjects.iter().map(|s| ratio_stats(s)).collect::<Result<_>>()?;
    let all: Vec<TimingRecord> = subjects.iter().flatten().cloned().collect();
    Ok(SubjectAggregate {
        mean_of_mean_ratios: mean(&per.iter().map(|r| r.mean_ratio).collect::<Vec<_>>()),
        mean_of_median_ratios: mean(&per.iter().map(|r| r.median_ratio).collect::<Vec<_>>()),
        pooled: ratio_stats(&all)?,
    })
}

/// One simulated labeling-tool session: `items` random images with truths
/// drawn uniformly, annotated under `cfg`.
pub fn simulate_subject(items: usize, num_classes: usize, cfg: &OracleConfig) -> Vec<TimingRecord> {
    let mut rng = rng::seeded(cfg.rng_seed);
    (0..items)
        .map(|item| {
            let truth = rng.random_range(0..num_classes);
            oracle_annotate(item, truth, truth, num_classes, cfg, &mut rng)
        })
        .collect()
}

fn cost_to_reach(curve: &[(f64, f64)], target: f64, name: &str) -> Result<f64> {
    if curve.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::invalid(format!("curve {name} has decreasing cost")));
    }
    let unreachable = || Error::UnreachableTarget {
        curve: name.to_owned(),
        target,
    };
    let first = curve.first().ok_or_else(unreachable)?;
    if first.1 >= target {
        return Ok(first.0);
    }
    for w in curve.windows(2) {
        let ((c0, a0), (c1, a1)) = (w[0], w[1]);
        if a0 < target && a1 >= target {
            return Ok(c0 + (target - a0) / (a1 - a0) * (c1 - c0));
        }
    }
    Err(unreachable())
}

/// `cost_b(target) / cost_a(target)` on piecewise-linear (cost, accuracy)
/// curves. Values above 1 mean `a` reaches the target more cheaply.
pub fn labeling_efficiency(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)], target_acc: f64) -> Result<f64> {
    let ca = cost_to_reach(curve_a, target_acc, "a")?;
    let cb = cost_to_reach(curve_b, target_acc, "b")?;
    if ca <= 0.0 || cb <= 0.0 {
        return Err(Error::invalid(format!(
            "target {target_acc} is reached at zero cost; choose a target above the starting accuracy"
        )));
    }
    Ok(cb / ca)
}

/// Accuracy of a piecewise-linear curve at `cost`, clamped to its ends.
pub fn accuracy_at_cost(curve: &[(f64, f64)], cost: f64) -> Option<f64> {
    let first = curve.first()?;
    if cost <= first.0 {
        return Some(first.1);
    }
    for w in curve.windows(2) {
        let ((c0, a0), (c1, a1)) = (w[0], w[1]);
        if cost <= c1 {
            if c1 == c0 {
                return Some(a1);
            }
            return Some(a0 + (cost - c0) / (c1 - c0) * (a1 - a0));
        }
    }
    curve.last().map(|p| p.1)
}

/// Average accuracy over costs in `[0, max_cost]`: the area under the
/// piecewise-linear curve divided by `max_cost`. Points past the last record
/// hold the final accuracy.
pub fn mean_accuracy_over_cost(curve: &[(f64, f64)], max_cost: f64) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::InsufficientData("empty accuracy curve".into()));
    }
    if !(max_cost > 0.0) || !max_cost.is_finite() {
        return Err(Error::invalid(format!("max_cost must be positive, got {max_cost}")));
    }
    // knots: 0, every curve cost inside the range, max_cost
    let mut knots = vec![0.0];
    knots.extend(curve.iter().map(|p| p.0).filter(|&c| c > 0.0 && c < max_cost));
    knots.push(max_cost);
    let at = |c: f64| accuracy_at_cost(curve, c).unwrap_or(0.0);
    let area: f64 = knots
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (at(w[0]) + at(w[1])))
        .sum();
    Ok(area / max_cost)
}

pub fn write_timing_csv(records: &[TimingRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "item,correct,final_label,elapsed,discarded")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.item, r.suggestion_correct, r.final_label, r.elapsed, r.discarded
        )?;
    }
    Ok(())
}

pub fn save_timing_csv(records: &[TimingRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_timing_csv(records, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
