//! Hard-tier selectors (entropy sampling, BADGE) and the easy-tier
//! highest-confidence auto-labeler.
//!
//! Probability and embedding matrices are indexed by dataset row; `unlabeled`
//! names which rows are eligible.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hard,
    Intermediate,
    Easy,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Hard, Tier::Intermediate, Tier::Easy];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Hard => "hard",
            Tier::Intermediate => "intermediate",
            Tier::Easy => "easy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub index: usize,
    pub suggested_label: usize,
    pub tier: Tier,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionBatch {
    pub items: Vec<SelectedItem>,
    /// Set when k-means++ ran out of D^2 mass and fell back to uniform draws.
    pub fallback_uniform: bool,
}

impl SelectionBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.index).collect()
    }

    pub fn extend(&mut self, other: SelectionBatch) {
        self.items.extend(other.items);
        self.fallback_uniform |= other.fallback_uniform;
    }
}

/// Natural-log entropy with `0 log 0 = 0`.
pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_budget(b: usize, unlabeled: &[usize], rows: usize) -> Result<()> {
    if b > unlabeled.len() {
        return Err(Error::invalid(format!(
            "budget {b} exceeds {} unlabeled items",
            unlabeled.len()
        )));
    }
    if let Some(&i) = unlabeled.iter().find(|&&i| i >= rows) {
        return Err(Error::invalid(format!("index {i} out of range ({rows} rows)")));
    }
    Ok(())
}

/// Top `b` by `score`, descending, ties by lower index.
fn top_by_score(
    probs: &DMatrix<f64>,
    unlabeled: &[usize],
    b: usize,
    tier: Tier,
    score: impl Fn(usize) -> f64,
) -> SelectionBatch {
    let mut scored: Vec<(usize, f64)> = unlabeled.iter().map(|&i| (i, score(i))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    SelectionBatch {
        items: scored
            .into_iter()
            .take(b)
            .map(|(index, score)| SelectedItem {
                index,
                suggested_label: argmax(probs.row(index).iter().copied()),
                tier,
                score,
            })
            .collect(),
        fallback_uniform: false,
    }
}

pub fn entropy_select(probs: &DMatrix<f64>, unlabeled: &[usize], b: usize) -> Result<SelectionBatch> {
    check_budget(b, unlabeled, probs.nrows())?;
    Ok(top_by_score(probs, unlabeled, b, Tier::Hard, |i| {
        entropy(probs.row(i).iter().copied())
    }))
}

/// Highest-confidence predictions; with `min_confidence` set, items below it
/// are never returned (the batch may then be short).
pub fn auto_label_select(
    probs: &DMatrix<f64>,
    unlabeled: &[usize],
    b3: usize,
    min_confidence: Option<f64>,
) -> Result<SelectionBatch> {
    check_budget(b3, unlabeled, probs.nrows())?;
    let mut batch = top_by_score(probs, unlabeled, b3, Tier::Easy, |i| probs.row(i).max());
    if let Some(t) = min_confidence {
        batch.items.retain(|it| it.score >= t);
    }
    Ok(batch)
}

fn sq_dist(a: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(a.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding over the unlabeled gradient embeddings.
///
/// The first centre is uniform; each later one is drawn with probability
/// proportional to its squared distance to the nearest chosen centre.
pub fn badge_select(
    embeddings: &DMatrix<f64>,
    unlabeled: &[usize],
    probs: &DMatrix<f64>,
    b: usize,
    rng_seed: u64,
) -> Result<SelectionBatch> {
    check_budget(b, unlabeled, embeddings.nrows().min(probs.nrows()))?;
    let mut batch = SelectionBatch::default();
    if b == 0 {
        return Ok(batch);
    }
    let mut rng = rng::seeded(rng_seed);
    let n = unlabeled.len();
    let mut chosen = vec![false; n];
    let mut d2 = vec![f64::INFINITY; n];

    let push = |pos: usize, score: f64, batch: &mut SelectionBatch| {
        let index = unlabeled[pos];
        batch.items.push(SelectedItem {
            index,
            suggested_label: argmax(probs.row(index).iter().copied()),
            tier: Tier::Hard,
            score,
        });
    };

    let mut last = rng.random_range(0..n);
    chosen[last] = true;
    push(last, embeddings.row(unlabeled[last]).norm_squared(), &mut batch);

    for _ in 1..b {
        for pos in 0..n {
            if !chosen[pos] {
                d2[pos] = d2[pos].min(sq_dist(embeddings, unlabeled[pos], unlabeled[last]));
            }
        }
        let mass: f64 = (0..n).filter(|&p| !chosen[p]).map(|p| d2[p]).sum();
        let pick = if mass > 0.0 && mass.is_finite() {
            let mut target = rng.random::<f64>() * mass;
            let mut pick = None;
            for pos in (0..n).filter(|&p| !chosen[p]) {
                if d2[pos] <= 0.0 {
                    continue;
                }
                pick = Some(pos);
                if target < d2[pos] {
                    break;
                }
                target -= d2[pos];
            }
            pick.expect("positive mass implies a positive entry")
        } else {
            batch.fallback_uniform = true;
            let free: Vec<usize> = (0..n).filter(|&p| !chosen[p]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let score = if d2[pick].is_finite() { d2[pick] } else { 0.0 };
        push(pick, score, &mut batch);
        last = pick;
    }
    Ok(batch)
}
