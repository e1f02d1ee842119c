//! Intermediate-tier selection: per-class greedy LogDetMI maximization against
//! the class-restricted labeled set, with max-marginal deduplication.
//!
//! The greedy step keeps two incremental Cholesky factorizations over the
//! selected set, one of the regularized kernel `K = S_A + lambda I` and one of
//! its Schur complement `T = K - S_AQ S_Q^{-1} S_AQ^T`. Adding `x` to `A`
//! changes LogDetMI by `ln d_K(x) - ln d_T(x)`, where `d(x)` is the pivot `x`
//! would receive in each factorization.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{split_evenly, Dataset, PoolState};
use crate::error::{Error, Result};
use crate::kernels::{Cholesky, ZERO_NORM};
use crate::model::ModelParams;
use crate::tier_select::{SelectedItem, SelectionBatch, Tier};

/// Selected items in greedy order with the gain each one realized.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub selected: Vec<usize>,
    pub gains: Vec<f64>,
    pub query_class: usize,
}

/// Rows scaled to unit norm; zero rows stay zero so their cosine with
/// anything (themselves included) is 0.
fn unit_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n < ZERO_NORM {
            row.fill(0.0);
        } else {
            row /= n;
        }
    }
    out
}

/// Incremental greedy state for one query set.
pub struct GreedyState<'a> {
    cand: &'a DMatrix<f64>,
    /// `L_Q^{-1} S_QA`, one column per candidate.
    proj: DMatrix<f64>,
    rows_k: Vec<Vec<f64>>,
    rows_t: Vec<Vec<f64>>,
    piv_k: Vec<f64>,
    piv_t: Vec<f64>,
    taken: Vec<bool>,
    pub trace: GreedyTrace,
}

impl<'a> GreedyState<'a> {
    /// `cand` and `query` must already be unit-normalized (see [`unit_rows`]).
    fn new(cand: &'a DMatrix<f64>, query: &DMatrix<f64>, lambda: f64, query_class: usize) -> Result<Self> {
        if query.nrows() == 0 {
            return Err(Error::invalid("query set is empty"));
        }
        if query.ncols() != cand.ncols() {
            return Err(Error::invalid("query and candidate embeddings differ in width"));
        }
        let mut s_q = query * query.transpose();
        for i in 0..s_q.nrows() {
            s_q[(i, i)] += lambda;
        }
        let lq = Cholesky::factor(&s_q)?;
        let mut proj = query * cand.transpose();
        lq.solve_lower(&mut proj);

        let m = cand.nrows();
        let piv_k: Vec<f64> = (0..m).map(|i| cand.row(i).norm_squared() + lambda).collect();
        let piv_t = (0..m).map(|i| piv_k[i] - proj.column(i).norm_squared()).collect();
        Ok(GreedyState {
            cand,
            proj,
            rows_k: vec![Vec::new(); m],
            rows_t: vec![Vec::new(); m],
            piv_k,
            piv_t,
            taken: vec![false; m],
            trace: GreedyTrace {
                selected: Vec::new(),
                gains: Vec::new(),
                query_class,
            },
        })
    }

    /// Marginal gain of adding candidate `i` to the current set.
    pub fn gain(&self, i: usize) -> Result<f64> {
        let (dk, dt) = (self.piv_k[i], self.piv_t[i]);
        if !(dk > 0.0) || !(dt > 0.0) {
            return Err(Error::NumericalDomain {
                pivot: self.trace.selected.len(),
                message: format!("non-positive pivot for candidate {i} (kernel {dk:e}, schur {dt:e}); increase lambda"),
            });
        }
        Ok(dk.ln() - dt.ln())
    }

    /// Adds the best eligible candidate. Returns `None` when none is left.
    pub fn step(&mut self, eligible: impl Fn(usize) -> bool) -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.cand.nrows() {
            if self.taken[i] || !eligible(i) {
                continue;
            }
            let g = self.gain(i)?;
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let Some((pick, gain)) = best else {
            return Ok(None);
        };
        self.add(pick);
        self.trace.selected.push(pick);
        self.trace.gains.push(gain);
        Ok(Some((pick, gain)))
    }

    fn add(&mut self, pick: usize) {
        self.taken[pick] = true;
        let sk = self.piv_k[pick].sqrt();
        let st = self.piv_t[pick].sqrt();
        let pick_row = self.cand.row(pick);
        let pick_proj = self.proj.column(pick);
        for j in 0..self.cand.nrows() {
            if self.taken[j] {
                continue;
            }
            let sim = pick_row.dot(&self.cand.row(j));
            let prev_k: f64 = self.rows_k[pick].iter().zip(&self.rows_k[j]).map(|(a, b)| a * b).sum();
            let ek = (sim - prev_k) / sk;
            let prev_t: f64 = self.rows_t[pick].iter().zip(&self.rows_t[j]).map(|(a, b)| a * b).sum();
            let et = (sim - pick_proj.dot(&self.proj.column(j)) - prev_t) / st;
            self.rows_k[j].push(ek);
            self.rows_t[j].push(et);
            self.piv_k[j] -= ek * ek;
            self.piv_t[j] -= et * et;
        }
    }
}

/// Greedy maximization of `I_f(A; Q)` over candidate rows, `|A| = k`.
pub fn greedy_maximize(candidates: &DMatrix<f64>, query: &DMatrix<f64>, k: usize, lambda: f64) -> Result<GreedyTrace> {
    if k > candidates.nrows() {
        return Err(Error::invalid(format!(
            "k={k} exceeds {} candidates",
            candidates.nrows()
        )));
    }
    let cand = unit_rows(candidates);
    let q = unit_rows(query);
    let mut state = GreedyState::new(&cand, &q, lambda, 0)?;
    for _ in 0..k {
        state.step(|_| true)?;
    }
    Ok(state.trace)
}

/// Per-class selection quotas, indexed by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassQuota {
    pub per_class: Vec<usize>,
}

impl ClassQuota {
    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }
}

/// Equal quotas over classes that have labeled examples; the remainder goes
/// one apiece to the classes with the fewest labels (ties: lower class).
pub fn compute_quotas(pool: &PoolState, num_classes: usize, b2: usize) -> Result<ClassQuota> {
    let counts = pool.class_counts(num_classes);
    let mut present: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::DegeneratePool("no class has labeled examples".into()));
    }
    let base = b2 / present.len();
    let rem = b2 % present.len();
    let mut per_class = vec![0; num_classes];
    for &c in &present {
        per_class[c] = base;
    }
    present.sort_by_key(|&c| (counts[c], c));
    for &c in present.iter().take(rem) {
        per_class[c] += 1;
    }
    Ok(ClassQuota { per_class })
}

/// Maps each index to the class under which it realized the largest gain
/// (ties: lower class).
pub fn max_marginal_dedup(candidates: &BTreeMap<usize, Vec<(usize, f64)>>) -> BTreeMap<usize, usize> {
    candidates
        .iter()
        .filter_map(|(&idx, gains)| {
            gains
                .iter()
                .copied()
                .reduce(|best, cur| {
                    if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                        cur
                    } else {
                        best
                    }
                })
                .map(|(class, _)| (idx, class))
        })
        .collect()
}

/// Runs per-class greedy selection over `candidates` (dataset indices) with
/// the given per-class quotas, deduplicates, and refills to keep the batch
/// size.
pub fn smi_select(
    pool: &PoolState,
    ds: &Dataset,
    model: &ModelParams,
    candidates: &[usize],
    quotas: &ClassQuota,
    lambda: f64,
) -> Result<SelectionBatch> {
    let target = quotas.total().min(candidates.len());
    if target == 0 {
        return Ok(SelectionBatch::default());
    }
    let cand_emb = unit_rows(&model.grad_embeddings(&ds.rows_f64(candidates), None)?);

    let classes: Vec<usize> = (0..quotas.per_class.len())
        .filter(|&c| quotas.per_class[c] > 0)
        .collect();
    let queries: Vec<DMatrix<f64>> = classes
        .iter()
        .map(|&c| {
            let idx = pool.labeled_in_class(c);
            let labels = vec![c; idx.len()];
            model
                .grad_embeddings(&ds.rows_f64(&idx), Some(&labels))
                .map(|g| unit_rows(&g))
        })
        .collect::<Result<_>>()?;

    let mut states: Vec<GreedyState> = classes
        .par_iter()
        .zip(queries.par_iter())
        .map(|(&c, q)| {
            let mut st = GreedyState::new(&cand_emb, q, lambda, c)?;
            for _ in 0..quotas.per_class[c].min(candidates.len()) {
                st.step(|_| true)?;
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;

    let mut hits: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for st in &states {
        for (&pos, &g) in st.trace.selected.iter().zip(&st.trace.gains) {
            hits.entry(pos).or_default().push((st.trace.query_class, g));
        }
    }
    let assigned = max_marginal_dedup(&hits);

    // position -> (class, gain)
    let mut chosen: BTreeMap<usize, (usize, f64)> = assigned
        .iter()
        .map(|(&pos, &class)| {
            let gain = hits[&pos]
                .iter()
                .find(|(c, _)| *c == class)
                .map(|&(_, g)| g)
                .unwrap_or(0.0);
            (pos, (class, gain))
        })
        .collect();

    for st in states.iter_mut() {
        let class = st.trace.query_class;
        let quota = quotas.per_class[class];
        let mut kept = chosen.values().filter(|(c, _)| *c == class).count();
        while kept < quota && chosen.len() < target {
            let taken: Vec<bool> = (0..candidates.len()).map(|p| chosen.contains_key(&p)).collect();
            match st.step(|p| !taken[p])? {
                Some((pos, gain)) => {
                    chosen.insert(pos, (class, gain));
                    kept += 1;
                }
                None => break,
            }
        }
    }

    let mut items: Vec<SelectedItem> = chosen
        .into_iter()
        .map(|(pos, (class, gain))| SelectedItem {
            index: candidates[pos],
            suggested_label: class,
            tier: Tier::Intermediate,
            score: gain,
        })
        .collect();
    items.sort_by(|a, b| a.suggested_label.cmp(&b.suggested_label).then(a.index.cmp(&b.index)));
    Ok(SelectionBatch {
        items,
        fallback_uniform: false,
    })
}

/// Intermediate-tier selection over the whole unlabeled pool.
pub fn smi_suggest(
    pool: &PoolState,
    ds: &Dataset,
    model: &ModelParams,
    b2: usize,
    lambda: f64,
) -> Result<SelectionBatch> {
    let unlabeled = pool.unlabeled_vec();
    if b2 > unlabeled.len() {
        return Err(Error::invalid(format!(
            "b2={b2} exceeds {} unlabeled items",
            unlabeled.len()
        )));
    }
    if b2 == 0 {
        return Ok(SelectionBatch::default());
    }
    let quotas = compute_quotas(pool, ds.num_classes(), b2)?;
    smi_select(pool, ds, model, &unlabeled, &quotas, lambda)
}

/// Splits each class quota across `parts` partitions by the floor-plus-
/// remainder rule.
pub fn split_quotas(quotas: &ClassQuota, parts: usize) -> Vec<ClassQuota> {
    let split: Vec<Vec<usize>> = quotas.per_class.iter().map(|&k| split_evenly(k, parts)).collect();
    (0..parts)
        .map(|p| ClassQuota {
            per_class: split.iter().map(|s| s[p]).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::logdetmi_of_subset;

    #[test]
    fn quota_examples() {
        let ds = Dataset::new(
            vec![0.0; 16],
            1,
            vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3],
            4,
            "q",
        )
        .unwrap();
        let all: BTreeMap<usize, usize> = (0..4).map(|i| (i, ds.label(i))).collect();
        let pool = PoolState::new(all, (4..16).collect(), &ds).unwrap();
        assert_eq!(compute_quotas(&pool, 4, 8).unwrap().per_class, vec![2, 2, 2, 2]);

        let ds3 = Dataset::new(vec![0.0; 20], 1, vec![0; 20], 3, "q").unwrap();
        let mut labeled = BTreeMap::new();
        let mut next = 0;
        for (c, n) in [(0, 5), (1, 2), (2, 9)] {
            for _ in 0..n {
                labeled.insert(next, c);
                next += 1;
            }
        }
        let pool = PoolState::new(labeled, (16..20).collect(), &ds3).unwrap();
        assert_eq!(compute_quotas(&pool, 3, 7).unwrap().per_class, vec![2, 3, 2]);

        let labeled: BTreeMap<usize, usize> = [(0, 0), (1, 1)].into_iter().collect();
        let pool = PoolState::new(labeled, (2..20).collect(), &ds3).unwrap();
        assert_eq!(compute_quotas(&pool, 3, 4).unwrap().per_class, vec![2, 2, 0]);

        let pool = PoolState::new(BTreeMap::new(), (0..20).collect(), &ds3).unwrap();
        assert!(matches!(compute_quotas(&pool, 3, 4), Err(Error::DegeneratePool(_))));
    }

    #[test]
    fn dedup_examples() {
        let mut m = BTreeMap::new();
        m.insert(4, vec![(1, 0.3)]);
        m.insert(7, vec![(2, 0.9), (5, 0.4)]);
        m.insert(9, vec![(3, 0.5), (1, 0.5)]);
        let out = max_marginal_dedup(&m);
        assert_eq!(out[&4], 1);
        assert_eq!(out[&7], 2);
        assert_eq!(out[&9], 1);
    }

    #[test]
    fn single_step_matches_exhaustive() {
        let cand = DMatrix::from_row_slice(4, 3, &[1.0, 0.1, 0.0, 0.0, 1.0, 0.2, 0.5, 0.5, 0.5, -1.0, 0.0, 0.3]);
        let query = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.9, 0.1, 0.0]);
        let trace = greedy_maximize(&cand, &query, 1, 1e-3).unwrap();
        let best = (0..4)
            .map(|i| (i, logdetmi_of_subset(&cand, &query, &[i], 1e-3).unwrap()))
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        assert_eq!(trace.selected, vec![best.0]);
        assert!((trace.gains[0] - best.1).abs() < 1e-10);
    }

    #[test]
    fn k_too_large_and_empty_query_rejected() {
        let cand = DMatrix::from_element(2, 2, 1.0);
        assert!(greedy_maximize(&cand, &cand, 3, 1e-3).is_err());
        assert!(greedy_maximize(&cand, &DMatrix::zeros(0, 2), 1, 1e-3).is_err());
    }

    #[test]
    fn split_quotas_conserves() {
        let q = ClassQuota {
            per_class: vec![3, 0, 5],
        };
        let parts = split_quotas(&q, 2);
        assert_eq!(parts[0].per_class, vec![2, 0, 3]);
        assert_eq!(parts[1].per_class, vec![1, 0, 2]);
    }
}
